//! Re-identification of individuals from their spot patterns: a synthetic
//! corpus generator, a from-scratch convolutional embedding network trained
//! with online triplet mining, an exact-search embedding database, and the
//! verification / top-k evaluation harness.

pub mod cli;
pub mod config;
pub mod evaluation;
pub mod experiments;
pub mod imageio;
pub mod mining;
pub mod net;
pub mod retrieval;
pub mod rng;
pub mod service;
pub mod synth;
pub mod tensor;
pub mod trainer;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ModelConfig, Parameters};
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(NetError::Config(format!("optimizer: invalid Adam hyper-parameters {self:?}")))
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Parameters<f32>,
    pub second_moment: Parameters<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &ModelConfig, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: Parameters::zeros(model),
            second_moment: Parameters::zeros(model),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(
    params: &mut Parameters<f32>,
    grads: &Gradients<f32>,
    state: &mut OptimizerState,
) -> Result<(), NetError> {
    let congruent = |a: &Parameters<f32>, b: &Parameters<f32>| {
        let (ta, tb) = (a.tensors(), b.tensors());
        ta.len() == tb.len() && ta.iter().zip(&tb).all(|(x, y)| x.shape() == y.shape())
    };
    if !congruent(params, grads) || !congruent(params, &state.first_moment) {
        return Err(NetError::Shape("optimizer: parameters, gradients and moments differ in shape".into()));
    }
    for (i, g) in grads.tensors().iter().enumerate() {
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(format!(
                "gradient tensor {i} has a non-finite value at index {j}"
            )));
        }
    }
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (c1, c2) = ((1.0 - cfg.beta1) as f32, (1.0 - cfg.beta2) as f32);
    let mut ps = params.tensors_mut();
    let mut ms = state.first_moment.tensors_mut();
    let mut vs = state.second_moment.tensors_mut();
    for (k, g) in grads.tensors().iter().enumerate() {
        let p = ps[k].data_mut();
        let m = ms[k].data_mut();
        let v = vs[k].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            p[j] = (p[j] as f64 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)) as f32;
        }
    }
    Ok(())
}

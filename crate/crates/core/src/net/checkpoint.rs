//! Checkpoint container:
//!
//! ```text
//! "PIDM" | u32 LE version | u64 LE header length | JSON header | f32 LE blobs
//! ```
//!
//! The header holds the model config and an ordered tensor manifest
//! (name, shape, byte offset, byte length); offsets are relative to the start
//! of the blob section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, Parameters};
use super::NetError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PIDM";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn format_err(offset: usize, reason: impl Into<String>) -> NetError {
    NetError::Checkpoint {
        offset,
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(params: &Parameters<f32>, config: &ModelConfig) -> Result<Vec<u8>, NetError> {
    config.validate()?;
    if !params.matches(config) {
        return Err(NetError::Shape("parameters do not match the model config".into()));
    }
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for ((name, shape), t) in config.tensor_shapes().into_iter().zip(params.tensors()) {
        let length = (t.len() * 4) as u64;
        entries.push(TensorEntry {
            name,
            shape,
            offset,
            length,
        });
        offset += length;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        config: config.clone(),
        tensors: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Parameters<f32>, ModelConfig), NetError> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated before magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, "bad magic (expected PIDM)"));
    }
    if bytes.len() < PREFIX {
        return Err(format_err(bytes.len(), "truncated prefix"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = PREFIX
        .checked_add(usize::try_from(header_len).map_err(|_| format_err(8, "header length overflows"))?)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| format_err(8, format!("header length {header_len} runs past end of file ({} bytes)", bytes.len())))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| format_err(PREFIX, format!("malformed header: {e}")))?;
    let config = header.config;
    config.validate().map_err(|e| format_err(PREFIX, e.to_string()))?;
    let expected = config.tensor_shapes();
    if expected.len() != header.tensors.len() {
        return Err(format_err(PREFIX, "tensor manifest does not match the model config"));
    }
    let blobs = &bytes[header_end..];
    let mut params = Parameters::<f32>::zeros(&config);
    let mut cursor = 0u64;
    for ((entry, (name, shape)), target) in header.tensors.iter().zip(&expected).zip(params.tensors_mut()) {
        if &entry.name != name || &entry.shape != shape {
            return Err(format_err(
                PREFIX,
                format!("tensor {} {:?} where {name} {shape:?} was expected", entry.name, entry.shape),
            ));
        }
        let count: usize = shape.iter().product();
        if entry.offset != cursor || entry.length != (count * 4) as u64 {
            return Err(format_err(PREFIX, format!("tensor {name} has inconsistent offset/length")));
        }
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        if end > blobs.len() {
            return Err(format_err(
                header_end + blobs.len(),
                format!("truncated: tensor {name} needs bytes up to {}", header_end + end),
            ));
        }
        let data: Vec<f32> = blobs[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        *target = Tensor::from_vec(shape, data).map_err(|e| format_err(header_end + start, e.to_string()))?;
        cursor += entry.length;
    }
    if cursor as usize != blobs.len() {
        return Err(format_err(
            header_end + cursor as usize,
            format!("{} trailing bytes", blobs.len() - cursor as usize),
        ));
    }
    if !params.all_finite() {
        return Err(format_err(header_end, "non-finite parameter value"));
    }
    Ok((params, config))
}

pub fn save_checkpoint(params: &Parameters<f32>, config: &ModelConfig, path: &Path) -> Result<Vec<u8>, NetError> {
    let bytes = encode_checkpoint(params, config)?;
    std::fs::write(path, &bytes).map_err(|e| NetError::io(path, e))?;
    Ok(bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(Parameters<f32>, ModelConfig), NetError> {
    let bytes = std::fs::read(path).map_err(|e| NetError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{forward, init_params};

    #[test]
    fn round_trip_is_bit_exact_and_forward_identical() {
        let cfg = ModelConfig {
            l2_normalize: true,
            embedding_dim: 64,
            ..Default::default()
        };
        let p = init_params(&cfg, 12).unwrap();
        let bytes = encode_checkpoint(&p, &cfg).unwrap();
        let (q, cfg2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        let x = Tensor::from_vec(&[1, 1, 32, 32], (0..1024).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        assert_eq!(forward(&p, &cfg, &x).unwrap().0, forward(&q, &cfg2, &x).unwrap().0);
        assert_eq!(encode_checkpoint(&q, &cfg2).unwrap(), bytes);
    }

    #[test]
    fn parameter_count_matches_manifest() {
        let cfg = ModelConfig::default();
        let bytes = encode_checkpoint(&init_params(&cfg, 0).unwrap(), &cfg).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        let from_manifest: u64 = header.tensors.iter().map(|t| t.length / 4).sum();
        assert_eq!(from_manifest as usize, cfg.parameter_count());
        assert_eq!(bytes.len(), 16 + header_len + 4 * cfg.parameter_count());
    }

    #[test]
    fn corrupt_headers_rejected() {
        let cfg = ModelConfig {
            blocks: vec![4],
            embedding_dim: 8,
            ..Default::default()
        };
        let bytes = encode_checkpoint(&init_params(&cfg, 0).unwrap(), &cfg).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(NetError::Checkpoint { offset: 0, .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(NetError::Checkpoint { offset: 4, .. })));

        let mut bad = bytes.clone();
        bad[8] = 0xff;
        bad[9] = 0xff;
        assert!(matches!(decode_checkpoint(&bad), Err(NetError::Checkpoint { offset: 8, .. })));

        let truncated = &bytes[..bytes.len() - 3];
        match decode_checkpoint(truncated) {
            Err(NetError::Checkpoint { offset, reason }) => {
                assert_eq!(offset, truncated.len());
                assert!(reason.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).is_err());
    }
}

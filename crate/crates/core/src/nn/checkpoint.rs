use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{Mlp, MlpSpec};
use crate::error::{shape_err, Result};

/// JSON sidecar written next to a raw parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: MlpSpec,
    pub step: u64,
    pub ema_rate: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

fn to_le_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

/// SHA-256 (hex) of the little-endian parameter bytes.
pub fn params_hash(params: &[f64]) -> String {
    Sha256::digest(to_le_bytes(params))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes `<stem>.bin` (little-endian f64) and `<stem>.json`; returns the parameter hash.
pub fn save_checkpoint(stem: &Path, params: &[f64], meta: &CheckpointMeta) -> Result<String> {
    let n = Mlp::new(meta.spec.clone())?.n_params();
    if n != params.len() {
        return Err(shape_err("checkpoint parameters", n, params.len()));
    }
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir)?;
    }
    let (bin, json) = paths(stem);
    fs::write(&bin, to_le_bytes(params))?;
    fs::write(&json, serde_json::to_string_pretty(meta)?)?;
    Ok(params_hash(params))
}

pub fn load_checkpoint(stem: &Path) -> Result<(Vec<f64>, CheckpointMeta)> {
    let (bin, json) = paths(stem);
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(json)?)?;
    let bytes = fs::read(bin)?;
    let n = Mlp::new(meta.spec.clone())?.n_params();
    if bytes.len() != 8 * n {
        return Err(shape_err("checkpoint bytes", 8 * n, bytes.len()));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::stream;

    #[test]
    fn round_trip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let spec = MlpSpec {
            input_dim: 3,
            hidden_dims: vec![4],
            output_dim: 2,
            activation: Activation::Silu,
            embed_dim: 8,
            n_scalars: 2,
        };
        let params = Mlp::new(spec.clone()).unwrap().init_params(&mut stream(5, 0));
        let meta = CheckpointMeta {
            spec,
            step: 42,
            ema_rate: 0.999,
            seed: 5,
            mode: Some("warm_blended".into()),
            task: None,
        };
        let stem = dir.path().join("gen");
        let hash = save_checkpoint(&stem, &params, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&stem).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded_meta, meta);
        assert_eq!(hash, params_hash(&loaded));
        assert_eq!(hash.len(), 64);
        assert!(save_checkpoint(&stem, &params[1..], &meta).is_err());
    }
}

use std::path::Path;

use cpmark_tensor::Tensor;
use serde_json::{json, Map, Value};

use super::{ModelConfig, ModelState, OptimizerState, Params};
use crate::archive;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "CPMARK-CKPT-v1";

/// A loaded checkpoint: model state plus the run metadata stored with it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub state: ModelState,
    /// Opaque run configuration recorded at save time.
    pub run: Value,
    /// SHA-256 digests of the badges the model was trained on.
    pub badge_digests: Vec<String>,
}

/// Writes parameters (`param/`), Adam moments (`adam_m/`, `adam_v/`), the model
/// config, step, run metadata and badge digests.
pub fn save_checkpoint(path: &Path, state: &ModelState, run: &Value, badge_digests: &[String]) -> Result<()> {
    let mut header = Map::new();
    header.insert("format".into(), CHECKPOINT_MAGIC.into());
    header.insert("model".into(), serde_json::to_value(&state.config).expect("config serializes"));
    header.insert("step".into(), state.step.into());
    header.insert("run".into(), run.clone());
    header.insert("badges".into(), json!(badge_digests));
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::with_capacity(3 * state.params.len());
    for (prefix, tensors) in [
        ("param", state.params.tensors()),
        ("adam_m", &state.optimizer.m[..]),
        ("adam_v", &state.optimizer.v[..]),
    ] {
        for (name, t) in state.params.names().iter().zip(tensors) {
            named.push((format!("{prefix}/{name}"), t));
        }
    }
    archive::write(path, CHECKPOINT_MAGIC, header, &named)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let (mut header, tensors) = archive::read(path, CHECKPOINT_MAGIC)?;
    let config: ModelConfig = header
        .remove("model")
        .ok_or_else(|| bad("missing model config".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| bad(format!("bad model config: {e}"))))?;
    config.validate().map_err(|e| bad(e.to_string()))?;
    let step = header
        .get("step")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("missing step".into()))?;
    let badge_digests = header
        .get("badges")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    let run = header.remove("run").unwrap_or(Value::Null);

    // shapes must match what this config lays out
    let fresh = super::init_state(&config, 0)?;
    let mut params = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, expected) in fresh.params.names().iter().zip(fresh.params.tensors()) {
        for (prefix, out) in [("param", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)] {
            let key = format!("{prefix}/{name}");
            let t = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| bad(format!("missing tensor {key}")))?;
            if t.shape() != expected.shape() {
                return Err(bad(format!(
                    "tensor {key} has shape {:?}, config expects {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            out.push(t);
        }
    }
    let params = Params::new(fresh.params.names().iter().cloned().zip(params).collect());
    if !params.all_finite() {
        return Err(bad("non-finite parameters".into()));
    }
    Ok(Checkpoint {
        state: ModelState {
            config,
            params,
            optimizer: OptimizerState { m, v },
            step,
        },
        run,
        badge_digests,
    })
}

//! Model checkpoint directory:
//!
//! ```text
//! config.json              architecture, tensor shapes, adapter list, provenance
//! tensors/<name>.bin       base weights, row-major little-endian f32
//! adapters/<name>.lora     one adapter checkpoint per wrapped projection
//! ```
//!
//! Values pass through f32, so a saved-then-loaded model is the canonical
//! form of a trained one.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyError, PolicyModel};
use crate::lora::LoraAdapter;
use crate::tensor;

pub const CONFIG_FILE: &str = "config.json";
const FORMAT: &str = "surrogate-policy";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointConfig {
    format: String,
    version: u32,
    policy: PolicyConfig,
    tensors: Vec<TensorEntry>,
    adapters: Vec<String>,
    #[serde(default)]
    provenance: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PolicyError + '_ {
    move |source| PolicyError::Io { path: path.to_path_buf(), source }
}

fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("tensors").join(format!("{name}.bin"))
}

fn adapter_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("adapters").join(format!("{name}.lora"))
}

/// Write `model` under `dir`, replacing any previous checkpoint there.
pub fn save_checkpoint(model: &PolicyModel, dir: &Path, provenance: serde_json::Value) -> Result<(), PolicyError> {
    for sub in ["tensors", "adapters"] {
        let p = dir.join(sub);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(io_err(&p))?;
        }
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut tensors = Vec::new();
    for (name, m) in model.named_base_tensors() {
        let path = tensor_path(dir, &name);
        let mut w = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        tensor::write_f32_le(&mut w, m).and_then(|_| w.flush()).map_err(io_err(&path))?;
        tensors.push(TensorEntry { name, shape: [m.nrows(), m.ncols()] });
    }
    let mut adapters = Vec::new();
    for (name, ad) in model.adapters() {
        let path = adapter_path(dir, &name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        ad.write_checkpoint(BufWriter::new(file))?;
        adapters.push(name);
    }
    let cfg = CheckpointConfig {
        format: FORMAT.into(),
        version: VERSION,
        policy: model.config().clone(),
        tensors,
        adapters,
        provenance,
    };
    let path = dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Read a checkpoint written by [`save_checkpoint`]; also returns the
/// stored provenance.
pub fn load_checkpoint(dir: &Path) -> Result<(PolicyModel, serde_json::Value), PolicyError> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let cfg: CheckpointConfig =
        serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
    if cfg.format != FORMAT || cfg.version != VERSION {
        return Err(PolicyError::Checkpoint(format!("unsupported format {} v{}", cfg.format, cfg.version)));
    }
    let mut model = PolicyModel::new(cfg.policy, 0)?;
    {
        let mut slots = model.named_base_tensors_mut()?;
        if slots.len() != cfg.tensors.len() {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} tensors, config lists {}",
                slots.len(),
                cfg.tensors.len()
            )));
        }
        for entry in &cfg.tensors {
            let (_, slot) = slots
                .iter_mut()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| PolicyError::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
            let shape = (entry.shape[0], entry.shape[1]);
            if slot.dim() != shape {
                return Err(PolicyError::Checkpoint(format!(
                    "{} has shape {:?}, model expects {:?}",
                    entry.name,
                    shape,
                    slot.dim()
                )));
            }
            let p = tensor_path(dir, &entry.name);
            let mut r = BufReader::new(fs::File::open(&p).map_err(io_err(&p))?);
            **slot = tensor::read_f32_le(&mut r, shape).map_err(io_err(&p))?;
        }
    }
    for name in &cfg.adapters {
        let p = adapter_path(dir, name);
        let file = fs::File::open(&p).map_err(io_err(&p))?;
        model.wrap_projection(name, |w0| Ok(LoraAdapter::read_checkpoint(BufReader::new(file), w0)?))?;
    }
    Ok((model, cfg.provenance))
}

//! Single-file checkpoints: safetensors payload keyed by module path, with a
//! JSON manifest stored in the safetensors metadata under `"manifest"`.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use candle_nn::VarMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GenerativeModel, InferenceModel, ModelConfig};
use crate::polar_grid::PolarGridSpec;

pub const FORMAT: &str = "activescan-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Generative,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub preset: String,
    pub latent_dim: usize,
    pub flow_layers: usize,
    pub flow_vectors: usize,
    pub spec_hash: String,
    pub training_step: u64,
    pub model: ModelConfig,
    pub grid: PolarGridSpec,
    /// Sampling policy the inference model was trained with.
    #[serde(default)]
    pub policy: Option<String>,
}

/// SHA-256 hex digest of the grid geometry plus model layout.
pub fn spec_hash(grid: &PolarGridSpec, model: &ModelConfig) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(grid).expect("grid serializes"));
    h.update(serde_json::to_vec(model).expect("model config serializes"));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_for(kind: CheckpointKind, cfg: &ModelConfig, grid: &PolarGridSpec, step: u64, policy: Option<&str>) -> Manifest {
    Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind,
        preset: cfg.preset.clone(),
        latent_dim: cfg.latent_dim,
        flow_layers: cfg.flow_layers,
        flow_vectors: cfg.flow_vectors,
        spec_hash: spec_hash(grid, cfg),
        training_step: step,
        model: cfg.clone(),
        grid: grid.clone(),
        policy: policy.map(str::to_owned),
    }
}

fn write(varmap: &VarMap, prefix: &str, manifest: &Manifest, path: &Path) -> Result<()> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    let mut tensors: Vec<(String, Tensor)> = data
        .iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v.as_tensor().clone()))
        .collect();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let mut meta = HashMap::new();
    meta.insert("manifest".to_string(), serde_json::to_string(manifest).expect("manifest serializes"));
    safetensors::serialize_to_file(tensors, Some(meta), path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Read just the manifest of a checkpoint file.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path)?;
    manifest_from_bytes(&bytes)
}

fn manifest_from_bytes(bytes: &[u8]) -> Result<Manifest> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Config(format!("not a checkpoint: {e}")))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get("manifest"))
        .ok_or_else(|| Error::Config("checkpoint has no manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_str(raw).map_err(|e| Error::Config(format!("bad checkpoint manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint format {} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

fn read(path: &Path, kind: CheckpointKind, prefix: &str) -> Result<(Manifest, HashMap<String, Tensor>)> {
    let bytes = std::fs::read(path)?;
    let manifest = manifest_from_bytes(&bytes)?;
    if manifest.kind != kind {
        return Err(Error::Config(format!(
            "{} holds a {:?} checkpoint, expected {kind:?}",
            path.display(),
            manifest.kind
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let stripped = tensors
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(&format!("{prefix}.")).map(|s| (s.to_string(), v)))
        .collect();
    Ok((manifest, stripped))
}

fn restore(varmap: &VarMap, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    for (name, var) in data.iter() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing parameter {name}")))?;
        if t.dims() != var.dims() {
            return Err(Error::Config(format!("parameter {name} has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

pub fn save_generative(model: &GenerativeModel, grid: &PolarGridSpec, path: &Path) -> Result<()> {
    let manifest = manifest_for(CheckpointKind::Generative, &model.cfg, grid, model.training_step, None);
    write(&model.varmap, "decoder", &manifest, path)
}

pub fn save_inference(model: &InferenceModel, grid: &PolarGridSpec, policy: Option<&str>, path: &Path) -> Result<()> {
    let manifest = manifest_for(CheckpointKind::Inference, &model.cfg, grid, model.training_step, policy);
    write(&model.varmap, "encoder", &manifest, path)
}

pub fn load_generative(path: &Path) -> Result<(GenerativeModel, Manifest)> {
    let (manifest, tensors) = read(path, CheckpointKind::Generative, "decoder")?;
    let mut model = GenerativeModel::new(&manifest.model, 0)?;
    restore(&model.varmap, &tensors)?;
    model.training_step = manifest.training_step;
    Ok((model, manifest))
}

pub fn load_inference(path: &Path) -> Result<(InferenceModel, Manifest)> {
    let (manifest, tensors) = read(path, CheckpointKind::Inference, "encoder")?;
    let mut model = InferenceModel::new(&manifest.model, 0)?;
    restore(&model.varmap, &tensors)?;
    model.training_step = manifest.training_step;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LatentState, Precision};
    use nalgebra::DVector;

    fn cfg() -> ModelConfig {
        ModelConfig {
            preset: "test".into(),
            n_r: 8,
            n_gamma: 8,
            latent_dim: 4,
            enc_layers: 1,
            enc_channels: 2,
            dec_blocks: 1,
            dec_channels: 2,
            flow_layers: 1,
            flow_vectors: 2,
            precision: Precision::F32,
        }
    }

    #[test]
    fn generative_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.safetensors");
        let grid = PolarGridSpec { n_r: 8, n_gamma: 8, ..Default::default() };
        let mut model = GenerativeModel::new(&cfg(), 5).unwrap();
        model.training_step = 42;
        save_generative(&model, &grid, &path).unwrap();
        let (loaded, manifest) = load_generative(&path).unwrap();
        assert_eq!(manifest.training_step, 42);
        assert_eq!(manifest.kind, CheckpointKind::Generative);
        assert_eq!(manifest.spec_hash, spec_hash(&grid, &cfg()));
        let z = LatentState::new(DVector::from_element(4, 0.5));
        assert_eq!(model.decode(&z).unwrap(), loaded.decode(&z).unwrap());
        assert!(load_inference(&path).is_err());
    }

    #[test]
    fn inference_checkpoint_records_policy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inf.safetensors");
        let grid = PolarGridSpec { n_r: 8, n_gamma: 8, ..Default::default() };
        let model = InferenceModel::new(&cfg(), 5).unwrap();
        save_inference(&model, &grid, Some("trace"), &path).unwrap();
        let manifest = read_manifest(&path).unwrap();
        assert_eq!(manifest.policy.as_deref(), Some("trace"));
        let (loaded, _) = load_inference(&path).unwrap();
        let x = nalgebra::DMatrix::from_element(8, 8, 0.25);
        let m = nalgebra::DMatrix::from_element(8, 8, 1.0);
        assert_eq!(model.encode(&x, &m).unwrap(), loaded.encode(&x, &m).unwrap());
    }
}

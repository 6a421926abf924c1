//! Deep latent-variable model: gated-convolution encoder, amortized Sylvester
//! flows, and a gated transpose-convolution decoder.

pub mod checkpoint;
pub mod flow;
pub mod nets;
pub mod tensor_flow;

use candle_core::{DType, Device, Tensor};
use candle_nn::{VarBuilder, VarMap};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polar_grid::Grid;
pub use flow::{flow_forward, orthonormalize, FlowLayer, FlowStack, LatentState};
pub use nets::{Decoder, Encoder, PosteriorTensors};

/// Tensor precision for a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub n_r: usize,
    pub n_gamma: usize,
    pub latent_dim: usize,
    pub enc_layers: usize,
    pub enc_channels: usize,
    pub dec_blocks: usize,
    pub dec_channels: usize,
    pub flow_layers: usize,
    pub flow_vectors: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// Layer counts and widths of the full-size architecture.
    pub fn full(n_r: usize, n_gamma: usize) -> Self {
        Self {
            preset: "full".into(),
            n_r,
            n_gamma,
            latent_dim: 512,
            enc_layers: 10,
            enc_channels: 64,
            dec_blocks: 8,
            dec_channels: 128,
            flow_layers: 8,
            flow_vectors: 16,
            precision: Precision::F32,
        }
    }

    /// Reduced architecture that trains on a CPU in minutes.
    pub fn desk(n_r: usize, n_gamma: usize) -> Self {
        Self {
            preset: "desk".into(),
            n_r,
            n_gamma,
            latent_dim: 64,
            enc_layers: 4,
            enc_channels: 16,
            dec_blocks: 4,
            dec_channels: 16,
            flow_layers: 4,
            flow_vectors: 8,
            precision: Precision::F32,
        }
    }

    pub fn from_preset(name: &str, n_r: usize, n_gamma: usize) -> Result<Self> {
        match name {
            "full" => Ok(Self::full(n_r, n_gamma)),
            "desk" => Ok(Self::desk(n_r, n_gamma)),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_r == 0 || self.n_gamma == 0 || self.latent_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.flow_vectors == 0 || self.flow_vectors > self.latent_dim {
            return Err(Error::Config(format!(
                "flow_vectors must be in 1..={}, got {}",
                self.latent_dim, self.flow_vectors
            )));
        }
        if self.enc_channels == 0 || self.dec_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }
}

/// Host-side encoder output for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu: DVector<f64>,
    pub sigma: DVector<f64>,
    pub flow: FlowStack,
}

/// `z0 = mu + sigma * eps`.
pub fn reparameterize(p: &PosteriorParams, eps: &DVector<f64>) -> Result<LatentState> {
    if eps.len() != p.mu.len() {
        return Err(Error::rejected(format!("eps has length {}, expected {}", eps.len(), p.mu.len())));
    }
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::rejected("eps contains non-finite values"));
    }
    Ok(LatentState::new(&p.mu + p.sigma.component_mul(eps)))
}

pub(crate) fn grid_to_row_major(grid: &Grid) -> Vec<f64> {
    grid.transpose().as_slice().to_vec()
}

pub(crate) fn grid_from_row_major(rows: usize, cols: usize, data: &[f64]) -> Grid {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Convert a `(B, n_r, n_gamma)` tensor to host grids.
pub fn tensor_to_grids(t: &Tensor) -> Result<Vec<Grid>> {
    let (b, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok((0..b).map(|i| grid_from_row_major(h, w, &data[i * h * w..(i + 1) * h * w])).collect())
}

/// Stack host grids into a `(B, n_r, n_gamma)` tensor.
pub fn grids_to_tensor(grids: &[&Grid], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = grids.first().map(|g| g.shape()).ok_or_else(|| Error::rejected("empty batch"))?;
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.shape() != (h, w) {
            return Err(Error::rejected("grids in a batch must share a shape"));
        }
        data.extend(grid_to_row_major(g));
    }
    Ok(Tensor::from_vec(data, (grids.len(), h, w), device)?.to_dtype(dtype)?)
}

/// Build the two-channel encoder input from zero-filled observations and mask images.
pub fn encoder_input(filled: &[&Grid], masks: &[&Grid], dtype: DType, device: &Device) -> Result<Tensor> {
    let a = grids_to_tensor(filled, dtype, device)?;
    let m = grids_to_tensor(masks, dtype, device)?;
    Ok(Tensor::stack(&[a, m], 1)?)
}

/// Seeded parameter initialization. candle's CPU initializers draw from an
/// unseeded generator, so every variable is rewritten from a ChaCha stream
/// in name order.
fn seeded_init(varmap: &VarMap, seed: u64, dtype: DType, device: &Device) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = varmap.data().lock().expect("var map lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let values: Vec<f64> = if name.ends_with("running_var") || (name.contains(".bn.") && name.ends_with("weight")) {
            vec![1.0; n]
        } else if name.ends_with("running_mean") || name.contains(".bn.") {
            vec![0.0; n]
        } else if name.ends_with("bias") {
            if name.starts_with("flow.") {
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            } else {
                vec![0.0; n]
            }
        } else {
            let fan_in: usize = if name.contains("blocks.") && dims.len() == 4 {
                // transpose conv weights are (in, out, kh, kw)
                dims[0] * dims[2] * dims[3]
            } else {
                dims[1..].iter().product()
            };
            let mut bound = (3.0 / fan_in.max(1) as f64).sqrt();
            if name.starts_with("flow.") {
                bound *= 0.05;
            }
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        var.set(&Tensor::from_vec(values, dims, device)?.to_dtype(dtype)?)?;
    }
    Ok(())
}

fn copy_varmap(src: &VarMap, dst: &VarMap) -> Result<()> {
    let src = src.data().lock().expect("var map lock poisoned");
    let dst = dst.data().lock().expect("var map lock poisoned");
    for (name, var) in dst.iter() {
        let value = src
            .get(name)
            .ok_or_else(|| Error::ModelState(format!("missing parameter {name}")))?;
        var.set(&value.as_tensor().copy()?)?;
    }
    Ok(())
}

/// Anything that maps a batch of latents `(B, D)` to mean images `(B, n_r, n_gamma)`.
pub trait Decode {
    fn decode_tensor(&self, z: &Tensor, train: bool) -> Result<Tensor>;
    fn latent_dim(&self) -> usize;
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
}

impl Decode for GenerativeModel {
    fn decode_tensor(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        self.decode_batch(z, train)
    }

    fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    fn dtype(&self) -> DType {
        self.cfg.dtype()
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

/// Decoder parameters (theta) of the generative model.
pub struct GenerativeModel {
    pub cfg: ModelConfig,
    pub(crate) varmap: VarMap,
    pub decoder: Decoder,
    pub device: Device,
    pub training_step: u64,
}

impl GenerativeModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, cfg.dtype(), &device);
        let decoder = Decoder::new(vb, cfg)?;
        seeded_init(&varmap, seed, cfg.dtype(), &device)?;
        Ok(Self { cfg: cfg.clone(), varmap, decoder, device, training_step: 0 })
    }

    pub fn dtype(&self) -> DType {
        self.cfg.dtype()
    }

    pub fn vars(&self) -> Vec<candle_core::Var> {
        sorted_vars(&self.varmap)
    }

    pub fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        sorted_named_vars(&self.varmap)
    }

    /// Batched decode. `train` selects batch statistics in normalization layers.
    pub fn decode_batch(&self, z: &Tensor, train: bool) -> Result<Tensor> {
        self.decoder.forward(z, train)
    }

    /// Mean image for one latent, evaluated with frozen normalization statistics.
    pub fn decode(&self, z: &LatentState) -> Result<Grid> {
        if !z.is_finite() {
            return Err(Error::rejected("latent contains non-finite values"));
        }
        if z.dim() != self.cfg.latent_dim {
            return Err(Error::rejected(format!("latent has dimension {}, model expects {}", z.dim(), self.cfg.latent_dim)));
        }
        let t = Tensor::from_vec(z.z.as_slice().to_vec(), (1, z.dim()), &self.device)?.to_dtype(self.dtype())?;
        Ok(tensor_to_grids(&self.decode_batch(&t, false)?)?.remove(0))
    }

    pub fn try_clone(&self) -> Result<Self> {
        let copy = Self::new(&self.cfg, 0)?;
        copy_varmap(&self.varmap, &copy.varmap)?;
        Ok(Self { training_step: self.training_step, ..copy })
    }
}

/// Encoder parameters (phi) of the inference model.
pub struct InferenceModel {
    pub cfg: ModelConfig,
    pub(crate) varmap: VarMap,
    pub encoder: Encoder,
    pub device: Device,
    pub training_step: u64,
}

impl InferenceModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, cfg.dtype(), &device);
        let encoder = Encoder::new(vb, cfg)?;
        seeded_init(&varmap, seed, cfg.dtype(), &device)?;
        Ok(Self { cfg: cfg.clone(), varmap, encoder, device, training_step: 0 })
    }

    pub fn dtype(&self) -> DType {
        self.cfg.dtype()
    }

    pub fn vars(&self) -> Vec<candle_core::Var> {
        sorted_vars(&self.varmap)
    }

    pub fn named_vars(&self) -> Vec<(String, candle_core::Var)> {
        sorted_named_vars(&self.varmap)
    }

    pub fn try_clone(&self) -> Result<Self> {
        let copy = Self::new(&self.cfg, 0)?;
        copy_varmap(&self.varmap, &copy.varmap)?;
        Ok(Self { training_step: self.training_step, ..copy })
    }

    pub fn encode_batch(&self, input: &Tensor) -> Result<PosteriorTensors> {
        let (_, c, h, w) = input.dims4()?;
        if c != 2 || h != self.cfg.n_r || w != self.cfg.n_gamma {
            return Err(Error::rejected(format!(
                "encoder input has shape {:?}, expected (B, 2, {}, {})",
                input.dims(),
                self.cfg.n_r,
                self.cfg.n_gamma
            )));
        }
        self.encoder.forward(input)
    }

    /// Posterior parameters for one zero-filled observation and its mask image.
    pub fn encode(&self, zero_filled: &Grid, mask_image: &Grid) -> Result<PosteriorParams> {
        let expected = (self.cfg.n_r, self.cfg.n_gamma);
        if zero_filled.shape() != expected || mask_image.shape() != expected {
            return Err(Error::rejected(format!(
                "encoder inputs have shapes {:?} / {:?}, expected {expected:?}",
                zero_filled.shape(),
                mask_image.shape()
            )));
        }
        let x = encoder_input(&[zero_filled], &[mask_image], self.dtype(), &self.device)?;
        let post = self.encode_batch(&x)?;
        let host = |t: &Tensor| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(t.get(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?))
        };
        Ok(PosteriorParams {
            mu: host(&post.mu)?,
            sigma: host(&post.sigma)?,
            flow: tensor_flow::to_reference_stack(&post.flows, 0)?,
        })
    }
}

fn sorted_named_vars(varmap: &VarMap) -> Vec<(String, candle_core::Var)> {
    let data = varmap.data().lock().expect("var map lock poisoned");
    let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

fn sorted_vars(varmap: &VarMap) -> Vec<candle_core::Var> {
    sorted_named_vars(varmap)
        .into_iter()
        .filter(|(name, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
        .map(|(_, v)| v)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            preset: "test".into(),
            n_r: 8,
            n_gamma: 16,
            latent_dim: 8,
            enc_layers: 2,
            enc_channels: 4,
            dec_blocks: 2,
            dec_channels: 4,
            flow_layers: 2,
            flow_vectors: 2,
            precision: Precision::F64,
        }
    }

    #[test]
    fn reparameterize_edge_cases() {
        let p = PosteriorParams {
            mu: DVector::from_vec(vec![1.0, -2.0]),
            sigma: DVector::from_vec(vec![0.5, 3.0]),
            flow: FlowStack::default(),
        };
        assert_eq!(reparameterize(&p, &DVector::zeros(2)).unwrap().z, p.mu);
        let unit = PosteriorParams { mu: DVector::zeros(2), sigma: DVector::from_element(2, 1.0), ..p.clone() };
        let eps = DVector::from_vec(vec![0.3, -0.7]);
        assert_eq!(reparameterize(&unit, &eps).unwrap().z, eps);
        assert!(reparameterize(&p, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn reparameterized_mean_converges() {
        let p = PosteriorParams {
            mu: DVector::from_vec(vec![0.4, -1.1, 2.0]),
            sigma: DVector::from_vec(vec![0.2, 1.5, 0.7]),
            flow: FlowStack::default(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut acc = DVector::zeros(3);
        for _ in 0..n {
            let eps = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            acc += reparameterize(&p, &eps).unwrap().z;
        }
        let mean = acc / n as f64;
        for i in 0..3 {
            assert!((mean[i] - p.mu[i]).abs() < 5.0 * p.sigma[i] / (n as f64).sqrt());
        }
    }

    #[test]
    fn encoder_outputs_are_valid_and_deterministic() {
        let cfg = small_cfg();
        let enc = InferenceModel::new(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let filled = DMatrix::from_fn(8, 16, |_, _| rng.random_range(-1.0..2.0));
            let mask = DMatrix::from_fn(8, 16, |_, c| if c % 3 == 0 { 1.0 } else { 0.0 });
            let p = enc.encode(&filled, &mask).unwrap();
            assert!(p.sigma.iter().all(|s| *s > 0.0));
        }
        let filled = DMatrix::from_fn(8, 16, |r, c| ((r * c) % 5) as f64 / 5.0);
        let mask = DMatrix::from_element(8, 16, 1.0);
        let a = enc.encode(&filled, &mask).unwrap();
        let b = enc.encode(&filled, &mask).unwrap();
        assert_eq!(a, b);
        a.flow.validate().unwrap();
        assert!(enc.encode(&DMatrix::zeros(4, 4), &mask).is_err());
    }

    #[test]
    fn decoder_is_bounded_and_deterministic() {
        let cfg = small_cfg();
        let dec = GenerativeModel::new(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let z = LatentState::new(DVector::from_fn(8, |_, _| 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)));
            let img = dec.decode(&z).unwrap();
            assert_eq!(img.shape(), (8, 16));
            assert!(img.min() >= 0.0 && img.max() <= 1.0);
        }
        let z = LatentState::new(DVector::from_element(8, 0.3));
        assert_eq!(dec.decode(&z).unwrap(), dec.decode(&z).unwrap());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = small_cfg();
        let a = GenerativeModel::new(&cfg, 11).unwrap();
        let b = GenerativeModel::new(&cfg, 11).unwrap();
        let z = LatentState::new(DVector::from_element(8, -0.2));
        assert_eq!(a.decode(&z).unwrap(), b.decode(&z).unwrap());
        let c = a.try_clone().unwrap();
        assert_eq!(a.decode(&z).unwrap(), c.decode(&z).unwrap());
    }

    #[test]
    fn full_preset_matches_reference_architecture() {
        let cfg = ModelConfig::full(64, 64);
        assert_eq!((cfg.latent_dim, cfg.flow_layers, cfg.flow_vectors), (512, 8, 16));
        assert_eq!((cfg.enc_layers, cfg.enc_channels), (10, 64));
        assert_eq!((cfg.dec_blocks, cfg.dec_channels), (8, 128));
        assert!(ModelConfig::from_preset("bogus", 8, 8).is_err());
    }
}

impl std::fmt::Debug for GenerativeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GenerativeModel").field("cfg", &self.cfg).field("training_step", &self.training_step).finish()
    }
}

impl std::fmt::Debug for InferenceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InferenceModel").field("cfg", &self.cfg).field("training_step", &self.training_step).finish()
    }
}

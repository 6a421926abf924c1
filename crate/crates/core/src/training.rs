//! Free-energy objectives and the two training stages.
//!
//! Stage one fits decoder and encoder jointly on fully sampled frames. Stage
//! two freezes the decoder and trains the encoder along acquisition
//! trajectories: each frame is observed with the current mask, the encoder is
//! updated on that partial observation, and the policy chooses the next mask
//! from the refreshed posterior.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::VideoDataset;
use crate::masks::{apply_mask, equispaced_mask, zero_fill, NoiseModel, ScanLineMask};
use crate::model::tensor_flow::flow_forward_batch;
use crate::model::{
    encoder_input, flow_forward, grids_to_tensor, reparameterize, Decode, GenerativeModel, InferenceModel,
    ModelConfig, PosteriorParams, PosteriorTensors,
};
use crate::policy::{draw_ensembles, PolicyConfig};
use crate::polar_grid::Grid;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight on the latent regularizer.
    pub beta: f64,
    /// Importance samples per observation; 1 gives the plain bound.
    pub iwae_samples: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub inference_epochs: usize,
    /// Truncate each video to this many frames during inference training.
    pub max_frames: Option<usize>,
    pub seed: u64,
    /// Likelihood standard deviation; defaults to the measurement noise.
    pub likelihood_std: Option<f64>,
    pub use_density_weights: bool,
    /// Consecutive non-finite steps tolerated before training aborts.
    pub max_bad_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1e-4,
            iwae_samples: 8,
            learning_rate: 1e-4,
            grad_clip: 10.0,
            batch_size: 8,
            pretrain_steps: 2000,
            inference_epochs: 1,
            max_frames: None,
            seed: 0,
            likelihood_std: None,
            use_density_weights: true,
            max_bad_steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and >= 0");
        }
        if self.iwae_samples == 0 {
            return bad("iwae_samples must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return bad("learning_rate and grad_clip must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if let Some(s) = self.likelihood_std {
            if !(s > 0.0) {
                return bad("likelihood_std must be > 0");
            }
        }
        Ok(())
    }

    pub fn loss_settings(&self, noise: NoiseModel, n_r: usize) -> Result<LossSettings> {
        let std = self.likelihood_std.unwrap_or(noise.std);
        if !(std > 0.0) {
            return Err(Error::Config("likelihood std is zero; set likelihood_std or a positive noise".into()));
        }
        Ok(LossSettings {
            beta: self.beta,
            samples: self.iwae_samples,
            likelihood_std: std,
            depth_weights: self.use_density_weights.then(|| crate::polar_grid::depth_weights(n_r)),
        })
    }
}

/// Parameters of the per-observation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSettings {
    pub beta: f64,
    pub samples: usize,
    pub likelihood_std: f64,
    /// Per-depth weights on the likelihood; `None` weighs every pixel equally.
    pub depth_weights: Option<Vec<f64>>,
}

/// Mean terms of the objective. `total` is the loss being minimized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl_base: f64,
    pub log_det: f64,
}

fn weight_at(weights: Option<&[f64]>, i: usize) -> f64 {
    weights.map_or(1.0, |w| w[i])
}

/// Masked, depth-weighted Gaussian log-likelihood of `observed` given `mean`.
pub fn masked_log_likelihood(
    observed: &Grid,
    mask_image: &Grid,
    mean: &Grid,
    std: f64,
    weights: Option<&[f64]>,
) -> f64 {
    let mut ll = 0.0;
    for j in 0..mask_image.ncols() {
        for i in 0..mask_image.nrows() {
            let m = mask_image[(i, j)];
            if m == 0.0 {
                continue;
            }
            let r = (observed[(i, j)] - mean[(i, j)]) / std;
            ll += -0.5 * weight_at(weights, i) * m * (r * r + LN_2PI + 2.0 * std.ln());
        }
    }
    ll
}

fn log_normal(v: &DVector<f64>) -> f64 {
    -0.5 * (v.norm_squared() + v.len() as f64 * LN_2PI)
}

/// Log importance weight `recon - beta * (log q(z0) - log p(zK) - log det)` for one posterior sample.
fn log_weight<Dc: Decode + ?Sized>(
    post: &PosteriorParams,
    decoder: &Dc,
    observed: &Grid,
    mask_image: &Grid,
    s: &LossSettings,
    eps: &DVector<f64>,
) -> Result<LossBreakdown> {
    let z0 = reparameterize(post, eps)?;
    let (zk, log_det) = flow_forward(&z0, &post.flow)?;
    let zt = Tensor::from_vec(zk.z.as_slice().to_vec(), (1, zk.dim()), decoder.device())?.to_dtype(decoder.dtype())?;
    let mean = crate::model::tensor_to_grids(&decoder.decode_tensor(&zt, false)?)?.remove(0);
    let recon = masked_log_likelihood(observed, mask_image, &mean, s.likelihood_std, s.depth_weights.as_deref());
    let log_q = log_normal(eps) - post.sigma.iter().map(|v| v.ln()).sum::<f64>();
    let kl_base = log_q - log_normal(&zk.z);
    Ok(LossBreakdown { total: -(recon - s.beta * (kl_base - log_det)), recon, kl_base, log_det })
}

/// Single-sample free energy for one observation, evaluated on the host.
pub fn free_energy<Dc: Decode + ?Sized>(
    post: &PosteriorParams,
    decoder: &Dc,
    observed: &Grid,
    mask_image: &Grid,
    s: &LossSettings,
    eps: &DVector<f64>,
) -> Result<LossBreakdown> {
    log_weight(post, decoder, observed, mask_image, s, eps)
}

/// Importance-weighted bound `log (1/k) sum_k w_k` with one `eps` per sample.
pub fn iwae_bound<Dc: Decode + ?Sized>(
    post: &PosteriorParams,
    decoder: &Dc,
    observed: &Grid,
    mask_image: &Grid,
    s: &LossSettings,
    eps: &[DVector<f64>],
) -> Result<f64> {
    if eps.is_empty() {
        return Err(Error::rejected("importance bound needs at least one sample"));
    }
    let lw = eps
        .iter()
        .map(|e| log_weight(post, decoder, observed, mask_image, s, e).map(|b| -b.total))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_mean_exp(&lw))
}

pub fn log_mean_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (v.iter().map(|x| (x - m).exp()).sum::<f64>() / v.len() as f64).ln()
}

/// One batch of partial observations in tensor form.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    /// `(B, 2, n_r, n_gamma)` encoder input.
    pub input: Tensor,
    /// `(B, n_r, n_gamma)` zero-filled observed values.
    pub target: Tensor,
    /// `(B, n_r, n_gamma)` indicator of observed pixels.
    pub mask: Tensor,
}

impl ObservationBatch {
    /// Observe `frames[b]` through `masks[b]` with additive noise.
    pub fn observe<R: Rng + ?Sized>(
        frames: &[&Grid],
        masks: &[&ScanLineMask],
        noise: NoiseModel,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if frames.len() != masks.len() || frames.is_empty() {
            return Err(Error::rejected("need one mask per frame"));
        }
        let mut filled = Vec::with_capacity(frames.len());
        let mut images = Vec::with_capacity(frames.len());
        for (t, (f, m)) in frames.iter().zip(masks).enumerate() {
            let obs = apply_mask(f, m, noise, t, rng)?;
            let (a, b) = zero_fill(&obs, f.ncols());
            filled.push(a);
            images.push(b);
        }
        Self::from_grids(&filled.iter().collect::<Vec<_>>(), &images.iter().collect::<Vec<_>>(), dtype, device)
    }

    pub fn from_grids(filled: &[&Grid], mask_images: &[&Grid], dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            input: encoder_input(filled, mask_images, dtype, device)?,
            target: grids_to_tensor(filled, dtype, device)?,
            mask: grids_to_tensor(mask_images, dtype, device)?,
        })
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.target.dim(0)?)
    }
}

fn repeat_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    let dims = t.dims().to_vec();
    let mut expanded = vec![dims[0], n];
    expanded.extend_from_slice(&dims[1..]);
    let mut flat = vec![dims[0] * n];
    flat.extend_from_slice(&dims[1..]);
    Ok(t.unsqueeze(1)?.broadcast_as(expanded)?.contiguous()?.reshape(flat)?)
}

/// Standard-normal draws of shape `(B * k, D)` from a host generator.
pub fn draw_eps<R: Rng + ?Sized>(rng: &mut R, rows: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (rows, d), device)?.to_dtype(dtype)?)
}

/// Batched objective. Returns the scalar loss (mean over the batch) and its terms.
///
/// With `samples > 1` the per-observation loss is the negative importance-weighted
/// bound over `samples` posterior draws; `eps` must then hold `B * samples` rows,
/// grouped by observation.
pub fn batch_free_energy<Dc: Decode + ?Sized>(
    post: &PosteriorTensors,
    decoder: &Dc,
    batch: &ObservationBatch,
    s: &LossSettings,
    eps: &Tensor,
    train_decoder: bool,
) -> Result<(Tensor, LossBreakdown)> {
    let b = batch.batch()?;
    let k = s.samples;
    let (rows, _) = eps.dims2()?;
    if rows != b * k {
        return Err(Error::rejected(format!("eps has {rows} rows, expected {}", b * k)));
    }
    let rep = if k == 1 { post.clone() } else { post.repeat_interleave(k)? };
    let z0 = (&rep.mu + (&rep.sigma * eps)?)?;
    let (zk, log_det) = flow_forward_batch(&z0, &rep.flows)?;
    let mean = decoder.decode_tensor(&zk, train_decoder)?;
    let (target, mask) = if k == 1 {
        (batch.target.clone(), batch.mask.clone())
    } else {
        (repeat_rows(&batch.target, k)?, repeat_rows(&batch.mask, k)?)
    };
    let (_, n_r, _) = target.dims3()?;
    let weighted_mask = match &s.depth_weights {
        Some(w) => {
            let w = Tensor::from_vec(w.clone(), (1, n_r, 1), decoder.device())?.to_dtype(decoder.dtype())?;
            mask.broadcast_mul(&w)?
        }
        None => mask,
    };
    let var = s.likelihood_std * s.likelihood_std;
    let sq = ((&mean - &target)?.sqr()? * &weighted_mask)?.sum((1, 2))?;
    let count = weighted_mask.sum((1, 2))?;
    let recon = ((sq * (-0.5 / var))? - (count * (0.5 * (LN_2PI + var.ln())))?)?;
    let log_q = ((eps.sqr()?.sum(D::Minus1)? * -0.5)? - rep.sigma.log()?.sum(D::Minus1)?)?;
    let log_p = (zk.sqr()?.sum(D::Minus1)? * -0.5)?;
    // Normalizing constants of q and p cancel.
    let kl_base = (log_q - log_p)?;
    let log_w = (&recon - ((&kl_base - &log_det)? * s.beta)?)?;
    let per_obs = if k == 1 {
        log_w.clone()
    } else {
        let lw = log_w.reshape((b, k))?;
        let m = lw.max_keepdim(1)?.detach();
        (lw.broadcast_sub(&m)?.exp()?.mean(1)?.log()? + m.squeeze(1)?)?
    };
    let loss = per_obs.mean_all()?.neg()?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        total: scalar(&loss)?,
        recon: scalar(&recon)?,
        kl_base: scalar(&kl_base)?,
        log_det: scalar(&log_det)?,
    };
    Ok((loss, breakdown))
}

/// Adam with global-norm gradient clipping.
pub struct Optimizer {
    adam: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Norm before clipping.
    pub grad_norm: f64,
    pub applied: bool,
}

impl Optimizer {
    pub fn new(vars: Vec<Var>, learning_rate: f64, clip: f64) -> Result<Self> {
        let params = ParamsAdamW { lr: learning_rate, weight_decay: 0.0, ..Default::default() };
        Ok(Self { adam: AdamW::new(vars.clone(), params)?, vars, clip })
    }

    /// Backpropagate `loss` and update. Non-finite losses or gradients leave
    /// the parameters untouched.
    pub fn step(&mut self, loss: &Tensor) -> Result<StepOutcome> {
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Ok(StepOutcome { grad_norm: f64::NAN, applied: false });
        }
        let mut grads = loss.backward()?;
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Ok(StepOutcome { grad_norm: norm, applied: false });
        }
        if norm > self.clip {
            let scale = self.clip / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        self.adam.step(&grads)?;
        Ok(StepOutcome { grad_norm: norm, applied: true })
    }
}

/// Detached copies of a parameter set, for rollback after a bad update.
struct Snapshot(Vec<Tensor>);

impl Snapshot {
    fn take(vars: &[Var]) -> Result<Self> {
        Ok(Self(vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?))
    }

    fn restore(&self, vars: &[Var]) -> Result<()> {
        for (v, t) in vars.iter().zip(&self.0) {
            v.set(t)?;
        }
        Ok(())
    }
}

/// One optimizer step in a training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub applied: bool,
}

/// Counts consecutive failed steps and rolls parameters back to the last good state.
struct Guard {
    vars: Vec<Var>,
    last_good: Snapshot,
    bad: usize,
    limit: usize,
}

impl Guard {
    fn new(vars: Vec<Var>, limit: usize) -> Result<Self> {
        let last_good = Snapshot::take(&vars)?;
        Ok(Self { vars, last_good, bad: 0, limit })
    }

    fn after(&mut self, outcome: &StepOutcome, step: u64) -> Result<()> {
        if outcome.applied {
            self.bad = 0;
            self.last_good = Snapshot::take(&self.vars)?;
            return Ok(());
        }
        self.bad += 1;
        self.last_good.restore(&self.vars)?;
        log::warn!("step {step}: non-finite loss or gradient, restored last good parameters");
        if self.bad > self.limit {
            return Err(Error::Training(format!(
                "{} consecutive non-finite steps at step {step}",
                self.bad
            )));
        }
        Ok(())
    }
}

pub struct PretrainOutput {
    pub generative: GenerativeModel,
    pub encoder: InferenceModel,
    pub curve: Vec<StepRecord>,
}

/// Fit decoder and encoder jointly on fully sampled noisy frames.
pub fn pretrain_generative(
    data: &VideoDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    noise: NoiseModel,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    data.check_invariants()?;
    let frames: Vec<&Grid> = data.frames().collect();
    if frames.is_empty() {
        return Err(Error::rejected("training set has no frames"));
    }
    let mut generative = GenerativeModel::new(model_cfg, cfg.seed)?;
    let mut encoder = InferenceModel::new(model_cfg, cfg.seed.wrapping_add(1))?;
    let settings = cfg.loss_settings(noise, model_cfg.n_r)?;
    let mut vars = generative.vars();
    vars.extend(encoder.vars());
    let mut opt = Optimizer::new(vars.clone(), cfg.learning_rate, cfg.grad_clip)?;
    let mut guard = Guard::new(vars, cfg.max_bad_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let full = ScanLineMask::full(model_cfg.n_gamma);
    let mut curve = Vec::with_capacity(cfg.pretrain_steps);
    let (dtype, device) = (generative.dtype(), generative.device.clone());
    for step in 0..cfg.pretrain_steps as u64 {
        let picked: Vec<&Grid> = (0..cfg.batch_size).map(|_| frames[rng.random_range(0..frames.len())]).collect();
        let masks = vec![&full; picked.len()];
        let batch = ObservationBatch::observe(&picked, &masks, noise, &mut rng, dtype, &device)?;
        let post = encoder.encode_batch(&batch.input)?;
        let eps = draw_eps(&mut rng, picked.len() * settings.samples, model_cfg.latent_dim, dtype, &device)?;
        let (loss, breakdown) = batch_free_energy(&post, &generative, &batch, &settings, &eps, true)?;
        let outcome = opt.step(&loss)?;
        guard.after(&outcome, step)?;
        if step % 50 == 0 {
            log::info!("pretrain step {step}: loss {:.4}", breakdown.total);
        }
        curve.push(StepRecord {
            phase: "pretrain".into(),
            epoch: 0,
            step,
            loss: breakdown,
            grad_norm: outcome.grad_norm,
            applied: outcome.applied,
        });
    }
    generative.training_step = cfg.pretrain_steps as u64;
    encoder.training_step = cfg.pretrain_steps as u64;
    Ok(PretrainOutput { generative, encoder, curve })
}

pub struct InferenceOutput {
    pub encoder: InferenceModel,
    pub curve: Vec<StepRecord>,
}

/// First mask of a trajectory. Information-gain policies have no posterior
/// yet and start from the equispaced pattern.
pub fn initial_mask<R: Rng + ?Sized>(policy: &PolicyConfig, n_gamma: usize, rng: &mut R) -> Result<ScanLineMask> {
    if policy.kind.is_active() {
        equispaced_mask(0, n_gamma, policy.lines)
    } else {
        Ok(policy.static_decision(0, n_gamma, rng)?.mask)
    }
}

/// Masks for frame `t + 1` given the encoder's posterior at frame `t`.
pub fn next_masks<R: Rng + ?Sized>(
    policy: &PolicyConfig,
    t_next: usize,
    post: &PosteriorTensors,
    decoder: &GenerativeModel,
    noise: NoiseModel,
    rng: &mut R,
) -> Result<Vec<ScanLineMask>> {
    let n_gamma = decoder.cfg.n_gamma;
    if !policy.kind.is_active() {
        return (0..post.batch()?)
            .map(|_| policy.static_decision(t_next, n_gamma, rng).map(|d| d.mask))
            .collect();
    }
    let ensembles = draw_ensembles(post, decoder, policy.n_samples, rng)?;
    ensembles
        .iter()
        .map(|e| policy.active_decision(e, noise, rng).map(|d| d.mask))
        .collect()
}

/// Train the encoder along acquisition trajectories with the decoder frozen.
pub fn train_inference(
    generative: &GenerativeModel,
    init: &InferenceModel,
    data: &VideoDataset,
    policy: &PolicyConfig,
    cfg: &TrainConfig,
    noise: NoiseModel,
) -> Result<InferenceOutput> {
    cfg.validate()?;
    data.check_invariants()?;
    policy.validate(generative.cfg.n_gamma)?;
    if init.cfg != generative.cfg {
        return Err(Error::ModelState("encoder and decoder configurations differ".into()));
    }
    if data.is_empty() {
        return Err(Error::rejected("training set has no videos"));
    }
    let mut encoder = init.try_clone()?;
    let settings = cfg.loss_settings(noise, generative.cfg.n_r)?;
    let vars = encoder.vars();
    let mut opt = Optimizer::new(vars.clone(), cfg.learning_rate, cfg.grad_clip)?;
    let mut guard = Guard::new(vars, cfg.max_bad_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let (dtype, device) = (generative.dtype(), generative.device.clone());
    let n_gamma = generative.cfg.n_gamma;
    let mut curve = Vec::new();
    let mut step = encoder.training_step;
    for epoch in 0..cfg.inference_epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let videos: Vec<&[Grid]> = chunk.iter().map(|&i| data.videos[i].frames.as_slice()).collect();
            let mut n_t = videos.iter().map(|v| v.len()).min().unwrap_or(0);
            if let Some(cap) = cfg.max_frames {
                n_t = n_t.min(cap);
            }
            let mut masks: Vec<ScanLineMask> =
                (0..videos.len()).map(|_| initial_mask(policy, n_gamma, &mut rng)).collect::<Result<_>>()?;
            for t in 0..n_t {
                let frames: Vec<&Grid> = videos.iter().map(|v| &v[t]).collect();
                let mask_refs: Vec<&ScanLineMask> = masks.iter().collect();
                let batch = ObservationBatch::observe(&frames, &mask_refs, noise, &mut rng, dtype, &device)?;
                let post = encoder.encode_batch(&batch.input)?;
                let eps = draw_eps(&mut rng, frames.len() * settings.samples, generative.cfg.latent_dim, dtype, &device)?;
                let (loss, breakdown) = batch_free_energy(&post, generative, &batch, &settings, &eps, false)?;
                let outcome = opt.step(&loss)?;
                guard.after(&outcome, step)?;
                curve.push(StepRecord {
                    phase: "inference".into(),
                    epoch,
                    step,
                    loss: breakdown,
                    grad_norm: outcome.grad_norm,
                    applied: outcome.applied,
                });
                step += 1;
                if t + 1 < n_t {
                    let refreshed = encoder.encode_batch(&batch.input)?;
                    masks = next_masks(policy, t + 1, &refreshed, generative, noise, &mut rng)?;
                }
            }
            log::info!("inference epoch {epoch} step {step}: loss {:.4}", curve.last().map_or(f64::NAN, |r| r.loss.total));
        }
    }
    encoder.training_step = step;
    Ok(InferenceOutput { encoder, curve })
}

/// Linear-Gaussian decoder `x = W z + c` used to check objectives against closed forms.
#[derive(Debug, Clone)]
pub struct LinearDecoder {
    /// `(n_r * n_gamma, D)`, rows in row-major pixel order.
    pub weight: Tensor,
    /// `(n_r * n_gamma,)`
    pub offset: Tensor,
    pub n_r: usize,
    pub n_gamma: usize,
    device: Device,
}

impl LinearDecoder {
    pub fn new(weight: Tensor, offset: Tensor, n_r: usize, n_gamma: usize) -> Result<Self> {
        let (p, _) = weight.dims2()?;
        if p != n_r * n_gamma || offset.dims1()? != p {
            return Err(Error::rejected("linear decoder shapes do not match the grid"));
        }
        let device = weight.device().clone();
        Ok(Self { weight, offset, n_r, n_gamma, device })
    }
}

impl Decode for LinearDecoder {
    fn decode_tensor(&self, z: &Tensor, _train: bool) -> Result<Tensor> {
        let b = z.dim(0)?;
        let x = z.matmul(&self.weight.t()?)?.broadcast_add(&self.offset)?;
        Ok(x.reshape((b, self.n_r, self.n_gamma))?)
    }

    fn latent_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    fn dtype(&self) -> DType {
        self.weight.dtype()
    }

    fn device(&self) -> &Device {
        &self.device
    }
}

//! Wall-clock latency of one acquisition step.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::evaluate::Models;
use crate::masks::{apply_mask, equispaced_mask, zero_fill, NoiseModel};
use crate::model::encoder_input;
use crate::policy::PolicyConfig;
use crate::polar_grid::Grid;
use crate::training::next_masks;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub policy: String,
    pub lines: usize,
    pub n_samples: usize,
    pub candidates: usize,
    pub trials: usize,
    /// Seconds per step, in trial order.
    pub samples_s: Vec<f64>,
    pub median_s: f64,
    pub p95_s: f64,
}

/// Nearest-rank percentile of unsorted data, `q` in `[0, 1]`.
pub fn percentile(data: &[f64], q: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn median(data: &[f64]) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time `trials` acquisition steps (observe, encode, sample and decode the
/// ensemble, select the next mask) after `warmup` untimed ones.
pub fn benchmark_latency(
    models: Models,
    policy: &PolicyConfig,
    frame: &Grid,
    noise: NoiseModel,
    trials: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if trials == 0 {
        return Err(Error::rejected("benchmark needs at least one trial"));
    }
    let n_gamma = models.generative.cfg.n_gamma;
    policy.validate(n_gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = equispaced_mask(0, n_gamma, policy.lines.min(n_gamma))?;
    let mut samples = Vec::with_capacity(trials);
    for k in 0..warmup + trials {
        let start = Instant::now();
        let obs = apply_mask(frame, &mask, noise, 0, &mut rng)?;
        let (filled, image) = zero_fill(&obs, n_gamma);
        let x = encoder_input(&[&filled], &[&image], models.inference.dtype(), &models.inference.device)?;
        let post = models.inference.encode_batch(&x)?;
        let next = next_masks(policy, 1, &post, models.generative, noise, &mut rng)?;
        std::hint::black_box(&next);
        let elapsed = start.elapsed().as_secs_f64();
        if k >= warmup {
            samples.push(elapsed);
        }
    }
    Ok(LatencyReport {
        policy: policy.kind.to_string(),
        lines: policy.lines,
        n_samples: policy.n_samples,
        candidates: if policy.kind == crate::policy::PolicyKind::Covariance { policy.candidates } else { 0 },
        trials,
        median_s: median(&samples),
        p95_s: percentile(&samples, 0.95),
        samples_s: samples,
    })
}

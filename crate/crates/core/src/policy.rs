//! Information-gain scan-line selection.
//!
//! Posterior samples of the next frame are decoded into an ensemble; the
//! predicted observation covariance under a mask is the ensemble covariance
//! of the gathered columns plus the noise diagonal. Two scores are offered:
//!
//! * covariance: `log det` of that covariance, maximized over a random
//!   candidate set of masks;
//! * trace: its trace, which decomposes into per-line variances and is
//!   maximized directly subject to a minimum spacing between chosen lines.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{equispaced_mask, uniform_random_mask, variable_density_mask, NoiseModel, ScanLineMask};
use crate::model::{tensor_to_grids, Decode, PosteriorParams, PosteriorTensors};
use crate::polar_grid::Grid;

/// Decoded posterior samples of the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    samples: Vec<Grid>,
    mean: Grid,
}

impl PosteriorEnsemble {
    pub fn new(samples: Vec<Grid>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::rejected("ensemble needs at least one sample"))?;
        let shape = first.shape();
        if samples.iter().any(|s| s.shape() != shape) {
            return Err(Error::rejected("ensemble samples must share a shape"));
        }
        let mut mean = DMatrix::zeros(shape.0, shape.1);
        for s in &samples {
            mean += s;
        }
        mean /= samples.len() as f64;
        Ok(Self { samples, mean })
    }

    pub fn samples(&self) -> &[Grid] {
        &self.samples
    }

    pub fn mean(&self) -> &Grid {
        &self.mean
    }

    pub fn n_s(&self) -> usize {
        self.samples.len()
    }

    pub fn n_r(&self) -> usize {
        self.mean.nrows()
    }

    pub fn n_gamma(&self) -> usize {
        self.mean.ncols()
    }

    /// Multiply every sample's deviation from the mean by `c`.
    pub fn scale_deviations(&self, c: f64) -> Self {
        let samples = self.samples.iter().map(|s| &self.mean + (s - &self.mean) * c).collect();
        Self { samples, mean: self.mean.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Covariance,
    Trace,
    Uniform,
    VariableDensity,
    Equispaced,
    /// Every line, every frame. Measures the representation limit.
    Full,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Covariance,
        PolicyKind::Trace,
        PolicyKind::Uniform,
        PolicyKind::VariableDensity,
        PolicyKind::Equispaced,
        PolicyKind::Full,
    ];

    pub fn is_active(self) -> bool {
        matches!(self, PolicyKind::Covariance | PolicyKind::Trace)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Covariance => "covariance",
            PolicyKind::Trace => "trace",
            PolicyKind::Uniform => "uniform",
            PolicyKind::VariableDensity => "variable_density",
            PolicyKind::Equispaced => "equispaced",
            PolicyKind::Full => "full",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim().replace('-', "_"))
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub mask: ScanLineMask,
    pub score: f64,
    pub policy: PolicyKind,
    pub candidates_examined: usize,
}

/// How the trace score is maximized under the spacing constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceSolver {
    /// Exact maximization by dynamic programming over line index.
    #[default]
    Exact,
    /// Walk lines in descending score order, skipping excluded neighbours.
    Greedy,
}

/// Ensemble variance summed over depth for each line (population normalization `1/N_S`).
pub fn line_variance_scores(ens: &PosteriorEnsemble) -> Vec<f64> {
    let n_s = ens.n_s() as f64;
    let mut scores = vec![0.0; ens.n_gamma()];
    for s in ens.samples() {
        for (j, score) in scores.iter_mut().enumerate() {
            let d = s.column(j) - ens.mean().column(j);
            *score += d.norm_squared() / n_s;
        }
    }
    scores
}

/// Largest `l` that fits `n_gamma` lines with spacing greater than `radius`.
pub fn max_lines_with_exclusion(n_gamma: usize, radius: usize) -> usize {
    n_gamma.div_ceil(radius + 1)
}

/// Select `l` lines maximizing the summed score with every pair more than
/// `exclusion_radius` apart. Ties go to the lexicographically smallest index set.
pub fn trace_policy(scores: &[f64], l: usize, exclusion_radius: usize) -> Result<PolicyDecision> {
    trace_policy_with(scores, l, exclusion_radius, TraceSolver::Exact)
}

pub fn trace_policy_with(
    scores: &[f64],
    l: usize,
    exclusion_radius: usize,
    solver: TraceSolver,
) -> Result<PolicyDecision> {
    let n = scores.len();
    if l == 0 || l > max_lines_with_exclusion(n, exclusion_radius) {
        return Err(Error::rejected(format!(
            "cannot place {l} lines among {n} with exclusion radius {exclusion_radius}"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::rejected("line scores must be finite"));
    }
    let lines = match solver {
        TraceSolver::Exact => exact_spaced_selection(scores, l, exclusion_radius + 1),
        TraceSolver::Greedy => greedy_spaced_selection(scores, l, exclusion_radius)?,
    };
    let score = lines.iter().map(|&j| scores[j]).sum();
    Ok(PolicyDecision {
        mask: ScanLineMask::new(lines, n)?,
        score,
        policy: PolicyKind::Trace,
        candidates_examined: n,
    })
}

/// Suffix DP: `best[i][k]` is the top score using `k` lines from `i..n` with index gaps `>= step`.
fn exact_spaced_selection(scores: &[f64], l: usize, step: usize) -> Vec<usize> {
    let n = scores.len();
    let mut best = vec![vec![f64::NEG_INFINITY; l + 1]; n + step + 1];
    for row in best.iter_mut() {
        row[0] = 0.0;
    }
    for i in (0..n).rev() {
        for k in 1..=l {
            let skip = best[i + 1][k];
            let take = scores[i] + best[i + step][k - 1];
            best[i][k] = if take >= skip { take } else { skip };
        }
    }
    let mut lines = Vec::with_capacity(l);
    let (mut i, mut k) = (0usize, l);
    while k > 0 && i < n {
        let take = scores[i] + best[i + step][k - 1];
        if take >= best[i + 1][k] && take > f64::NEG_INFINITY {
            lines.push(i);
            i += step;
            k -= 1;
        } else {
            i += 1;
        }
    }
    lines
}

fn greedy_spaced_selection(scores: &[f64], l: usize, radius: usize) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = Vec::with_capacity(l);
    for j in order {
        if chosen.iter().all(|&c| c.abs_diff(j) > radius) {
            chosen.push(j);
            if chosen.len() == l {
                return Ok(chosen);
            }
        }
    }
    Err(Error::rejected(format!(
        "greedy selection placed only {} of {l} lines under the exclusion constraint",
        chosen.len()
    )))
}

/// Dense predicted observation covariance for `mask`, of size `M = n_r * |mask|`.
///
/// Observations are ordered line-major: entry `k * n_r + i` is depth `i` of the
/// `k`-th selected line.
pub fn empirical_observation_covariance(
    ens: &PosteriorEnsemble,
    mask: &ScanLineMask,
    noise: NoiseModel,
) -> Result<DMatrix<f64>> {
    if mask.n_gamma() != ens.n_gamma() {
        return Err(Error::rejected("mask width does not match ensemble"));
    }
    let n_r = ens.n_r();
    let m = n_r * mask.len();
    let mut sigma = DMatrix::<f64>::identity(m, m) * noise.variance();
    let n_s = ens.n_s() as f64;
    for s in ens.samples() {
        let mut d = DVector::zeros(m);
        for (k, &j) in mask.lines().iter().enumerate() {
            for i in 0..n_r {
                d[k * n_r + i] = s[(i, j)] - ens.mean()[(i, j)];
            }
        }
        sigma.ger(1.0 / n_s, &d, &d, 1.0);
    }
    Ok(sigma)
}

/// `log det(S + jitter I)` by Cholesky. With `jitter > 0` a failed
/// factorization is retried with the jitter raised tenfold, up to eight times.
pub fn logdet_psd(s: &DMatrix<f64>, jitter: f64) -> Result<f64> {
    if !s.is_square() {
        return Err(Error::rejected("log-det needs a square matrix"));
    }
    if !(jitter >= 0.0) {
        return Err(Error::rejected("jitter must be >= 0"));
    }
    let asym = (s - s.transpose()).abs().max();
    if asym > 1e-8 {
        return Err(Error::rejected(format!("matrix is not symmetric (max asymmetry {asym:.3e})")));
    }
    let n = s.nrows();
    let mut j = jitter;
    let attempts = if jitter > 0.0 { 9 } else { 1 };
    for _ in 0..attempts {
        let shifted = s + DMatrix::<f64>::identity(n, n) * j;
        if let Some(chol) = shifted.cholesky() {
            let ld = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            if ld.is_finite() {
                return Ok(ld);
            }
        }
        j *= 10.0;
    }
    Err(Error::Numerical(format!(
        "Cholesky factorization failed for {n}x{n} matrix (final jitter {j:.1e})"
    )))
}

/// Per-line Gram matrices `G_j = D_j^T D_j / N_S`, where `D_j` holds the
/// deviations of line `j` (depth x sample). The sample part of the predicted
/// covariance for mask `A` is `D_A D_A^T / N_S`, so by the determinant lemma
/// `log det(c I_M + D_A D_A^T / N_S) = M log c + log det(I + sum_{j in A} G_j / c)`.
fn line_grams(ens: &PosteriorEnsemble) -> Vec<Vec<f64>> {
    let n_s = ens.n_s();
    let devs: Vec<Grid> = ens.samples().iter().map(|s| s - ens.mean()).collect();
    (0..ens.n_gamma())
        .map(|j| {
            let mut g = vec![0.0; n_s * n_s];
            for a in 0..n_s {
                for b in a..n_s {
                    let v = devs[a].column(j).dot(&devs[b].column(j)) / n_s as f64;
                    g[a * n_s + b] = v;
                    g[b * n_s + a] = v;
                }
            }
            g
        })
        .collect()
}

/// In-place Cholesky log-det of a small SPD matrix stored row-major.
fn small_logdet(a: &mut [f64], n: usize) -> Option<f64> {
    let mut ld = 0.0;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        ld += 2.0 * d.ln();
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    Some(ld)
}

/// Pick the candidate mask with the largest predicted observation log-det.
/// Ties keep the earliest candidate.
pub fn covariance_policy(
    ens: &PosteriorEnsemble,
    candidates: &[ScanLineMask],
    noise: NoiseModel,
    jitter: f64,
) -> Result<PolicyDecision> {
    let first = candidates.first().ok_or_else(|| Error::rejected("candidate set is empty"))?;
    let l = first.len();
    if candidates.iter().any(|c| c.len() != l || c.n_gamma() != ens.n_gamma()) {
        return Err(Error::rejected("candidates must share size and width with the ensemble"));
    }
    let c = noise.variance() + jitter;
    if !(c > 0.0) {
        return Err(Error::Numerical(
            "predicted covariance is singular without a noise or jitter diagonal".into(),
        ));
    }
    let n_s = ens.n_s();
    let grams = line_grams(ens);
    let m = (ens.n_r() * l) as f64;
    let base = m * c.ln();
    let mut work = vec![0.0; n_s * n_s];
    let mut best: Option<(usize, f64)> = None;
    for (idx, cand) in candidates.iter().enumerate() {
        work.fill(0.0);
        for &j in cand.lines() {
            for (w, g) in work.iter_mut().zip(&grams[j]) {
                *w += g;
            }
        }
        for (k, w) in work.iter_mut().enumerate() {
            *w /= c;
            if k % (n_s + 1) == 0 {
                *w += 1.0;
            }
        }
        let ld = small_logdet(&mut work, n_s)
            .ok_or_else(|| Error::Numerical("low-rank log-det factorization failed".into()))?;
        let score = base + ld;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((idx, score));
        }
    }
    let (idx, score) = best.expect("non-empty candidates");
    Ok(PolicyDecision {
        mask: candidates[idx].clone(),
        score,
        policy: PolicyKind::Covariance,
        candidates_examined: candidates.len(),
    })
}

/// `count` independent uniform random masks of `l` lines (duplicates allowed).
pub fn generate_candidates<R: Rng + ?Sized>(
    rng: &mut R,
    n_gamma: usize,
    l: usize,
    count: usize,
) -> Result<Vec<ScanLineMask>> {
    (0..count).map(|_| uniform_random_mask(rng, n_gamma, l)).collect()
}

/// Draw `n_s` posterior samples and decode them (normalization layers in eval mode).
pub fn draw_ensemble<Dc: Decode + ?Sized, R: Rng + ?Sized>(
    post: &PosteriorParams,
    decoder: &Dc,
    n_s: usize,
    rng: &mut R,
) -> Result<PosteriorEnsemble> {
    let t = PosteriorTensors::from_params(post, decoder.dtype(), decoder.device())?;
    Ok(draw_ensembles(&t, decoder, n_s, rng)?.remove(0))
}

/// One ensemble per batch row of `post`.
pub fn draw_ensembles<Dc: Decode + ?Sized, R: Rng + ?Sized>(
    post: &PosteriorTensors,
    decoder: &Dc,
    n_s: usize,
    rng: &mut R,
) -> Result<Vec<PosteriorEnsemble>> {
    if n_s == 0 {
        return Err(Error::rejected("ensemble size must be >= 1"));
    }
    let batch = post.batch()?;
    let d = post.mu.dim(1)?;
    let eps: Vec<f64> = (0..batch * n_s * d).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::from_vec(eps, (batch * n_s, d), decoder.device())?.to_dtype(decoder.dtype())?;
    let rep = post.repeat_interleave(n_s)?;
    let z0 = (&rep.mu + (&rep.sigma * eps)?)?;
    let (zk, _) = crate::model::tensor_flow::flow_forward_batch(&z0, &rep.flows)?;
    let images = tensor_to_grids(&decoder.decode_tensor(&zk, false)?)?;
    images
        .chunks(n_s)
        .map(|chunk| PosteriorEnsemble::new(chunk.to_vec()))
        .collect()
}

/// Shared settings for all mask policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Lines acquired per frame.
    pub lines: usize,
    pub n_samples: usize,
    pub candidates: usize,
    pub exclusion_radius: usize,
    pub decay: f64,
    pub jitter: f64,
    pub trace_solver: TraceSolver,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Trace,
            lines: 6,
            n_samples: 3,
            candidates: 10_000,
            exclusion_radius: 1,
            decay: 6.0,
            jitter: 1e-6,
            trace_solver: TraceSolver::Exact,
        }
    }
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, lines: usize) -> Self {
        Self { kind, lines, ..Default::default() }
    }

    pub fn validate(&self, n_gamma: usize) -> Result<()> {
        if self.kind == PolicyKind::Full {
            return Ok(());
        }
        if self.lines == 0 || self.lines > n_gamma {
            return Err(Error::Config(format!("cannot acquire {} of {n_gamma} lines", self.lines)));
        }
        if self.kind == PolicyKind::Trace && self.lines > max_lines_with_exclusion(n_gamma, self.exclusion_radius) {
            return Err(Error::Config(format!(
                "{} lines do not fit with exclusion radius {}",
                self.lines, self.exclusion_radius
            )));
        }
        if self.kind.is_active() && self.n_samples == 0 {
            return Err(Error::Config("active policies need n_samples >= 1".into()));
        }
        if self.kind == PolicyKind::Covariance && self.candidates == 0 {
            return Err(Error::Config("covariance policy needs at least one candidate".into()));
        }
        Ok(())
    }

    /// Mask for a content-independent policy at frame `t`.
    pub fn static_decision<R: Rng + ?Sized>(&self, t: usize, n_gamma: usize, rng: &mut R) -> Result<PolicyDecision> {
        let mask = match self.kind {
            PolicyKind::Uniform => uniform_random_mask(rng, n_gamma, self.lines)?,
            PolicyKind::VariableDensity => variable_density_mask(rng, n_gamma, self.lines, self.decay)?,
            PolicyKind::Equispaced => equispaced_mask(t, n_gamma, self.lines)?,
            PolicyKind::Full => ScanLineMask::full(n_gamma),
            PolicyKind::Covariance | PolicyKind::Trace => {
                return Err(Error::rejected(format!("{} policy needs a posterior ensemble", self.kind)))
            }
        };
        Ok(PolicyDecision { mask, score: 0.0, policy: self.kind, candidates_examined: 0 })
    }

    /// Mask for an information-gain policy given the predicted ensemble.
    pub fn active_decision<R: Rng + ?Sized>(
        &self,
        ens: &PosteriorEnsemble,
        noise: NoiseModel,
        rng: &mut R,
    ) -> Result<PolicyDecision> {
        match self.kind {
            PolicyKind::Trace => {
                trace_policy_with(&line_variance_scores(ens), self.lines, self.exclusion_radius, self.trace_solver)
            }
            PolicyKind::Covariance => {
                let candidates = generate_candidates(rng, ens.n_gamma(), self.lines, self.candidates)?;
                covariance_policy(ens, &candidates, noise, self.jitter)
            }
            other => Err(Error::rejected(format!("{other} is not an information-gain policy"))),
        }
    }
}

//! Scan-line subsampling operators and the static baseline policies.
//!
//! A mask is stored as its selected column indices and acts as a gather on
//! polar frames; the dense `M x N` selection matrix is never built.

use std::fmt;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polar_grid::Grid;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScanLineMask {
    lines: Vec<usize>,
    n_gamma: usize,
}

impl ScanLineMask {
    /// Build a mask from arbitrary-order indices. Duplicates and out-of-range indices are rejected.
    pub fn new(mut lines: Vec<usize>, n_gamma: usize) -> Result<Self> {
        lines.sort_unstable();
        if lines.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::rejected(format!("duplicate scan-line in {lines:?}")));
        }
        if let Some(&last) = lines.last() {
            if last >= n_gamma {
                return Err(Error::rejected(format!(
                    "scan-line {last} out of range for {n_gamma} lines"
                )));
            }
        }
        Ok(Self { lines, n_gamma })
    }

    pub fn full(n_gamma: usize) -> Self {
        Self { lines: (0..n_gamma).collect(), n_gamma }
    }

    pub fn empty(n_gamma: usize) -> Self {
        Self { lines: Vec::new(), n_gamma }
    }

    pub fn lines(&self) -> &[usize] {
        &self.lines
    }

    pub fn n_gamma(&self) -> usize {
        self.n_gamma
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn contains(&self, line: usize) -> bool {
        self.lines.binary_search(&line).is_ok()
    }

    /// Checks the structural invariants; `new` already guarantees them.
    pub fn is_valid(&self) -> bool {
        self.lines.windows(2).all(|w| w[0] < w[1]) && self.lines.iter().all(|&l| l < self.n_gamma)
    }

    /// Smallest index gap between consecutive selected lines.
    pub fn min_gap(&self) -> Option<usize> {
        self.lines.windows(2).map(|w| w[1] - w[0]).min()
    }

    /// Plain-text form used in mask logs: space-separated indices.
    pub fn to_log_line(&self) -> String {
        self.to_string()
    }

    pub fn parse_log_line(line: &str, n_gamma: usize) -> Result<Self> {
        let lines = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|e| Error::rejected(format!("bad mask index {tok:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lines, n_gamma)
    }
}

impl fmt::Display for ScanLineMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for l in &self.lines {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
            first = false;
        }
        Ok(())
    }
}

/// Additive white Gaussian observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub std: f64,
}

impl NoiseModel {
    pub fn new(std: f64) -> Result<Self> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(Error::rejected(format!("noise std must be finite and >= 0, got {std}")));
        }
        Ok(Self { std })
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { std: 0.02 }
    }
}

/// Partial observation of one frame: the gathered columns of the polar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Grid,
    pub mask: ScanLineMask,
    pub frame_index: usize,
}

/// Gather the masked columns of `frame` and add noise.
pub fn apply_mask<R: Rng + ?Sized>(
    frame: &Grid,
    mask: &ScanLineMask,
    noise: NoiseModel,
    frame_index: usize,
    rng: &mut R,
) -> Result<Observation> {
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::rejected("frame contains non-finite values"));
    }
    if mask.n_gamma() != frame.ncols() {
        return Err(Error::rejected(format!(
            "mask is for {} lines but frame has {} columns",
            mask.n_gamma(),
            frame.ncols()
        )));
    }
    let mut values = frame.select_columns(mask.lines());
    if noise.std > 0.0 {
        for v in values.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += noise.std * n;
        }
    }
    Ok(Observation { values, mask: mask.clone(), frame_index })
}

/// Scatter an observation back to full width. Returns the zero-filled grid and the binary mask image.
pub fn zero_fill(obs: &Observation, n_gamma: usize) -> (Grid, Grid) {
    let n_r = obs.values.nrows();
    let mut filled = DMatrix::zeros(n_r, n_gamma);
    let mut mask_img = DMatrix::zeros(n_r, n_gamma);
    for (k, &line) in obs.mask.lines().iter().enumerate() {
        filled.set_column(line, &obs.values.column(k));
        mask_img.column_mut(line).fill(1.0);
    }
    (filled, mask_img)
}

fn check_budget(n_gamma: usize, l: usize) -> Result<()> {
    if l == 0 || l > n_gamma {
        return Err(Error::rejected(format!(
            "cannot select {l} lines out of {n_gamma}"
        )));
    }
    Ok(())
}

/// `l` distinct lines drawn uniformly without replacement.
pub fn uniform_random_mask<R: Rng + ?Sized>(rng: &mut R, n_gamma: usize, l: usize) -> Result<ScanLineMask> {
    check_budget(n_gamma, l)?;
    let lines = rand::seq::index::sample(rng, n_gamma, l).into_vec();
    ScanLineMask::new(lines, n_gamma)
}

/// Center-weighted sampling, `w(i) = (1 - |i - c| / (c + 1))^decay` with `c = (n_gamma - 1) / 2`.
pub fn variable_density_weights(n_gamma: usize, decay: f64) -> Vec<f64> {
    let c = (n_gamma as f64 - 1.0) / 2.0;
    (0..n_gamma)
        .map(|i| (1.0 - (i as f64 - c).abs() / (c + 1.0)).powf(decay))
        .collect()
}

/// Successive weighted draws without replacement, renormalizing after each pick.
pub fn variable_density_mask<R: Rng + ?Sized>(
    rng: &mut R,
    n_gamma: usize,
    l: usize,
    decay: f64,
) -> Result<ScanLineMask> {
    check_budget(n_gamma, l)?;
    if !(decay >= 0.0) {
        return Err(Error::rejected(format!("decay must be >= 0, got {decay}")));
    }
    let mut weights = variable_density_weights(n_gamma, decay);
    let mut lines = Vec::with_capacity(l);
    for _ in 0..l {
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        let i = pick.ok_or_else(|| Error::Numerical("variable-density weights exhausted".into()))?;
        weights[i] = 0.0;
        lines.push(i);
    }
    ScanLineMask::new(lines, n_gamma)
}

/// Evenly spaced lines, shifted by one index per frame and wrapped modulo the spacing.
pub fn equispaced_mask(t: usize, n_gamma: usize, l: usize) -> Result<ScanLineMask> {
    check_budget(n_gamma, l)?;
    let spacing = n_gamma / l;
    let offset = t % spacing;
    let lines = (0..l).map(|k| offset + k * spacing).filter(|&i| i < n_gamma).collect();
    ScanLineMask::new(lines, n_gamma)
}

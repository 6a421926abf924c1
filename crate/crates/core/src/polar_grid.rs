//! Sector-scan geometry and scan conversion.
//!
//! The sector apex sits at the top-center of the Cartesian image (row 0,
//! column `(cart_w - 1) / 2`). Angles are measured from the vertical
//! centerline, so a point at depth `r` and angle `gamma` lands on
//! `row = r cos(gamma)`, `col = apex_col + r sin(gamma)`.
//!
//! Polar grids are `n_r x n_gamma` matrices: each column is one scan-line,
//! each row one depth sample. Depth bin `i` is centered on
//! `r_i = (i + 1) * r_max / n_r`, angle bin `j` on
//! `gamma_min + j * (gamma_max - gamma_min) / (n_gamma - 1)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued image. Polar grids use rows for depth and columns for scan-lines.
pub type Grid = DMatrix<f64>;

/// Cartesian pixels covered by the sector.
pub type ValidityMask = DMatrix<bool>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolarGridSpec {
    pub n_r: usize,
    pub n_gamma: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub r_max: f64,
    pub cart_h: usize,
    pub cart_w: usize,
}

impl Default for PolarGridSpec {
    fn default() -> Self {
        Self {
            n_r: 64,
            n_gamma: 64,
            gamma_min: -0.5,
            gamma_max: 0.5,
            r_max: 110.0,
            cart_h: 112,
            cart_w: 112,
        }
    }
}

impl PolarGridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_r < 1 {
            return Err(Error::rejected("n_r must be >= 1"));
        }
        if self.n_gamma < 2 {
            return Err(Error::rejected("n_gamma must be >= 2"));
        }
        if !(self.gamma_min < self.gamma_max) {
            return Err(Error::rejected("gamma_min must be < gamma_max"));
        }
        if !(self.r_max > 0.0) {
            return Err(Error::rejected("r_max must be > 0"));
        }
        if self.cart_h == 0 || self.cart_w == 0 {
            return Err(Error::rejected("Cartesian dimensions must be positive"));
        }
        Ok(())
    }

    /// Total polar pixel count `n_r * n_gamma`.
    pub fn n_pixels(&self) -> usize {
        self.n_r * self.n_gamma
    }

    pub fn dr(&self) -> f64 {
        self.r_max / self.n_r as f64
    }

    pub fn dgamma(&self) -> f64 {
        (self.gamma_max - self.gamma_min) / (self.n_gamma - 1) as f64
    }

    pub fn depth(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.dr()
    }

    pub fn angle(&self, j: usize) -> f64 {
        self.gamma_min + j as f64 * self.dgamma()
    }

    fn apex_col(&self) -> f64 {
        (self.cart_w as f64 - 1.0) / 2.0
    }

    /// Cartesian (row, col) of a polar coordinate.
    pub fn to_cartesian(&self, r: f64, gamma: f64) -> (f64, f64) {
        (r * gamma.cos(), self.apex_col() + r * gamma.sin())
    }

    /// Polar (r, gamma) of a Cartesian (row, col).
    pub fn to_polar(&self, row: f64, col: f64) -> (f64, f64) {
        let dx = col - self.apex_col();
        (row.hypot(dx), dx.atan2(row))
    }

    /// Fractional (depth, line) bin indices of a Cartesian pixel, if it lies inside the cone.
    fn polar_bin(&self, row: f64, col: f64) -> Option<(f64, f64)> {
        const EDGE: f64 = 1e-9;
        let (r, gamma) = self.to_polar(row, col);
        let fi = r / self.dr() - 1.0;
        let fj = (gamma - self.gamma_min) / self.dgamma();
        let inside = fi >= -EDGE
            && fi <= (self.n_r - 1) as f64 + EDGE
            && fj >= -EDGE
            && fj <= (self.n_gamma - 1) as f64 + EDGE;
        inside.then_some((fi, fj))
    }

    /// Cartesian pixels that fall inside the sector.
    pub fn validity_mask(&self) -> ValidityMask {
        DMatrix::from_fn(self.cart_h, self.cart_w, |row, col| {
            self.polar_bin(row as f64, col as f64).is_some()
        })
    }
}

/// Bilinear sample of `img` at fractional (row, col). Returns `None` outside the grid.
pub fn bilinear(img: &Grid, row: f64, col: f64) -> Option<f64> {
    const EDGE: f64 = 1e-9;
    let (h, w) = img.shape();
    if row < -EDGE || col < -EDGE || row > (h - 1) as f64 + EDGE || col > (w - 1) as f64 + EDGE {
        return None;
    }
    let row = row.clamp(0.0, (h - 1) as f64);
    let col = col.clamp(0.0, (w - 1) as f64);
    let r0 = (row.floor() as usize).min(h.saturating_sub(2));
    let c0 = (col.floor() as usize).min(w.saturating_sub(2));
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = row - r0 as f64;
    let fc = col - c0 as f64;
    let top = img[(r0, c0)] * (1.0 - fc) + img[(r0, c1)] * fc;
    let bottom = img[(r1, c0)] * (1.0 - fc) + img[(r1, c1)] * fc;
    Some(top * (1.0 - fr) + bottom * fr)
}

fn check_shape(img: &Grid, rows: usize, cols: usize, what: &str) -> Result<()> {
    if img.shape() != (rows, cols) {
        return Err(Error::rejected(format!(
            "{what} has shape {:?}, expected ({rows}, {cols})",
            img.shape()
        )));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::rejected(format!("{what} contains non-finite values")));
    }
    Ok(())
}

/// Resample a Cartesian image onto the polar grid.
pub fn cartesian_to_polar(image: &Grid, spec: &PolarGridSpec) -> Result<Grid> {
    spec.validate()?;
    check_shape(image, spec.cart_h, spec.cart_w, "Cartesian image")?;
    Ok(DMatrix::from_fn(spec.n_r, spec.n_gamma, |i, j| {
        let (row, col) = spec.to_cartesian(spec.depth(i), spec.angle(j));
        bilinear(image, row, col).unwrap_or(0.0)
    }))
}

/// Scan-convert a polar grid back to Cartesian pixels; outside the cone is 0.
pub fn polar_to_cartesian(polar: &Grid, spec: &PolarGridSpec) -> Result<Grid> {
    spec.validate()?;
    check_shape(polar, spec.n_r, spec.n_gamma, "polar image")?;
    Ok(DMatrix::from_fn(spec.cart_h, spec.cart_w, |row, col| {
        match spec.polar_bin(row as f64, col as f64) {
            Some((fi, fj)) => bilinear(polar, fi, fj).unwrap_or(0.0),
            None => 0.0,
        }
    }))
}

/// Per-bin Cartesian area weights, proportional to depth and normalized to mean 1.
pub fn density_weights(spec: &PolarGridSpec) -> Result<Grid> {
    spec.validate()?;
    let w = depth_weights(spec.n_r);
    Ok(DMatrix::from_fn(spec.n_r, spec.n_gamma, |i, _| w[i]))
}

/// Per-depth factor of [`density_weights`]: `(i + 1)` normalized to mean 1.
pub fn depth_weights(n_r: usize) -> Vec<f64> {
    let mean_depth = (n_r + 1) as f64 / 2.0;
    (0..n_r).map(|i| (i + 1) as f64 / mean_depth).collect()
}

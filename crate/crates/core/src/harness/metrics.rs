//! Image-quality metrics restricted to a validity mask.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polar_grid::{polar_to_cartesian, Grid, PolarGridSpec, ValidityMask};

/// Reported PSNR when the error is exactly zero.
pub const PSNR_CAP_DB: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricDomain {
    /// Scan-converted image, inside the imaging sector.
    #[default]
    Cartesian,
    /// Directly on the polar grid.
    Polar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub domain: MetricDomain,
    /// PSNR peak; the error itself is measured in `[0, 1]` units.
    pub psnr_peak: f64,
    pub ssim: SsimParams,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { domain: MetricDomain::Cartesian, psnr_peak: 255.0, ssim: SsimParams::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
}

fn check(recon: &Grid, truth: &Grid, valid: &ValidityMask) -> Result<usize> {
    if recon.shape() != truth.shape() || valid.shape() != truth.shape() {
        return Err(Error::rejected(format!(
            "metric inputs have shapes {:?}, {:?} and mask {:?}",
            recon.shape(),
            truth.shape(),
            valid.shape()
        )));
    }
    let n = valid.iter().filter(|v| **v).count();
    if n == 0 {
        return Err(Error::rejected("validity mask is empty"));
    }
    Ok(n)
}

pub fn l1_metric(recon: &Grid, truth: &Grid, valid: &ValidityMask) -> Result<f64> {
    let n = check(recon, truth, valid)?;
    let sum: f64 = recon
        .iter()
        .zip(truth.iter())
        .zip(valid.iter())
        .filter(|(_, v)| **v)
        .map(|((a, b), _)| (a - b).abs())
        .sum();
    Ok(sum / n as f64)
}

pub fn mse_metric(recon: &Grid, truth: &Grid, valid: &ValidityMask) -> Result<f64> {
    let n = check(recon, truth, valid)?;
    let sum: f64 = recon
        .iter()
        .zip(truth.iter())
        .zip(valid.iter())
        .filter(|(_, v)| **v)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum();
    Ok(sum / n as f64)
}

/// `20 log10(peak / sqrt(MSE))`, capped at [`PSNR_CAP_DB`].
pub fn psnr_metric(recon: &Grid, truth: &Grid, valid: &ValidityMask, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::rejected("PSNR peak must be > 0"));
    }
    let mse = mse_metric(recon, truth, valid)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((20.0 * peak.log10() - 10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel(p: &SsimParams) -> Vec<f64> {
    let half = (p.window / 2) as f64;
    let k: Vec<f64> = (0..p.window).map(|i| (-(i as f64 - half).powi(2) / (2.0 * p.sigma * p.sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter; the kernel is renormalized where it overhangs the border.
fn blur(img: &Grid, kernel: &[f64]) -> Grid {
    let (h, w) = img.shape();
    let half = kernel.len() as isize / 2;
    let pass = |src: &Grid, along_rows: bool| -> Grid {
        DMatrix::from_fn(h, w, |r, c| {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, wk) in kernel.iter().enumerate() {
                let off = k as isize - half;
                let (rr, cc) = if along_rows { (r as isize + off, c as isize) } else { (r as isize, c as isize + off) };
                if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                    acc += wk * src[(rr as usize, cc as usize)];
                    norm += wk;
                }
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

/// Per-pixel structural similarity map.
pub fn ssim_map(a: &Grid, b: &Grid, p: &SsimParams) -> Result<Grid> {
    if a.shape() != b.shape() {
        return Err(Error::rejected("SSIM inputs must share a shape"));
    }
    if p.window == 0 || p.window % 2 == 0 || !(p.sigma > 0.0) {
        return Err(Error::rejected("SSIM window must be odd and sigma > 0"));
    }
    let k = gaussian_kernel(p);
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    let mu_a = blur(a, &k);
    let mu_b = blur(b, &k);
    let saa = blur(&a.component_mul(a), &k);
    let sbb = blur(&b.component_mul(b), &k);
    let sab = blur(&a.component_mul(b), &k);
    Ok(DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| {
        let (ma, mb) = (mu_a[(r, c)], mu_b[(r, c)]);
        let va = saa[(r, c)] - ma * ma;
        let vb = sbb[(r, c)] - mb * mb;
        let cov = sab[(r, c)] - ma * mb;
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    }))
}

/// Mean SSIM over the valid pixels.
pub fn ssim_metric(recon: &Grid, truth: &Grid, valid: &ValidityMask, p: &SsimParams) -> Result<f64> {
    let n = check(recon, truth, valid)?;
    let map = ssim_map(recon, truth, p)?;
    let sum: f64 = map.iter().zip(valid.iter()).filter(|(_, v)| **v).map(|(s, _)| *s).sum();
    Ok((sum / n as f64).clamp(-1.0, 1.0))
}

/// Scores polar reconstructions against polar ground truth in the configured domain.
#[derive(Debug, Clone)]
pub struct FrameScorer {
    spec: PolarGridSpec,
    settings: MetricSettings,
    valid: ValidityMask,
}

impl FrameScorer {
    pub fn new(spec: &PolarGridSpec, settings: MetricSettings) -> Result<Self> {
        spec.validate()?;
        let valid = match settings.domain {
            MetricDomain::Cartesian => spec.validity_mask(),
            MetricDomain::Polar => DMatrix::from_element(spec.n_r, spec.n_gamma, true),
        };
        Ok(Self { spec: spec.clone(), settings, valid })
    }

    pub fn settings(&self) -> &MetricSettings {
        &self.settings
    }

    pub fn validity(&self) -> &ValidityMask {
        &self.valid
    }

    pub fn score(&self, recon: &Grid, truth: &Grid) -> Result<FrameMetrics> {
        let (r, t) = match self.settings.domain {
            MetricDomain::Cartesian => (polar_to_cartesian(recon, &self.spec)?, polar_to_cartesian(truth, &self.spec)?),
            MetricDomain::Polar => (recon.clone(), truth.clone()),
        };
        Ok(FrameMetrics {
            l1: l1_metric(&r, &t, &self.valid)?,
            ssim: ssim_metric(&r, &t, &self.valid, &self.settings.ssim)?,
            psnr: psnr_metric(&r, &t, &self.valid, self.settings.psnr_peak)?,
        })
    }
}

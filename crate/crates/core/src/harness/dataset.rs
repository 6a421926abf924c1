//! Video datasets: EchoNet-style directories and the synthetic phantom.
//!
//! # On-disk layout
//!
//! ```text
//! <root>/FileList.csv        header with at least `FileName` and `Split` columns
//! <root>/Videos/<FileName>.npy   (or <root>/<FileName>.npy)
//! ```
//!
//! Each `.npy` holds a C-order `(T, H, W)` grayscale stack of dtype `u1`,
//! `f4` or `f8`. `u1` is scaled by 1/255; floats are taken as-is when their
//! maximum is at most 1, otherwise scaled by 1/255. `H x W` must match the
//! Cartesian size of the grid spec. Videos that fail these checks are
//! skipped and reported.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polar_grid::{cartesian_to_polar, Grid, PolarGridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    EchonetFormat,
    SyntheticPhantom,
}

/// Fully sampled polar-domain frames of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Grid>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoDataset {
    pub videos: Vec<FrameSequence>,
    pub split: Split,
    pub source: DataSource,
}

impl VideoDataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.videos.iter().map(FrameSequence::len).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Grid> {
        self.videos.iter().flat_map(|v| v.frames.iter())
    }

    /// Pixelwise mean over every frame in the dataset.
    pub fn mean_frame(&self) -> Option<Grid> {
        let mut it = self.frames();
        let first = it.next()?.clone();
        let (sum, n) = it.fold((first, 1usize), |(acc, n), f| (acc + f, n + 1));
        Some(sum / n as f64)
    }

    /// Correlation between scan lines `lag` apart, for `lag` in `0..=max_lag`,
    /// of frames minus the dataset mean frame.
    pub fn lateral_correlation(&self, max_lag: usize) -> Option<Vec<f64>> {
        let mean = self.mean_frame()?;
        let (n_r, n_gamma) = mean.shape();
        let mut num = vec![0.0; max_lag + 1];
        let mut energy = 0.0;
        for f in self.frames() {
            let d = f - &mean;
            energy += d.norm_squared();
            for (lag, acc) in num.iter_mut().enumerate().take(n_gamma) {
                for i in 0..n_r {
                    for j in 0..n_gamma - lag {
                        *acc += d[(i, j)] * d[(i, j + lag)];
                    }
                }
            }
        }
        if !(energy > 0.0) {
            return None;
        }
        Some(
            num.iter()
                .enumerate()
                .map(|(lag, &v)| if lag < n_gamma { v * n_gamma as f64 / ((n_gamma - lag) as f64 * energy) } else { 0.0 })
                .collect(),
        )
    }

    /// Smallest exclusion radius `r` for which lines `r + 1` apart correlate
    /// below `threshold`.
    pub fn decorrelation_radius(&self, threshold: f64) -> Option<usize> {
        let n_gamma = self.videos.first()?.frames.first()?.ncols();
        let corr = self.lateral_correlation(n_gamma.saturating_sub(1))?;
        corr.iter().position(|&c| c < threshold).map(|lag| lag.saturating_sub(1))
    }

    pub fn check_invariants(&self) -> Result<()> {
        for v in &self.videos {
            if v.len() < 2 {
                return Err(Error::rejected(format!("video {} has fewer than 2 frames", v.id)));
            }
            if v.frames.iter().flat_map(|f| f.iter()).any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::rejected(format!("video {} has values outside [0, 1]", v.id)));
            }
        }
        Ok(())
    }
}

/// Why a video was left out while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipRecord {
    pub video: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchonetLoad {
    pub train: VideoDataset,
    pub val: VideoDataset,
    pub test: VideoDataset,
    pub skipped: Vec<SkipRecord>,
}

impl EchonetLoad {
    pub fn split(&self, split: Split) -> &VideoDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn empty_split(split: Split) -> VideoDataset {
    VideoDataset { videos: Vec::new(), split, source: DataSource::EchonetFormat }
}

/// Load an EchoNet-style directory, converting every frame to the polar grid.
pub fn load_echonet_format(path: &Path, spec: &PolarGridSpec) -> Result<EchonetLoad> {
    spec.validate()?;
    let mut out = EchonetLoad {
        train: empty_split(Split::Train),
        val: empty_split(Split::Val),
        test: empty_split(Split::Test),
        skipped: Vec::new(),
    };
    let manifest = path.join("FileList.csv");
    if !manifest.exists() {
        let is_empty = fs::read_dir(path)
            .map_err(|e| Error::Config(format!("cannot read dataset directory {}: {e}", path.display())))?
            .next()
            .is_none();
        if is_empty {
            log::warn!("dataset directory {} is empty", path.display());
            return Ok(out);
        }
        return Err(Error::Config(format!("missing manifest {}", manifest.display())));
    }

    let mut reader = csv::Reader::from_path(&manifest)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", manifest.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Config(format!("bad manifest header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let (name_col, split_col) = match (col("FileName"), col("Split")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Config("manifest needs FileName and Split columns".into())),
    };

    for record in reader.records() {
        let record = record.map_err(|e| Error::Config(format!("bad manifest row: {e}")))?;
        let name = record.get(name_col).unwrap_or("").trim().to_string();
        let name = name.strip_suffix(".avi").unwrap_or(&name).to_string();
        let Some(split) = record.get(split_col).and_then(Split::parse) else {
            out.skipped.push(SkipRecord { video: name, reason: "unknown split".into() });
            continue;
        };
        match load_video(path, &name, spec) {
            Ok(frames) => {
                let seq = FrameSequence { id: name, frames };
                match split {
                    Split::Train => out.train.videos.push(seq),
                    Split::Val => out.val.videos.push(seq),
                    Split::Test => out.test.videos.push(seq),
                }
            }
            Err(reason) => {
                log::warn!("skipping video {name}: {reason}");
                out.skipped.push(SkipRecord { video: name, reason });
            }
        }
    }
    Ok(out)
}

fn video_path(root: &Path, name: &str) -> Option<PathBuf> {
    [root.join("Videos").join(format!("{name}.npy")), root.join(format!("{name}.npy"))]
        .into_iter()
        .find(|p| p.exists())
}

fn load_video(root: &Path, name: &str, spec: &PolarGridSpec) -> std::result::Result<Vec<Grid>, String> {
    let path = video_path(root, name).ok_or_else(|| "video file not found".to_string())?;
    let bytes = fs::read(&path).map_err(|e| format!("unreadable: {e}"))?;
    let stack = parse_npy(&bytes)?;
    let [t, h, w] = stack.shape;
    if t < 2 {
        return Err(format!("only {t} frames"));
    }
    if (h, w) != (spec.cart_h, spec.cart_w) {
        return Err(format!("frame size {h}x{w} does not match {}x{}", spec.cart_h, spec.cart_w));
    }
    if stack.data.iter().any(|v| !v.is_finite()) {
        return Err("non-finite pixel values".into());
    }
    let max = stack.data.iter().cloned().fold(0.0f64, f64::max);
    let scale = if stack.integer || max > 1.0 { 1.0 / 255.0 } else { 1.0 };
    let mut frames = Vec::with_capacity(t);
    for k in 0..t {
        let slice = &stack.data[k * h * w..(k + 1) * h * w];
        let cart = DMatrix::from_row_slice(h, w, slice).map(|v| (v * scale).clamp(0.0, 1.0));
        frames.push(cartesian_to_polar(&cart, spec).map_err(|e| e.to_string())?);
    }
    Ok(frames)
}

struct NpyStack {
    shape: [usize; 3],
    data: Vec<f64>,
    integer: bool,
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    Some(rest)
}

/// Minimal `.npy` v1/v2 reader for 3-D C-order arrays.
fn parse_npy(bytes: &[u8]) -> std::result::Result<NpyStack, String> {
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err("not an .npy file".into());
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12),
        v => return Err(format!("unsupported .npy version {v}")),
    };
    let header = std::str::from_utf8(bytes.get(offset..offset + header_len).ok_or("truncated header")?)
        .map_err(|_| "header is not text")?;
    let descr = header_value(header, "descr").ok_or("missing descr")?;
    let descr = descr.trim_start_matches(['\'', '"']);
    let descr: String = descr.chars().take_while(|c| *c != '\'' && *c != '"').collect();
    if header_value(header, "fortran_order").is_some_and(|v| v.starts_with("True")) {
        return Err("fortran-order arrays are not supported".into());
    }
    let shape_txt = header_value(header, "shape").ok_or("missing shape")?;
    let inner = shape_txt.trim_start_matches('(');
    let inner = &inner[..inner.find(')').ok_or("bad shape")?];
    let dims: Vec<usize> = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("bad shape entry {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let shape: [usize; 3] = dims.try_into().map_err(|d: Vec<usize>| format!("expected 3-D array, got {}-D", d.len()))?;
    let n: usize = shape.iter().product();
    let body = &bytes[offset + header_len..];
    let (data, integer) = match descr.as_str() {
        "|u1" | "u1" => (body.get(..n).ok_or("truncated data")?.iter().map(|&b| b as f64).collect(), true),
        "<f4" => (
            body.get(..4 * n)
                .ok_or("truncated data")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            false,
        ),
        "<f8" => (
            body.get(..8 * n)
                .ok_or("truncated data")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
            false,
        ),
        other => return Err(format!("unsupported dtype {other}")),
    };
    Ok(NpyStack { shape, data, integer })
}

/// Write a `(T, H, W)` `u1` stack in `.npy` format.
pub fn write_npy_u8(path: &Path, frames: &[Grid]) -> Result<()> {
    let (h, w) = frames.first().map(|f| f.shape()).ok_or_else(|| Error::rejected("no frames"))?;
    let mut header = format!("{{'descr': '|u1', 'fortran_order': False, 'shape': ({}, {h}, {w}), }}", frames.len());
    let pad = 64 - (10 + header.len() + 1) % 64;
    header.push_str(&" ".repeat(pad % 64));
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for f in frames {
        for r in 0..h {
            for c in 0..w {
                out.push((f[(r, c)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Phantom video generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    /// Frames per cardiac-like cycle.
    pub period: f64,
    /// Relative amplitude of the axis oscillation.
    pub pulsation: f64,
    pub speckle: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { n_videos: 10, frames_per_video: 20, period: 20.0, pulsation: 0.25, speckle: 0.15 }
    }
}

struct Blob {
    row: f64,
    col: f64,
    a: f64,
    b: f64,
    theta: f64,
    phase: f64,
    brightness: f64,
}

/// Synthetic cardiac-like sector videos: 2-4 bright ellipses with periodically
/// pulsating axes over a dark background, with a per-video static speckle field.
pub fn synth_phantom_dataset<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &PhantomConfig,
    spec: &PolarGridSpec,
    split: Split,
) -> Result<VideoDataset> {
    spec.validate()?;
    if cfg.n_videos == 0 || cfg.frames_per_video == 0 {
        return Err(Error::rejected("phantom sizes must be positive"));
    }
    let mut videos = Vec::with_capacity(cfg.n_videos);
    for v in 0..cfg.n_videos {
        let n_blobs = rng.random_range(2..=4);
        let blobs: Vec<Blob> = (0..n_blobs)
            .map(|_| {
                let r = rng.random_range(0.3..0.85) * spec.r_max;
                let g = rng.random_range(spec.gamma_min * 0.85..spec.gamma_max * 0.85);
                let (row, col) = spec.to_cartesian(r, g);
                Blob {
                    row,
                    col,
                    a: rng.random_range(0.06..0.16) * spec.r_max,
                    b: rng.random_range(0.04..0.10) * spec.r_max,
                    theta: rng.random_range(0.0..std::f64::consts::PI),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    brightness: rng.random_range(0.55..0.95),
                }
            })
            .collect();
        let speckle: Vec<f64> = (0..spec.cart_h * spec.cart_w)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                (1.0 + cfg.speckle * n).max(0.0)
            })
            .collect();
        let background = rng.random_range(0.03..0.10);
        let mut frames = Vec::with_capacity(cfg.frames_per_video);
        for t in 0..cfg.frames_per_video {
            let cart = DMatrix::from_fn(spec.cart_h, spec.cart_w, |row, col| {
                let (y, x) = (row as f64, col as f64);
                let mut value = background;
                for blob in &blobs {
                    let s = 1.0 + cfg.pulsation * (std::f64::consts::TAU * t as f64 / cfg.period + blob.phase).sin();
                    let (dy, dx) = (y - blob.row, x - blob.col);
                    let (ct, st) = (blob.theta.cos(), blob.theta.sin());
                    let u = (dx * ct + dy * st) / (blob.a * s);
                    let w = (-dx * st + dy * ct) / (blob.b * s);
                    let d2 = u * u + w * w;
                    // Soft-edged ellipse.
                    let inside = 1.0 / (1.0 + ((d2 - 1.0) * 6.0).exp());
                    value += blob.brightness * inside;
                }
                (value * speckle[row * spec.cart_w + col]).clamp(0.0, 1.0)
            });
            frames.push(cartesian_to_polar(&cart, spec)?);
        }
        videos.push(FrameSequence { id: format!("phantom-{split:?}-{v:04}").to_lowercase(), frames });
    }
    Ok(VideoDataset { videos, split, source: DataSource::SyntheticPhantom })
}

/// Group videos by id for quick lookup.
pub fn index_by_id(ds: &VideoDataset) -> HashMap<&str, &FrameSequence> {
    ds.videos.iter().map(|v| (v.id.as_str(), v)).collect()
}

//! Experiment configuration: one TOML file plus `key.path=value` overrides.
//!
//! ```toml
//! seed = 0
//! noise_std = 0.02
//! output_dir = "runs/desk"
//!
//! [grid]
//! n_r = 32
//! n_gamma = 64
//!
//! [model]
//! preset = "desk"
//!
//! [data]
//! source = "phantom"
//! train_videos = 200
//!
//! [train]
//! pretrain_steps = 1500
//!
//! [policy]
//! kind = "trace"
//! lines = 6
//!
//! [eval]
//! lines = [4, 6, 9]
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::{load_echonet_format, synth_phantom_dataset, PhantomConfig, Split, VideoDataset};
use crate::harness::evaluate::{EvalConfig, Reconstruction};
use crate::harness::metrics::MetricSettings;
use crate::masks::NoiseModel;
use crate::model::{ModelConfig, Precision};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::polar_grid::PolarGridSpec;
use crate::training::TrainConfig;

/// Preset name plus optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub latent_dim: Option<usize>,
    pub enc_layers: Option<usize>,
    pub enc_channels: Option<usize>,
    pub dec_blocks: Option<usize>,
    pub dec_channels: Option<usize>,
    pub flow_layers: Option<usize>,
    pub flow_vectors: Option<usize>,
    pub precision: Option<Precision>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            latent_dim: None,
            enc_layers: None,
            enc_channels: None,
            dec_blocks: None,
            dec_channels: None,
            flow_layers: None,
            flow_vectors: None,
            precision: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, grid: &PolarGridSpec) -> Result<ModelConfig> {
        let mut m = ModelConfig::from_preset(&self.preset, grid.n_r, grid.n_gamma)?;
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { m.$f = v; } )* };
        }
        take!(latent_dim, enc_layers, enc_channels, dec_blocks, dec_channels, flow_layers, flow_vectors, precision);
        m.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    #[default]
    Phantom,
    Echonet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceKind,
    /// Dataset root for `echonet`.
    pub path: Option<PathBuf>,
    pub train_videos: usize,
    pub val_videos: usize,
    pub test_videos: usize,
    pub frames_per_video: usize,
    pub period: f64,
    pub pulsation: f64,
    pub speckle: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let p = PhantomConfig::default();
        Self {
            source: SourceKind::Phantom,
            path: None,
            train_videos: 200,
            val_videos: 25,
            test_videos: 25,
            frames_per_video: 20,
            period: p.period,
            pulsation: p.pulsation,
            speckle: p.speckle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    /// Lines per frame swept by the comparison table.
    pub lines: Vec<usize>,
    pub policies: Vec<PolicyKind>,
    pub metrics: MetricSettings,
    pub reconstruction: Reconstruction,
    pub max_frames: Option<usize>,
    pub workers: usize,
    pub bench_trials: usize,
    pub bench_warmup: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            lines: vec![4, 6, 9],
            policies: vec![PolicyKind::Uniform, PolicyKind::VariableDensity, PolicyKind::Equispaced, PolicyKind::Covariance, PolicyKind::Trace],
            metrics: MetricSettings::default(),
            reconstruction: Reconstruction::PosteriorMean,
            max_frames: None,
            workers: 1,
            bench_trials: 20,
            bench_warmup: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub noise_std: f64,
    pub output_dir: PathBuf,
    pub grid: PolarGridSpec,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_std: 0.02,
            output_dir: PathBuf::from("runs/desk"),
            grid: PolarGridSpec { n_r: 32, n_gamma: 64, cart_h: 64, cart_w: 64, r_max: 60.0, ..PolarGridSpec::default() },
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainConfig { pretrain_steps: 1500, batch_size: 8, learning_rate: 1e-3, ..TrainConfig::default() },
            policy: PolicyConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {path:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parse the right-hand side of an override as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parse TOML text and apply `key.path=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.grid.validate().map_err(cfg_err)?;
        NoiseModel::new(self.noise_std).map_err(cfg_err)?;
        self.model.resolve(&self.grid)?;
        self.train.validate()?;
        self.policy.validate(self.grid.n_gamma)?;
        if self.data.source == SourceKind::Echonet && self.data.path.is_none() {
            return Err(Error::Config("data.path is required for the echonet source".into()));
        }
        if self.data.frames_per_video < 2 {
            return Err(Error::Config("data.frames_per_video must be >= 2".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve(&self.grid)
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel { std: self.noise_std }
    }

    /// Evaluation settings for one policy at `lines` per frame.
    pub fn eval_config(&self, kind: PolicyKind, lines: usize) -> EvalConfig {
        EvalConfig {
            policy: PolicyConfig { kind, lines, ..self.policy.clone() },
            noise_std: self.noise_std,
            seed: self.seed,
            metrics: self.eval.metrics,
            reconstruction: self.eval.reconstruction,
            max_frames: self.eval.max_frames,
            workers: self.eval.workers,
        }
    }

    /// Load or synthesize one split.
    pub fn dataset(&self, split: Split) -> Result<VideoDataset> {
        match self.data.source {
            SourceKind::Phantom => {
                let n_videos = match split {
                    Split::Train => self.data.train_videos,
                    Split::Val => self.data.val_videos,
                    Split::Test => self.data.test_videos,
                };
                let cfg = PhantomConfig {
                    n_videos,
                    frames_per_video: self.data.frames_per_video,
                    period: self.data.period,
                    pulsation: self.data.pulsation,
                    speckle: self.data.speckle,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(match split {
                    Split::Train => 101,
                    Split::Val => 102,
                    Split::Test => 103,
                });
                synth_phantom_dataset(&mut rng, &cfg, &self.grid, split)
            }
            SourceKind::Echonet => {
                let path = self.data.path.as_deref().expect("validated");
                let load = load_echonet_format(path, &self.grid)?;
                for s in &load.skipped {
                    log::warn!("skipped video {}: {}", s.video, s.reason);
                }
                Ok(load.split(split).clone())
            }
        }
    }
}

//! Closed-loop evaluation: acquire, infer, reconstruct and score every frame.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::{FrameSequence, VideoDataset};
use crate::harness::metrics::{FrameMetrics, FrameScorer, MetricSettings};
use crate::masks::{apply_mask, zero_fill, NoiseModel, ScanLineMask};
use crate::model::tensor_flow::flow_forward_batch;
use crate::model::{encoder_input, tensor_to_grids, GenerativeModel, InferenceModel, PosteriorTensors};
use crate::polar_grid::{Grid, PolarGridSpec};
use crate::training::{draw_eps, initial_mask, next_masks};

/// How a frame estimate is formed from the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Reconstruction {
    /// Decode of the flowed posterior mean (`eps = 0`).
    #[default]
    PosteriorMean,
    /// Average of decoded posterior samples.
    SampleAverage { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub policy: crate::policy::PolicyConfig,
    pub noise_std: f64,
    pub seed: u64,
    pub metrics: MetricSettings,
    pub reconstruction: Reconstruction,
    /// Truncate each video to this many frames.
    pub max_frames: Option<usize>,
    /// Worker threads; videos are split across them.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: crate::policy::PolicyConfig::default(),
            noise_std: NoiseModel::default().std,
            seed: 0,
            metrics: MetricSettings::default(),
            reconstruction: Reconstruction::PosteriorMean,
            max_frames: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub id: String,
    pub frames: usize,
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub policy: String,
    pub lines: usize,
    pub n_gamma: usize,
    /// Means over every evaluated frame.
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub frames: usize,
    pub per_video: Vec<VideoMetrics>,
    pub config: EvalConfig,
}

impl MetricReport {
    pub fn observed_fraction(&self) -> f64 {
        self.lines as f64 / self.n_gamma as f64
    }
}

/// Mask used at each frame of each video, in evaluation order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecisionLog {
    pub n_gamma: usize,
    pub entries: Vec<(String, usize, ScanLineMask)>,
}

impl DecisionLog {
    /// Tab-separated `video  frame  lines`, one row per frame.
    pub fn to_text(&self) -> String {
        let mut out = format!("# n_gamma={}\n", self.n_gamma);
        for (id, t, m) in &self.entries {
            let _ = writeln!(out, "{id}\t{t}\t{}", m.to_log_line());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let n_gamma: usize = header
            .strip_prefix("# n_gamma=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Config("decision log is missing its n_gamma header".into()))?;
        let mut entries = Vec::new();
        for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.splitn(3, '\t');
            let bad = || Error::Config(format!("malformed decision log row {}", k + 2));
            let id = parts.next().ok_or_else(bad)?.to_string();
            let t = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let mask = ScanLineMask::parse_log_line(parts.next().unwrap_or(""), n_gamma)?;
            entries.push((id, t, mask));
        }
        Ok(Self { n_gamma, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn masks_for(&self, id: &str) -> Vec<&ScanLineMask> {
        self.entries.iter().filter(|(v, _, _)| v == id).map(|(_, _, m)| m).collect()
    }
}

/// Trained decoder and encoder evaluated together.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub generative: &'a GenerativeModel,
    pub inference: &'a InferenceModel,
}

impl Models<'_> {
    fn check(&self, spec: &PolarGridSpec) -> Result<()> {
        if self.generative.cfg != self.inference.cfg {
            return Err(Error::Config("decoder and encoder checkpoints have different configurations".into()));
        }
        if self.generative.cfg.n_r != spec.n_r || self.generative.cfg.n_gamma != spec.n_gamma {
            return Err(Error::Config("model grid does not match the polar grid".into()));
        }
        Ok(())
    }
}

/// Reconstruction of every batch row of `post`.
pub fn reconstruct<R: Rng + ?Sized>(
    post: &PosteriorTensors,
    decoder: &GenerativeModel,
    how: Reconstruction,
    rng: &mut R,
) -> Result<Vec<Grid>> {
    match how {
        Reconstruction::PosteriorMean => {
            let (zk, _) = flow_forward_batch(&post.mu, &post.flows)?;
            tensor_to_grids(&decoder.decode_batch(&zk, false)?)
        }
        Reconstruction::SampleAverage { samples } => {
            if samples == 0 {
                return Err(Error::Config("sample-average reconstruction needs samples >= 1".into()));
            }
            let b = post.batch()?;
            let rep = post.repeat_interleave(samples)?;
            let eps = draw_eps(rng, b * samples, decoder.cfg.latent_dim, decoder.dtype(), &decoder.device)?;
            let z0 = (&rep.mu + (&rep.sigma * eps)?)?;
            let (zk, _) = flow_forward_batch(&z0, &rep.flows)?;
            let imgs = decoder.decode_batch(&zk, false)?;
            let (_, h, w) = imgs.dims3()?;
            tensor_to_grids(&imgs.reshape((b, samples, h, w))?.mean(1)?)
        }
    }
}

fn encode_one(inference: &InferenceModel, filled: &Grid, image: &Grid) -> Result<PosteriorTensors> {
    let x = encoder_input(&[filled], &[image], inference.dtype(), &inference.device)?;
    inference.encode_batch(&x)
}

struct VideoRun {
    metrics: Vec<FrameMetrics>,
    masks: Vec<ScanLineMask>,
}

/// Streams per video: measurement noise, policy randomness, reconstruction sampling.
fn video_rngs(seed: u64, index: usize) -> [ChaCha8Rng; 3] {
    std::array::from_fn(|k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3 * index as u64 + k as u64);
        rng
    })
}

fn run_video(
    models: Models,
    video: &FrameSequence,
    index: usize,
    cfg: &EvalConfig,
    scorer: &FrameScorer,
    fixed: Option<&[&ScanLineMask]>,
) -> Result<VideoRun> {
    let noise = NoiseModel::new(cfg.noise_std)?;
    let n_gamma = models.generative.cfg.n_gamma;
    let n_t = cfg.max_frames.map_or(video.len(), |m| m.min(video.len()));
    if let Some(f) = fixed {
        if f.len() != n_t {
            return Err(Error::Config(format!(
                "decision log has {} frames for video {}, expected {n_t}",
                f.len(),
                video.id
            )));
        }
    }
    let [mut noise_rng, mut policy_rng, mut recon_rng] = video_rngs(cfg.seed, index);
    let mut mask = match fixed {
        Some(f) => f[0].clone(),
        None => initial_mask(&cfg.policy, n_gamma, &mut policy_rng)?,
    };
    let mut run = VideoRun { metrics: Vec::with_capacity(n_t), masks: Vec::with_capacity(n_t) };
    for t in 0..n_t {
        let obs = apply_mask(&video.frames[t], &mask, noise, t, &mut noise_rng)?;
        let (filled, image) = zero_fill(&obs, n_gamma);
        let post = encode_one(models.inference, &filled, &image)?;
        let recon = reconstruct(&post, models.generative, cfg.reconstruction, &mut recon_rng)?.remove(0);
        run.metrics.push(scorer.score(&recon, &video.frames[t])?);
        run.masks.push(mask.clone());
        if t + 1 < n_t {
            mask = match fixed {
                Some(f) => f[t + 1].clone(),
                None => next_masks(&cfg.policy, t + 1, &post, models.generative, noise, &mut policy_rng)?.remove(0),
            };
        }
    }
    Ok(run)
}

fn run_all(
    models: Models,
    dataset: &VideoDataset,
    spec: &PolarGridSpec,
    cfg: &EvalConfig,
    log: Option<&DecisionLog>,
) -> Result<(MetricReport, DecisionLog)> {
    models.check(spec)?;
    cfg.policy.validate(spec.n_gamma).map_err(|e| Error::Config(e.to_string()))?;
    if dataset.is_empty() {
        return Err(Error::rejected("evaluation set has no videos"));
    }
    let scorer = FrameScorer::new(spec, cfg.metrics)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset.videos[a].id.cmp(&dataset.videos[b].id));
    let fixed: Vec<Option<Vec<&ScanLineMask>>> = order
        .iter()
        .map(|&i| log.map(|l| l.masks_for(&dataset.videos[i].id)))
        .collect();
    let order = &order;
    let job = |rank: usize| -> Result<VideoRun> {
        let video = &dataset.videos[order[rank]];
        run_video(models, video, rank, cfg, &scorer, fixed[rank].as_deref())
    };
    let workers = cfg.workers.clamp(1, order.len());
    let runs: Vec<VideoRun> = if workers == 1 {
        (0..order.len()).map(job).collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<VideoRun>>> = (0..order.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let job = &job;
                    s.spawn(move || (w..order.len()).step_by(workers).map(|r| (r, job(r))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (r, res) in h.join().expect("evaluation worker panicked") {
                    slots[r] = Some(res);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every video evaluated")).collect::<Result<_>>()?
    };

    let mut per_video = Vec::with_capacity(runs.len());
    let mut decisions = DecisionLog { n_gamma: spec.n_gamma, entries: Vec::new() };
    let (mut l1, mut ssim, mut psnr, mut frames) = (0.0, 0.0, 0.0, 0usize);
    for (rank, run) in runs.into_iter().enumerate() {
        let id = dataset.videos[order[rank]].id.clone();
        let n = run.metrics.len() as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| run.metrics.iter().map(f).sum::<f64>() / n;
        per_video.push(VideoMetrics {
            id: id.clone(),
            frames: run.metrics.len(),
            l1: mean(|m| m.l1),
            ssim: mean(|m| m.ssim),
            psnr: mean(|m| m.psnr),
        });
        for m in &run.metrics {
            l1 += m.l1;
            ssim += m.ssim;
            psnr += m.psnr;
        }
        frames += run.metrics.len();
        for (t, mask) in run.masks.into_iter().enumerate() {
            decisions.entries.push((id.clone(), t, mask));
        }
    }
    let f = frames as f64;
    let lines = if cfg.policy.kind == crate::policy::PolicyKind::Full { spec.n_gamma } else { cfg.policy.lines };
    let report = MetricReport {
        policy: cfg.policy.kind.to_string(),
        lines,
        n_gamma: spec.n_gamma,
        l1: l1 / f,
        ssim: ssim / f,
        psnr: psnr / f,
        frames,
        per_video,
        config: cfg.clone(),
    };
    Ok((report, decisions))
}

/// Run the acquisition loop on every video and score the reconstructions.
pub fn evaluate(
    models: Models,
    dataset: &VideoDataset,
    spec: &PolarGridSpec,
    cfg: &EvalConfig,
) -> Result<(MetricReport, DecisionLog)> {
    run_all(models, dataset, spec, cfg, None)
}

/// Re-run evaluation with masks taken from `log` instead of the policy.
pub fn replay(
    models: Models,
    dataset: &VideoDataset,
    spec: &PolarGridSpec,
    cfg: &EvalConfig,
    log: &DecisionLog,
) -> Result<(MetricReport, DecisionLog)> {
    if log.n_gamma != spec.n_gamma {
        return Err(Error::Config("decision log was recorded on a different grid".into()));
    }
    run_all(models, dataset, spec, cfg, Some(log))
}

/// Reconstructions and masks for one video, for image dumps.
pub fn simulate_video(
    models: Models,
    video: &FrameSequence,
    spec: &PolarGridSpec,
    cfg: &EvalConfig,
) -> Result<Vec<(ScanLineMask, Grid, FrameMetrics)>> {
    models.check(spec)?;
    let noise = NoiseModel::new(cfg.noise_std)?;
    let scorer = FrameScorer::new(spec, cfg.metrics)?;
    let n_gamma = spec.n_gamma;
    let [mut noise_rng, mut policy_rng, mut recon_rng] = video_rngs(cfg.seed, 0);
    let n_t = cfg.max_frames.map_or(video.len(), |m| m.min(video.len()));
    let mut mask = initial_mask(&cfg.policy, n_gamma, &mut policy_rng)?;
    let mut out = Vec::with_capacity(n_t);
    for t in 0..n_t {
        let obs = apply_mask(&video.frames[t], &mask, noise, t, &mut noise_rng)?;
        let (filled, image) = zero_fill(&obs, n_gamma);
        let post = encode_one(models.inference, &filled, &image)?;
        let recon = reconstruct(&post, models.generative, cfg.reconstruction, &mut recon_rng)?.remove(0);
        let m = scorer.score(&recon, &video.frames[t])?;
        let next = if t + 1 < n_t {
            Some(next_masks(&cfg.policy, t + 1, &post, models.generative, noise, &mut policy_rng)?.remove(0))
        } else {
            None
        };
        out.push((mask.clone(), recon, m));
        if let Some(n) = next {
            mask = n;
        }
    }
    Ok(out)
}

/// Mean reconstruction L1 of decoding encoder outputs and decoding prior draws,
/// both on fully observed frames. Used to sanity-check a trained pair.
pub fn full_observation_l1(
    models: Models,
    dataset: &VideoDataset,
    spec: &PolarGridSpec,
    seed: u64,
) -> Result<(f64, f64)> {
    models.check(spec)?;
    let scorer = FrameScorer::new(spec, MetricSettings { domain: crate::harness::metrics::MetricDomain::Polar, ..Default::default() })?;
    let full = ScanLineMask::full(spec.n_gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut enc, mut prior, mut n) = (0.0, 0.0, 0usize);
    for frame in dataset.frames() {
        let obs = apply_mask(frame, &full, NoiseModel::default(), 0, &mut rng)?;
        let (filled, image) = zero_fill(&obs, spec.n_gamma);
        let post = encode_one(models.inference, &filled, &image)?;
        let r = reconstruct(&post, models.generative, Reconstruction::PosteriorMean, &mut rng)?.remove(0);
        enc += scorer.score(&r, frame)?.l1;
        let z = draw_eps(&mut rng, 1, models.generative.cfg.latent_dim, models.generative.dtype(), &models.generative.device)?;
        let p = tensor_to_grids(&models.generative.decode_batch(&z, false)?)?.remove(0);
        prior += scorer.score(&p, frame)?.l1;
        n += 1;
    }
    Ok((enc / n as f64, prior / n as f64))
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use activescan::harness::benchmark::benchmark_latency;
use activescan::harness::config::ExperimentConfig;
use activescan::harness::dataset::Split;
use activescan::harness::evaluate::{evaluate, replay, simulate_video, DecisionLog, Models};
use activescan::harness::logs::{table_text, write_curve_tsv};
use activescan::model::checkpoint::{load_generative, load_inference, save_generative, save_inference};
use activescan::model::{GenerativeModel, InferenceModel};
use activescan::policy::PolicyKind;
use activescan::polar_grid::{polar_to_cartesian, Grid};
use activescan::training::{pretrain_generative, train_inference};
use activescan::{Error, Result};

#[derive(Parser)]
#[command(name = "activescan", version, about = "Adaptive scan-line subsampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set policy.lines=9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit decoder and encoder on fully sampled training frames.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder along acquisition trajectories with the decoder frozen.
    TrainInference {
        #[command(flatten)]
        common: Common,
        /// Generative checkpoint (default: <output_dir>/generative.safetensors).
        #[arg(long)]
        generative: Option<PathBuf>,
        /// Encoder to start from (default: <output_dir>/encoder_pretrain.safetensors).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score reconstructions for the configured policy, or the whole policy x lines table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generative: Option<PathBuf>,
        /// Encoder checkpoint (default: <output_dir>/inference_<policy>.safetensors).
        #[arg(long)]
        inference: Option<PathBuf>,
        /// Reuse masks from a decision log instead of running the policy.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Sweep eval.policies x eval.lines and write table.tsv.
        #[arg(long)]
        table: bool,
    },
    /// Time one acquisition step for each information-gain policy.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generative: Option<PathBuf>,
        #[arg(long)]
        inference: Option<PathBuf>,
    },
    /// Roll out one test video and dump per-frame PNGs.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generative: Option<PathBuf>,
        #[arg(long)]
        inference: Option<PathBuf>,
        /// Index of the video in the evaluation split.
        #[arg(long, default_value_t = 0)]
        video: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(common.config.as_deref(), &common.overrides)?;
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, cfg: &ExperimentConfig, name: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| cfg.output_dir.join(name))
}

fn inference_name(kind: PolicyKind) -> String {
    format!("inference_{kind}.safetensors")
}

fn load_pair(
    cfg: &ExperimentConfig,
    generative: &Option<PathBuf>,
    inference: &Option<PathBuf>,
    kind: PolicyKind,
) -> Result<(GenerativeModel, InferenceModel)> {
    let (g, gm) = load_generative(&or_default(generative, cfg, "generative.safetensors"))?;
    let (i, im) = load_inference(&or_default(inference, cfg, &inference_name(kind)))?;
    if gm.spec_hash != im.spec_hash {
        return Err(Error::Config("decoder and encoder checkpoints were built for different grids or models".into()));
    }
    if gm.grid != cfg.grid {
        return Err(Error::Config("checkpoint grid differs from the configured grid".into()));
    }
    if let Some(p) = &im.policy {
        if p != kind.as_str() && kind != PolicyKind::Full {
            return Err(Error::Config(format!("encoder was trained with the {p} policy, not {kind}")));
        }
    }
    Ok((g, i))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(fs::write(path, text + "\n")?)
}

fn save_png(img: &Grid, path: &Path) -> Result<()> {
    let (h, w) = img.shape();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img[(y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
            let train = cfg.dataset(Split::Train)?;
            let out = pretrain_generative(&train, &cfg.model_config()?, &cfg.train, cfg.noise())?;
            save_generative(&out.generative, &cfg.grid, &cfg.output_dir.join("generative.safetensors"))?;
            save_inference(&out.encoder, &cfg.grid, None, &cfg.output_dir.join("encoder_pretrain.safetensors"))?;
            write_curve_tsv(&out.curve, &cfg.output_dir.join("pretrain_curve.tsv"))?;
            println!("pretrained {} steps, final loss {:.4}", out.curve.len(), out.curve.last().map_or(f64::NAN, |r| r.loss.total));
        }
        Command::TrainInference { common, generative, init } => {
            let cfg = load_config(&common)?;
            let (g, _) = load_generative(&or_default(&generative, &cfg, "generative.safetensors"))?;
            let (i, _) = load_inference(&or_default(&init, &cfg, "encoder_pretrain.safetensors"))?;
            let train = cfg.dataset(Split::Train)?;
            let out = train_inference(&g, &i, &train, &cfg.policy, &cfg.train, cfg.noise())?;
            let kind = cfg.policy.kind;
            save_inference(&out.encoder, &cfg.grid, Some(kind.as_str()), &cfg.output_dir.join(inference_name(kind)))?;
            write_curve_tsv(&out.curve, &cfg.output_dir.join(format!("inference_{kind}_curve.tsv")))?;
            println!("trained {kind} encoder for {} steps", out.curve.len());
        }
        Command::Evaluate { common, generative, inference, replay: replay_log, table } => {
            let cfg = load_config(&common)?;
            let data = cfg.dataset(cfg.eval.split)?;
            if table {
                let mut reports = Vec::new();
                for &kind in &cfg.eval.policies {
                    let (g, i) = load_pair(&cfg, &generative, &None, kind)?;
                    for &l in &cfg.eval.lines {
                        let ec = cfg.eval_config(kind, l);
                        let (report, log) = evaluate(Models { generative: &g, inference: &i }, &data, &cfg.grid, &ec)?;
                        log.write(&cfg.output_dir.join(format!("decisions_{kind}_{l}.tsv")))?;
                        reports.push(report);
                    }
                }
                let text = table_text(&reports);
                fs::write(cfg.output_dir.join("table.tsv"), &text)?;
                write_json(&reports, &cfg.output_dir.join("table.json"))?;
                print!("{text}");
            } else {
                let kind = cfg.policy.kind;
                let (g, i) = load_pair(&cfg, &generative, &inference, kind)?;
                let ec = cfg.eval_config(kind, cfg.policy.lines);
                let models = Models { generative: &g, inference: &i };
                let (report, log) = match &replay_log {
                    Some(p) => replay(models, &data, &cfg.grid, &ec, &DecisionLog::read(p)?)?,
                    None => evaluate(models, &data, &cfg.grid, &ec)?,
                };
                let stem = if replay_log.is_some() { "replay" } else { "eval" };
                log.write(&cfg.output_dir.join(format!("{stem}_{kind}_decisions.tsv")))?;
                write_json(&report, &cfg.output_dir.join(format!("{stem}_{kind}_report.json")))?;
                print!("{}", table_text(std::slice::from_ref(&report)));
            }
        }
        Command::Benchmark { common, generative, inference } => {
            let cfg = load_config(&common)?;
            let data = cfg.dataset(cfg.eval.split)?;
            let frame = data
                .videos
                .first()
                .and_then(|v| v.frames.first())
                .ok_or_else(|| Error::Config("evaluation split is empty".into()))?;
            let (g, i) = load_pair(&cfg, &generative, &inference, cfg.policy.kind)?;
            let mut reports = Vec::new();
            for kind in [PolicyKind::Trace, PolicyKind::Covariance] {
                let policy = activescan::policy::PolicyConfig { kind, ..cfg.policy.clone() };
                let r = benchmark_latency(
                    Models { generative: &g, inference: &i },
                    &policy,
                    frame,
                    cfg.noise(),
                    cfg.eval.bench_trials,
                    cfg.eval.bench_warmup,
                    cfg.seed,
                )?;
                println!("{kind}\tmedian {:.4} s\tp95 {:.4} s", r.median_s, r.p95_s);
                reports.push(r);
            }
            write_json(&reports, &cfg.output_dir.join("latency.json"))?;
        }
        Command::Simulate { common, generative, inference, video } => {
            let cfg = load_config(&common)?;
            let data = cfg.dataset(cfg.eval.split)?;
            let seq = data
                .videos
                .get(video)
                .ok_or_else(|| Error::Config(format!("video index {video} out of range ({} videos)", data.len())))?;
            let kind = cfg.policy.kind;
            let (g, i) = load_pair(&cfg, &generative, &inference, kind)?;
            let ec = cfg.eval_config(kind, cfg.policy.lines);
            let frames = simulate_video(Models { generative: &g, inference: &i }, seq, &cfg.grid, &ec)?;
            let dir = cfg.output_dir.join(format!("simulate_{}_{kind}", seq.id));
            fs::create_dir_all(&dir)?;
            for (t, (mask, recon, m)) in frames.iter().enumerate() {
                let mut observed = Grid::zeros(cfg.grid.n_r, cfg.grid.n_gamma);
                for &j in mask.lines() {
                    observed.set_column(j, &seq.frames[t].column(j));
                }
                save_png(&polar_to_cartesian(&seq.frames[t], &cfg.grid)?, &dir.join(format!("{t:03}_truth.png")))?;
                save_png(&polar_to_cartesian(&observed, &cfg.grid)?, &dir.join(format!("{t:03}_observed.png")))?;
                save_png(&polar_to_cartesian(recon, &cfg.grid)?, &dir.join(format!("{t:03}_recon.png")))?;
                println!("{t}\tl1 {:.4}\tssim {:.4}\tlines {}", m.l1, m.ssim, mask);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

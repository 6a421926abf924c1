//! Acceptance checks. Runs as a plain binary so every line is printed:
//! `cargo test -p activescan --test acceptance`.

use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use activescan::harness::benchmark::{benchmark_latency, median};
use activescan::harness::config::ExperimentConfig;
use activescan::harness::dataset::Split;
use activescan::harness::evaluate::{evaluate, replay, Models};
use activescan::masks::{NoiseModel, ScanLineMask};
use activescan::model::{
    flow_forward, FlowLayer, FlowStack, GenerativeModel, InferenceModel, LatentState, ModelConfig, PosteriorParams,
    PosteriorTensors, Precision,
};
use activescan::policy::{
    covariance_policy, empirical_observation_covariance, line_variance_scores, max_lines_with_exclusion,
    trace_policy, trace_policy_with, PolicyConfig, PolicyKind, PosteriorEnsemble, TraceSolver,
};
use activescan::polar_grid::Grid;
use activescan::training::{
    batch_free_energy, pretrain_generative, train_inference, LinearDecoder, LossSettings, ObservationBatch, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_ensemble(rng: &mut ChaCha8Rng, n_s: usize, n_r: usize, n_gamma: usize) -> PosteriorEnsemble {
    PosteriorEnsemble::new((0..n_s).map(|_| DMatrix::from_fn(n_r, n_gamma, |_, _| rng.random_range(0.0..1.0))).collect())
        .unwrap()
}

// Oracle: Q from Householder QR, independent of the library's Gram-Schmidt.
fn random_layer(rng: &mut ChaCha8Rng, d: usize, m: usize) -> FlowLayer {
    let a = DMatrix::from_fn(d, m, |_, _| gaussian(rng));
    let q = a.qr().q().columns(0, m).into_owned();
    let mut r = DMatrix::zeros(m, m);
    let mut rt = DMatrix::zeros(m, m);
    for i in 0..m {
        r[(i, i)] = rng.random_range(-0.95..0.95);
        rt[(i, i)] = rng.random_range(-0.95..0.95);
        for j in i + 1..m {
            r[(i, j)] = rng.random_range(-1.0..1.0);
            rt[(i, j)] = rng.random_range(-1.0..1.0);
        }
    }
    let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    FlowLayer { q, r, r_tilde: rt, b }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for d in [2usize, 4, 8] {
        for m in [1usize, 2] {
            for _ in 0..1000 {
                let depth = rng.random_range(1..=3);
                let stack = FlowStack::new((0..depth).map(|_| random_layer(&mut rng, d, m)).collect());
                stack.validate().unwrap();
                let z = DVector::from_fn(d, |_, _| 1.5 * gaussian(&mut rng));
                let (_, ld) = flow_forward(&LatentState::new(z.clone()), &stack).unwrap();
                let f = |x: &DVector<f64>| flow_forward(&LatentState::new(x.clone()), &stack).unwrap().0.z;
                let h = 1e-5;
                let mut jac = DMatrix::zeros(d, d);
                for c in 0..d {
                    let (mut zp, mut zm) = (z.clone(), z.clone());
                    zp[c] += h;
                    zm[c] -= h;
                    jac.set_column(c, &((f(&zp) - f(&zm)) / (2.0 * h)));
                }
                let fd = jac.determinant().abs().ln();
                let rel = (ld - fd).abs() / fd.abs().max(1e-12);
                worst = worst.max(rel);
                trials += 1;
            }
        }
    }
    outcome(worst < 1e-4, format!("{trials} trials, max relative error {worst:.2e}"))
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in start..n {
            cur.push(j);
            rec(j + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

// Oracle: dense covariance of the stacked selected columns, log-det by Cholesky.
fn brute_logdet(ens: &PosteriorEnsemble, lines: &[usize], sigma2: f64) -> f64 {
    let n_r = ens.n_r();
    let ys: Vec<DVector<f64>> = ens
        .samples()
        .iter()
        .map(|s| DVector::from_iterator(n_r * lines.len(), lines.iter().flat_map(|&j| s.column(j).iter().copied().collect::<Vec<_>>())))
        .collect();
    let mean = ys.iter().fold(DVector::zeros(ys[0].len()), |a, y| a + y) / ys.len() as f64;
    let mut cov = DMatrix::identity(mean.len(), mean.len()) * sigma2;
    for y in &ys {
        let d = y - &mean;
        cov += &d * d.transpose() / ys.len() as f64;
    }
    let l = cov.cholesky().expect("positive definite").l();
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn brute_line_scores(ens: &PosteriorEnsemble) -> Vec<f64> {
    let n = ens.n_s() as f64;
    (0..ens.n_gamma())
        .map(|j| {
            (0..ens.n_r())
                .map(|i| {
                    let vals: Vec<f64> = ens.samples().iter().map(|s| s[(i, j)]).collect();
                    let m = vals.iter().sum::<f64>() / n;
                    vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
                })
                .sum()
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = NoiseModel::new(0.02).unwrap();
    let cands: Vec<ScanLineMask> = subsets(8, 2).into_iter().map(|s| ScanLineMask::new(s, 8).unwrap()).collect();
    assert_eq!(cands.len(), 28);
    let mut cov_ok = 0;
    for _ in 0..100 {
        let ens = random_ensemble(&mut rng, 3, 4, 8);
        let got = covariance_policy(&ens, &cands, noise, 0.0).unwrap();
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in cands.iter().enumerate() {
            let s = brute_logdet(&ens, c.lines(), noise.variance());
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        if got.mask == cands[best.unwrap().0] {
            cov_ok += 1;
        }
    }
    let feasible: Vec<Vec<usize>> = subsets(12, 3).into_iter().filter(|s| s.windows(2).all(|w| w[1] - w[0] > 1)).collect();
    let mut trace_ok = 0;
    for _ in 0..100 {
        let ens = random_ensemble(&mut rng, 3, 4, 12);
        let scores = brute_line_scores(&ens);
        let best = feasible
            .iter()
            .max_by(|a, b| {
                let sa: f64 = a.iter().map(|&j| scores[j]).sum();
                let sb: f64 = b.iter().map(|&j| scores[j]).sum();
                sa.total_cmp(&sb)
            })
            .unwrap();
        let got = trace_policy(&line_variance_scores(&ens), 3, 1).unwrap();
        if got.mask.lines() == best.as_slice() {
            trace_ok += 1;
        }
    }
    outcome(cov_ok == 100 && trace_ok == 100, format!("covariance {cov_ok}/100, trace {trace_ok}/100"))
}

fn criterion_3() -> Outcome {
    let mut scores = vec![0.0; 16];
    for (rank, &j) in [5usize, 4, 6, 12, 11, 13].iter().enumerate() {
        scores[j] = 100.0 / 2f64.powi(rank as i32);
    }
    let exact = trace_policy(&scores, 2, 1).unwrap();
    let greedy = trace_policy_with(&scores, 2, 1, TraceSolver::Greedy).unwrap();
    outcome(
        exact.mask.lines() == [5, 12],
        format!("selected {{{}}}, greedy order gives {{{}}}", exact.mask, greedy.mask),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (n_s, n_r, n_gamma) = (rng.random_range(1..6), rng.random_range(1..8), rng.random_range(2..16));
        let ens = random_ensemble(&mut rng, n_s, n_r, n_gamma);
        let l = rng.random_range(1..=n_gamma);
        let mask = ScanLineMask::new(rand::seq::index::sample(&mut rng, n_gamma, l).into_vec(), n_gamma).unwrap();
        let noise = NoiseModel::new(rng.random_range(0.0..0.3)).unwrap();
        let cov = empirical_observation_covariance(&ens, &mask, noise).unwrap();
        let scores = line_variance_scores(&ens);
        let expect: f64 = mask.lines().iter().map(|&j| scores[j]).sum::<f64>() + (n_r * l) as f64 * noise.variance();
        worst = worst.max((cov.trace() - expect).abs());
    }
    outcome(worst <= 1e-9, format!("1000 ensembles, max |trace - sum| {worst:.2e}"))
}

fn criterion_5() -> Outcome {
    let dev = Device::Cpu;
    let (w, c, sigma, x) = (0.8f64, 0.3f64, 0.5f64, 1.1f64);
    let (m, s) = (0.4f64, 0.6f64);
    let decoder = LinearDecoder::new(
        Tensor::from_vec(vec![w], (1, 1), &dev).unwrap(),
        Tensor::from_vec(vec![c], 1, &dev).unwrap(),
        1,
        1,
    )
    .unwrap();
    let post = PosteriorTensors::from_params(
        &PosteriorParams { mu: DVector::from_element(1, m), sigma: DVector::from_element(1, s), flow: FlowStack::default() },
        DType::F64,
        &dev,
    )
    .unwrap();
    let obs = Grid::from_element(1, 1, x);
    let one = Grid::from_element(1, 1, 1.0);
    let var = sigma * sigma;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let expected_ll = -0.5 * (ln2pi + var.ln()) - ((x - c - w * m).powi(2) + w * w * s * s) / (2.0 * var);
    let kl = 0.5 * (s * s + m * m - 1.0) - s.ln();
    let elbo = expected_ll - kl;
    let ev_var = w * w + var;
    let log_evidence = -0.5 * (ln2pi + ev_var.ln()) - (x - c).powi(2) / (2.0 * ev_var);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Batch-means estimate: 100 chunks of 1000 draws.
    let mut run = |k: usize, rows: usize, chunks: usize| -> (f64, f64) {
        let settings = LossSettings { beta: 1.0, samples: k, likelihood_std: sigma, depth_weights: None };
        let batch = ObservationBatch::from_grids(&vec![&obs; rows], &vec![&one; rows], DType::F64, &dev).unwrap();
        let p = post.repeat(rows).unwrap();
        let means: Vec<f64> = (0..chunks)
            .map(|_| {
                let eps: Vec<f64> = (0..rows * k).map(|_| gaussian(&mut rng)).collect();
                let eps = Tensor::from_vec(eps, (rows * k, 1), &dev).unwrap();
                -batch_free_energy(&p, &decoder, &batch, &settings, &eps, true).unwrap().1.total
            })
            .collect();
        let mean = means.iter().sum::<f64>() / chunks as f64;
        let sd = (means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (chunks - 1) as f64).sqrt();
        (mean, sd / (chunks as f64).sqrt())
    };
    let (mc, se) = run(1, 1000, 100);
    let (iwae, iwae_se) = run(16, 100, 100);
    let elbo_ok = (mc - elbo).abs() <= 3.0 * se;
    let order_ok = elbo < iwae && iwae < log_evidence;
    outcome(
        elbo_ok && order_ok,
        format!(
            "MC ELBO {mc:.5} vs closed form {elbo:.5} ({:.2} SE); IWAE-16 {iwae:.5} (SE {iwae_se:.1e}) in [{elbo:.5}, {log_evidence:.5}]",
            (mc - elbo).abs() / se
        ),
    )
}

fn criterion_6() -> Outcome {
    let cfg = ModelConfig {
        preset: "tiny".into(),
        n_r: 8,
        n_gamma: 8,
        latent_dim: 8,
        enc_layers: 2,
        enc_channels: 4,
        dec_blocks: 1,
        dec_channels: 4,
        flow_layers: 2,
        flow_vectors: 2,
        precision: Precision::F64,
    };
    let g = GenerativeModel::new(&cfg, 6).unwrap();
    let enc = InferenceModel::new(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frames: Vec<Grid> =
        (0..2).map(|k| Grid::from_fn(8, 8, |i, j| 0.5 + 0.3 * ((i + 2 * j + k) as f64 * 0.4).sin())).collect();
    let masks = [ScanLineMask::new(vec![0, 3, 6], 8).unwrap(), ScanLineMask::new(vec![1, 2, 5, 7], 8).unwrap()];
    let batch = ObservationBatch::observe(
        &frames.iter().collect::<Vec<_>>(),
        &masks.iter().collect::<Vec<_>>(),
        NoiseModel::default(),
        &mut rng,
        DType::F64,
        &Device::Cpu,
    )
    .unwrap();
    let train = TrainConfig { iwae_samples: 2, likelihood_std: Some(0.1), ..Default::default() };
    let settings = train.loss_settings(NoiseModel::default(), 8).unwrap();
    let eps: Vec<f64> = (0..2 * 2 * 8).map(|_| gaussian(&mut rng)).collect();
    let eps = Tensor::from_vec(eps, (4, 8), &Device::Cpu).unwrap();
    let loss = || -> Tensor {
        let post = enc.encode_batch(&batch.input).unwrap();
        batch_free_energy(&post, &g, &batch, &settings, &eps, true).unwrap().0
    };
    let scalar = |t: &Tensor| t.to_scalar::<f64>().unwrap();
    let mut vars = g.named_vars();
    vars.extend(enc.named_vars());
    vars.retain(|(n, _)| !n.contains("running_"));
    let grads = loss().backward().unwrap();
    let (mut total, mut good) = (0usize, 0usize);
    let mut worst_bad = Vec::new();
    for (name, var) in &vars {
        let shape = var.shape().clone();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(t) => t.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        for k in 0..base.len() {
            let h = 1e-6 * base[k].abs().max(1.0);
            let mut v = base.clone();
            v[k] = base[k] + h;
            var.set(&Tensor::from_vec(v.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let up = scalar(&loss());
            v[k] = base[k] - h;
            var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let down = scalar(&loss());
            let fd = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            total += 1;
            if rel < 1e-3 {
                good += 1;
            } else if worst_bad.len() < 3 {
                worst_bad.push(format!("{name}[{k}] {a:.3e} vs {fd:.3e}"));
            }
        }
        var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
    }
    let frac = good as f64 / total as f64;
    let mut detail = format!("{good}/{total} parameters ({:.1}%) within 1e-3", 100.0 * frac);
    if !worst_bad.is_empty() {
        detail.push_str(&format!("; e.g. {}", worst_bad.join(", ")));
    }
    outcome(frac >= 0.95, detail)
}

/// Desk-scale experiment shared by the ordering and replay checks.
const EXPERIMENT: &str = r#"
seed = 0
noise_std = 0.02

[grid]
n_r = 16
n_gamma = 32
cart_h = 32
cart_w = 32
r_max = 30.0

[model]
preset = "desk"

[data]
train_videos = 400
val_videos = 5
test_videos = 10
frames_per_video = 20
speckle = 0.05

[train]
pretrain_steps = 3000
batch_size = 8
learning_rate = 2e-3
iwae_samples = 1
inference_epochs = 1

[policy]
kind = "trace"
lines = 3
"#;

const INFERENCE_IWAE: usize = 2;

struct Trained {
    cfg: ExperimentConfig,
    generative: GenerativeModel,
    pretrain_encoder: InferenceModel,
    encoders: Vec<(PolicyKind, InferenceModel)>,
}

fn train_experiment() -> Trained {
    let mut cfg = ExperimentConfig::from_toml_str(EXPERIMENT, &[]).unwrap();
    let train = cfg.dataset(Split::Train).unwrap();
    // Neighbour exclusion spans the lines that still correlate strongly on training frames.
    cfg.policy.exclusion_radius = train.decorrelation_radius(0.5).unwrap();
    eprintln!("  exclusion radius {} from training-frame lateral correlation", cfg.policy.exclusion_radius);
    let start = Instant::now();
    let pre = pretrain_generative(&train, &cfg.model_config().unwrap(), &cfg.train, cfg.noise()).unwrap();
    eprintln!(
        "  pretrained {} steps in {:.0} s, final loss {:.1}",
        pre.curve.len(),
        start.elapsed().as_secs_f64(),
        pre.curve.last().unwrap().loss.total
    );
    let inf_cfg = TrainConfig { iwae_samples: INFERENCE_IWAE, ..cfg.train.clone() };
    let encoders = [PolicyKind::Uniform, PolicyKind::Equispaced, PolicyKind::Trace]
        .into_iter()
        .map(|kind| {
            let start = Instant::now();
            let policy = PolicyConfig { kind, ..cfg.policy.clone() };
            let out = train_inference(&pre.generative, &pre.encoder, &train, &policy, &inf_cfg, cfg.noise()).unwrap();
            eprintln!("  {kind} encoder: {} steps in {:.0} s", out.curve.len(), start.elapsed().as_secs_f64());
            (kind, out.encoder)
        })
        .collect();
    Trained { cfg, generative: pre.generative, pretrain_encoder: pre.encoder, encoders }
}

fn criterion_7(t: &Trained) -> Outcome {
    let test = t.cfg.dataset(Split::Test).unwrap();
    let l = t.cfg.policy.lines;
    let mut l1 = std::collections::HashMap::new();
    for (kind, enc) in &t.encoders {
        let ec = t.cfg.eval_config(*kind, l);
        let (r, _) = evaluate(Models { generative: &t.generative, inference: enc }, &test, &t.cfg.grid, &ec).unwrap();
        l1.insert(*kind, r.l1);
    }
    let full_cfg = t.cfg.eval_config(PolicyKind::Full, t.cfg.grid.n_gamma);
    let (full, _) =
        evaluate(Models { generative: &t.generative, inference: &t.pretrain_encoder }, &test, &t.cfg.grid, &full_cfg)
            .unwrap();
    let (tr, eq, un) = (l1[&PolicyKind::Trace], l1[&PolicyKind::Equispaced], l1[&PolicyKind::Uniform]);
    let gain = (un - tr) / un;
    outcome(
        tr <= eq && eq < un && gain >= 0.05,
        format!(
            "{:.1}% observed: L1 trace {tr:.4}, equispaced {eq:.4}, uniform {un:.4}; trace vs uniform {:+.1}%; full observation {:.4}",
            100.0 * l as f64 / t.cfg.grid.n_gamma as f64,
            100.0 * gain,
            full.l1
        ),
    )
}

fn criterion_8() -> Outcome {
    let cfg = ModelConfig::desk(64, 64);
    let g = GenerativeModel::new(&cfg, 0).unwrap();
    let enc = InferenceModel::new(&cfg, 1).unwrap();
    let frame = Grid::from_fn(64, 64, |i, j| 0.5 + 0.4 * ((i * j) as f64 * 0.01).sin());
    let models = Models { generative: &g, inference: &enc };
    let policies = [PolicyKind::Trace, PolicyKind::Covariance]
        .map(|kind| PolicyConfig { n_samples: 3, candidates: 10_000, ..PolicyConfig::new(kind, 6) });
    for p in &policies {
        benchmark_latency(models, p, &frame, NoiseModel::default(), 3, 0, 8).unwrap();
    }
    // Alternate the two policies so background load hits both alike.
    let mut times = [Vec::new(), Vec::new()];
    for round in 0..30 {
        for (k, p) in policies.iter().enumerate() {
            let r = benchmark_latency(models, p, &frame, NoiseModel::default(), 1, 0, round).unwrap();
            times[k].push(r.median_s);
        }
    }
    let med = times.map(|t| median(&t));
    outcome(med[0] < med[1], format!("median step trace {:.4} s, covariance {:.4} s over 30 rounds", med[0], med[1]))
}

fn criterion_9(t: &Trained) -> Outcome {
    let test = t.cfg.dataset(Split::Test).unwrap();
    let enc = &t.encoders.iter().find(|(k, _)| *k == PolicyKind::Trace).unwrap().1;
    let models = Models { generative: &t.generative, inference: enc };
    let mut same = true;
    let mut notes = Vec::new();
    for kind in [PolicyKind::Trace, PolicyKind::Covariance, PolicyKind::Uniform] {
        let ec = t.cfg.eval_config(kind, t.cfg.policy.lines);
        let (r1, l1) = evaluate(models, &test, &t.cfg.grid, &ec).unwrap();
        let (r2, l2) = evaluate(models, &test, &t.cfg.grid, &ec).unwrap();
        let (r3, l3) = replay(models, &test, &t.cfg.grid, &ec, &l1).unwrap();
        let json = |r| serde_json::to_string(r).unwrap();
        let ok = json(&r1) == json(&r2) && l1.to_text() == l2.to_text() && json(&r1) == json(&r3) && l1.to_text() == l3.to_text();
        same &= ok;
        notes.push(format!("{kind} {}", if ok { "identical" } else { "DIFFERS" }));
    }
    outcome(same, format!("evaluate twice and replay: {}", notes.join(", ")))
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let noise = NoiseModel::default();
    let kinds = [
        PolicyKind::Covariance,
        PolicyKind::Trace,
        PolicyKind::Uniform,
        PolicyKind::VariableDensity,
        PolicyKind::Equispaced,
    ];
    let (mut invalid, mut errors) = (0usize, 0usize);
    let n = 100_000;
    for t in 0..n {
        let kind = kinds[rng.random_range(0..kinds.len())];
        let n_gamma = rng.random_range(1..=64);
        let radius = rng.random_range(0..=3);
        let max_l = if kind == PolicyKind::Trace { max_lines_with_exclusion(n_gamma, radius) } else { n_gamma };
        let l = rng.random_range(1..=max_l);
        let policy = PolicyConfig {
            exclusion_radius: radius,
            candidates: rng.random_range(1..=20),
            n_samples: rng.random_range(1..=4),
            decay: rng.random_range(0.5..10.0),
            ..PolicyConfig::new(kind, l)
        };
        let res = if kind.is_active() {
            let n_r = rng.random_range(1..=4);
            let ens = random_ensemble(&mut rng, policy.n_samples, n_r, n_gamma);
            policy.active_decision(&ens, noise, &mut rng)
        } else {
            policy.static_decision(t, n_gamma, &mut rng)
        };
        let mask = match res {
            Ok(d) => d.mask,
            Err(_) => {
                errors += 1;
                continue;
            }
        };
        let lines = mask.lines();
        let ok = lines.len() == l
            && lines.windows(2).all(|w| w[0] < w[1])
            && lines.iter().all(|&j| j < n_gamma)
            && mask.n_gamma() == n_gamma
            && (kind != PolicyKind::Trace || lines.windows(2).all(|w| w[1] - w[0] > radius));
        if !ok {
            invalid += 1;
        }
    }
    outcome(invalid == 0 && errors == 0, format!("{n} invocations, {invalid} invalid masks, {errors} errors"))
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    // Positional numbers pick criteria, e.g. `-- 1 3`; default is all of them.
    let picked: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| picked.is_empty() || picked.contains(&n);
    let mut results: Vec<(usize, bool)> = Vec::new();
    let mut record = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!("criterion {n:>2} {:<4} {name}: {} [{secs:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o.pass));
    };
    record(1, "flow log-det vs finite differences", &mut criterion_1);
    record(2, "policy oracle equivalence", &mut criterion_2);
    record(3, "trace worked example", &mut criterion_3);
    record(4, "trace consistency", &mut criterion_4);
    record(5, "free energy on the linear-Gaussian toy", &mut criterion_5);
    record(6, "loss gradients vs finite differences", &mut criterion_6);
    record(8, "latency ordering", &mut criterion_8);
    record(10, "mask fuzzing", &mut criterion_10);
    if wanted(7) || wanted(9) {
        let trained = train_experiment();
        record(7, "end-to-end ordering", &mut || criterion_7(&trained));
        record(9, "replay determinism", &mut || criterion_9(&trained));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}

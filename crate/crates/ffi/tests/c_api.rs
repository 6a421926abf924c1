use std::ffi::{c_char, CStr, CString};
use std::ptr;

use activescan::model::checkpoint::{save_generative, save_inference};
use activescan::model::{GenerativeModel, InferenceModel, ModelConfig, Precision};
use activescan::polar_grid::{cartesian_to_polar, polar_to_cartesian, Grid, PolarGridSpec};
use activescan_ffi::*;

fn last_error() -> String {
    let n = as_last_error_length();
    let mut buf = vec![0 as c_char; n + 1];
    let full = unsafe { as_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(full, n);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn tiny_spec() -> PolarGridSpec {
    PolarGridSpec { n_r: 8, n_gamma: 12, r_max: 14.0, cart_h: 16, cart_w: 16, ..Default::default() }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        preset: "tiny".into(),
        n_r: 8,
        n_gamma: 12,
        latent_dim: 4,
        enc_layers: 1,
        enc_channels: 2,
        dec_blocks: 1,
        dec_channels: 2,
        flow_layers: 1,
        flow_vectors: 1,
        precision: Precision::F32,
    }
}

struct Files {
    _dir: tempfile::TempDir,
    generative: CString,
    inference: CString,
}

fn checkpoints(policy: Option<&str>) -> Files {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec();
    let g = GenerativeModel::new(&tiny_model(), 0).unwrap();
    let i = InferenceModel::new(&tiny_model(), 1).unwrap();
    let gp = dir.path().join("g.safetensors");
    let ip = dir.path().join("i.safetensors");
    save_generative(&g, &spec, &gp).unwrap();
    save_inference(&i, &spec, policy, &ip).unwrap();
    Files {
        generative: CString::new(gp.to_str().unwrap()).unwrap(),
        inference: CString::new(ip.to_str().unwrap()).unwrap(),
        _dir: dir,
    }
}

fn open(files: &Files, policy: &str, lines: usize, seed: u64) -> (AsStatus, *mut AsSession) {
    let name = CString::new(policy).unwrap();
    let mut s = ptr::null_mut();
    let st = unsafe {
        as_session_open(files.generative.as_ptr(), files.inference.as_ptr(), name.as_ptr(), lines, 0.02, seed, &mut s)
    };
    (st, s)
}

#[test]
fn trace_worked_example() {
    let mut scores = vec![0.0; 16];
    for (rank, &j) in [5usize, 4, 6, 12, 11, 13].iter().enumerate() {
        scores[j] = 100.0 / 2f64.powi(rank as i32);
    }
    let mut out = [usize::MAX; 2];
    let st = unsafe { as_trace_policy(scores.as_ptr(), 16, 2, 1, out.as_mut_ptr(), 2) };
    assert_eq!(st, AsStatus::AsOk);
    assert_eq!(out, [5, 12]);
}

#[test]
fn trace_reports_infeasible_and_small_buffers() {
    let scores = [1.0; 6];
    let mut out = [0usize; 8];
    let st = unsafe { as_trace_policy(scores.as_ptr(), 6, 4, 1, out.as_mut_ptr(), 8) };
    assert_eq!(st, AsStatus::AsRejectedInput);
    assert!(!last_error().is_empty());
    let st = unsafe { as_trace_policy(scores.as_ptr(), 6, 2, 1, out.as_mut_ptr(), 1) };
    assert_eq!(st, AsStatus::AsBufferTooSmall);
    let st = unsafe { as_trace_policy(ptr::null(), 6, 2, 1, out.as_mut_ptr(), 8) };
    assert_eq!(st, AsStatus::AsNullPointer);
    assert!(last_error().contains("scores"));
}

#[test]
fn grid_conversions_match_the_library() {
    let spec = tiny_spec();
    let mut g = ptr::null_mut();
    let st = unsafe {
        as_grid_new(spec.n_r, spec.n_gamma, spec.gamma_min, spec.gamma_max, spec.r_max, spec.cart_h, spec.cart_w, &mut g)
    };
    assert_eq!(st, AsStatus::AsOk);
    let (mut n_r, mut n_gamma, mut h, mut w) = (0, 0, 0, 0);
    assert_eq!(unsafe { as_grid_shape(g, &mut n_r, &mut n_gamma, &mut h, &mut w) }, AsStatus::AsOk);
    assert_eq!((n_r, n_gamma, h, w), (8, 12, 16, 16));

    let polar = Grid::from_fn(8, 12, |i, j| (i as f64 * 0.1 + j as f64 * 0.05).sin().abs());
    let row_major: Vec<f64> = (0..8).flat_map(|i| (0..12).map(move |j| (i, j))).map(|p| polar[p]).collect();
    let mut cart = vec![0.0; 256];
    assert_eq!(unsafe { as_polar_to_cartesian(g, row_major.as_ptr(), 96, cart.as_mut_ptr(), 256) }, AsStatus::AsOk);
    let want = polar_to_cartesian(&polar, &spec).unwrap();
    for r in 0..16 {
        for c in 0..16 {
            assert_eq!(cart[r * 16 + c], want[(r, c)]);
        }
    }
    let mut back = vec![0.0; 96];
    assert_eq!(unsafe { as_cartesian_to_polar(g, cart.as_ptr(), 256, back.as_mut_ptr(), 96) }, AsStatus::AsOk);
    let want_back = cartesian_to_polar(&want, &spec).unwrap();
    for i in 0..8 {
        for j in 0..12 {
            assert_eq!(back[i * 12 + j], want_back[(i, j)]);
        }
    }
    assert_eq!(unsafe { as_polar_to_cartesian(g, row_major.as_ptr(), 95, cart.as_mut_ptr(), 256) }, AsStatus::AsRejectedInput);
    unsafe { as_grid_free(g) };
}

#[test]
fn invalid_grid_is_rejected() {
    let mut g = ptr::null_mut();
    let st = unsafe { as_grid_new(0, 12, -0.5, 0.5, 10.0, 16, 16, &mut g) };
    assert_ne!(st, AsStatus::AsOk);
    assert!(g.is_null());
    assert_eq!(unsafe { as_grid_default(ptr::null_mut()) }, AsStatus::AsNullPointer);
}

#[test]
fn session_runs_an_acquisition() {
    let files = checkpoints(Some("trace"));
    let (st, s) = open(&files, "trace", 3, 7);
    assert_eq!(st, AsStatus::AsOk, "{}", last_error());
    let mut lines = 0;
    assert_eq!(unsafe { as_session_lines(s, &mut lines) }, AsStatus::AsOk);
    assert_eq!(lines, 3);
    let mut mask = [0usize; 12];
    let mut len = 0;
    assert_eq!(unsafe { as_session_reset(s, mask.as_mut_ptr(), 12, &mut len) }, AsStatus::AsOk);
    assert_eq!(len, 3);
    let mut recon = vec![f64::NAN; 96];
    for _ in 0..4 {
        let measured: Vec<f64> = (0..8 * len).map(|k| 0.3 + 0.01 * k as f64).collect();
        let mut next = [0usize; 12];
        let mut next_len = 0;
        let st = unsafe {
            as_session_step(
                s,
                mask.as_ptr(),
                len,
                measured.as_ptr(),
                measured.len(),
                recon.as_mut_ptr(),
                recon.len(),
                next.as_mut_ptr(),
                12,
                &mut next_len,
            )
        };
        assert_eq!(st, AsStatus::AsOk, "{}", last_error());
        assert!(recon.iter().all(|v| v.is_finite()));
        assert_eq!(next_len, 3);
        let chosen = &next[..next_len];
        assert!(chosen.windows(2).all(|w| w[1] >= w[0] + 2), "{chosen:?}");
        assert!(chosen.iter().all(|&j| j < 12));
        mask[..next_len].copy_from_slice(chosen);
        len = next_len;
    }
    let mut grid = ptr::null_mut();
    assert_eq!(unsafe { as_session_grid(s, &mut grid) }, AsStatus::AsOk);
    let mut n_gamma = 0;
    assert_eq!(unsafe { as_grid_shape(grid, ptr::null_mut(), &mut n_gamma, ptr::null_mut(), ptr::null_mut()) }, AsStatus::AsOk);
    assert_eq!(n_gamma, 12);
    unsafe {
        as_grid_free(grid);
        as_session_free(s);
    }
}

#[test]
fn same_seed_same_decisions() {
    let files = checkpoints(Some("covariance"));
    let run = |seed| {
        let (st, s) = open(&files, "covariance", 2, seed);
        assert_eq!(st, AsStatus::AsOk, "{}", last_error());
        let mut mask = [0usize; 12];
        let mut len = 0;
        unsafe { as_session_reset(s, mask.as_mut_ptr(), 12, &mut len) };
        let mut picks = Vec::new();
        let mut recon = vec![0.0; 96];
        for _ in 0..3 {
            let measured = vec![0.5; 8 * len];
            let mut next = [0usize; 12];
            let mut next_len = 0;
            let st = unsafe {
                as_session_step(s, mask.as_ptr(), len, measured.as_ptr(), measured.len(), recon.as_mut_ptr(), 96, next.as_mut_ptr(), 12, &mut next_len)
            };
            assert_eq!(st, AsStatus::AsOk);
            picks.push(next[..next_len].to_vec());
            mask[..next_len].copy_from_slice(&next[..next_len]);
            len = next_len;
        }
        unsafe { as_session_free(s) };
        picks
    };
    assert_eq!(run(3), run(3));
}

#[test]
fn session_rejects_bad_inputs() {
    let files = checkpoints(Some("trace"));
    let (st, s) = open(&files, "uniform", 3, 0);
    assert_eq!(st, AsStatus::AsConfig);
    assert!(s.is_null());
    assert!(last_error().contains("trace"));
    let (st, _) = open(&files, "nonsense", 3, 0);
    assert_eq!(st, AsStatus::AsConfig);

    let (st, s) = open(&files, "trace", 3, 0);
    assert_eq!(st, AsStatus::AsOk);
    let mut recon = vec![0.0; 96];
    let mut next = [0usize; 12];
    let mut next_len = 0;
    let unsorted = [4usize, 1, 8];
    let measured = vec![0.0; 24];
    let st = unsafe {
        as_session_step(s, unsorted.as_ptr(), 3, measured.as_ptr(), 24, recon.as_mut_ptr(), 96, next.as_mut_ptr(), 12, &mut next_len)
    };
    assert_eq!(st, AsStatus::AsRejectedInput);
    let sorted = [1usize, 4, 8];
    let st = unsafe {
        as_session_step(s, sorted.as_ptr(), 3, measured.as_ptr(), 24, recon.as_mut_ptr(), 50, next.as_mut_ptr(), 12, &mut next_len)
    };
    assert_eq!(st, AsStatus::AsBufferTooSmall);
    let bad = vec![f64::NAN; 24];
    let st = unsafe {
        as_session_step(s, sorted.as_ptr(), 3, bad.as_ptr(), 24, recon.as_mut_ptr(), 96, next.as_mut_ptr(), 12, &mut next_len)
    };
    assert_eq!(st, AsStatus::AsRejectedInput);
    let st = unsafe {
        as_session_step(ptr::null_mut(), sorted.as_ptr(), 3, measured.as_ptr(), 24, recon.as_mut_ptr(), 96, next.as_mut_ptr(), 12, &mut next_len)
    };
    assert_eq!(st, AsStatus::AsNullPointer);
    unsafe { as_session_free(s) };
}

#[test]
fn missing_checkpoint_is_io() {
    let g = CString::new("/nonexistent/g.safetensors").unwrap();
    let name = CString::new("trace").unwrap();
    let mut s = ptr::null_mut();
    let st = unsafe { as_session_open(g.as_ptr(), g.as_ptr(), name.as_ptr(), 3, 0.02, 0, &mut s) };
    assert_eq!(st, AsStatus::AsIo);
}

#[test]
fn status_names_and_message_truncation() {
    let name = unsafe { CStr::from_ptr(as_status_name(AsStatus::AsBufferTooSmall)) };
    assert_eq!(name.to_str().unwrap(), "buffer too small");
    let scores = [1.0; 4];
    unsafe { as_trace_policy(scores.as_ptr(), 4, 9, 0, ptr::null_mut(), 0) };
    let n = as_last_error_length();
    assert!(n > 4);
    let mut buf = [1 as c_char; 4];
    assert_eq!(unsafe { as_last_error_message(buf.as_mut_ptr(), 4) }, n);
    assert_eq!(buf[3], 0);
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/activescan.h")).unwrap();
    for f in ["as_trace_policy", "as_session_open", "as_session_step", "as_last_error_message", "AS_BUFFER_TOO_SMALL", "typedef struct AsSession AsSession"] {
        assert!(h.contains(f), "{f} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "activescan.h"
int main(void) {
    AsGrid *g = NULL;
    AsStatus s = as_grid_default(&g);
    size_t lines[2];
    double scores[4] = {1.0, 0.0, 0.0, 2.0};
    s = as_trace_policy(scores, 4, 2, 1, lines, 2);
    as_grid_free(g);
    return s == AS_OK ? 0 : 1;
}
"#,
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .status()
        .expect("a C compiler on PATH");
    assert!(status.success());
}

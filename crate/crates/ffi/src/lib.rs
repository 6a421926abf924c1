//! C ABI over the acquisition loop.
//!
//! Every function returns an [`AsStatus`]. On failure the message is kept in a
//! thread-local slot readable with [`as_last_error_message`]. Handles are opaque
//! and owned by the caller once created; free them with the matching `_free`.
//!
//! Images cross the boundary as row-major `f64` buffers: polar frames are
//! `n_r x n_gamma` (row = depth sample, column = scan line), Cartesian images
//! are `cart_h x cart_w`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use activescan::harness::evaluate::{reconstruct, Reconstruction};
use activescan::masks::{zero_fill, NoiseModel, Observation, ScanLineMask};
use activescan::model::checkpoint::{load_generative, load_inference};
use activescan::model::{encoder_input, GenerativeModel, InferenceModel};
use activescan::policy::{trace_policy, PolicyConfig, PolicyKind};
use activescan::polar_grid::{cartesian_to_polar, polar_to_cartesian, Grid, PolarGridSpec};
use activescan::training::{initial_mask, next_masks};
use activescan::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsStatus {
    AsOk = 0,
    AsRejectedInput = 1,
    AsModelState = 2,
    AsNumerical = 3,
    AsTraining = 4,
    AsConfig = 5,
    AsIo = 6,
    AsTensor = 7,
    AsNullPointer = 8,
    AsBufferTooSmall = 9,
    AsPanic = 10,
}

/// Polar grid geometry.
pub struct AsGrid {
    spec: PolarGridSpec,
}

/// Loaded decoder/encoder pair plus the policy state of one acquisition.
pub struct AsSession {
    generative: GenerativeModel,
    inference: InferenceModel,
    policy: PolicyConfig,
    noise: NoiseModel,
    rng: ChaCha8Rng,
    grid: PolarGridSpec,
    t: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

enum Fail {
    Core(Error),
    Null(&'static str),
    Buffer(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> AsStatus {
    match e {
        Error::RejectedInput(_) => AsStatus::AsRejectedInput,
        Error::ModelState(_) => AsStatus::AsModelState,
        Error::Numerical(_) => AsStatus::AsNumerical,
        Error::Training(_) => AsStatus::AsTraining,
        Error::Config(_) => AsStatus::AsConfig,
        Error::Io(_) => AsStatus::AsIo,
        Error::Tensor(_) => AsStatus::AsTensor,
    }
}

fn set_error(msg: String) {
    LAST_ERROR.with(|s| *s.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AsStatus::AsOk
        }
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("null pointer: {name}"));
            AsStatus::AsNullPointer
        }
        Ok(Err(Fail::Buffer(msg))) => {
            set_error(msg);
            AsStatus::AsBufferTooSmall
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AsStatus::AsPanic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn c_str<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Core(Error::RejectedInput(format!("{name} is not valid UTF-8"))))
}

fn need(have: usize, want: usize, what: &str) -> Result<(), Fail> {
    if have < want {
        return Err(Fail::Buffer(format!("{what} holds {have} values, {want} required")));
    }
    Ok(())
}

fn exact(have: usize, want: usize, what: &str) -> Result<(), Fail> {
    if have != want {
        return Err(Fail::Core(Error::RejectedInput(format!("{what} has {have} values, expected {want}"))));
    }
    Ok(())
}

fn write_grid(g: &Grid, out: &mut [f64]) {
    let w = g.ncols();
    for i in 0..g.nrows() {
        for j in 0..w {
            out[i * w + j] = g[(i, j)];
        }
    }
}

/// Static description of a status code. Never null.
#[no_mangle]
pub extern "C" fn as_status_name(status: AsStatus) -> *const c_char {
    let s: &'static CStr = match status {
        AsStatus::AsOk => c"ok",
        AsStatus::AsRejectedInput => c"rejected input",
        AsStatus::AsModelState => c"invalid model state",
        AsStatus::AsNumerical => c"numerical failure",
        AsStatus::AsTraining => c"training diverged",
        AsStatus::AsConfig => c"configuration error",
        AsStatus::AsIo => c"i/o error",
        AsStatus::AsTensor => c"tensor backend error",
        AsStatus::AsNullPointer => c"null pointer",
        AsStatus::AsBufferTooSmall => c"buffer too small",
        AsStatus::AsPanic => c"internal panic",
    };
    s.as_ptr()
}

/// Length in bytes of the last error message on this thread, without the NUL.
#[no_mangle]
pub extern "C" fn as_last_error_length() -> usize {
    LAST_ERROR.with(|s| s.borrow().len())
}

/// Copy the last error message into `buf` (truncated, always NUL-terminated
/// when `cap > 0`). Returns the full message length.
///
/// # Safety
/// `buf` must point to `cap` writable bytes or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn as_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|s| {
        let s = s.borrow();
        if !buf.is_null() && cap > 0 {
            let n = s.len().min(cap - 1);
            ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        s.len()
    })
}

/// Create a grid. Angles in radians, `r_max` and image sizes in Cartesian pixels.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn as_grid_new(
    n_r: usize,
    n_gamma: usize,
    gamma_min: f64,
    gamma_max: f64,
    r_max: f64,
    cart_h: usize,
    cart_w: usize,
    out: *mut *mut AsGrid,
) -> AsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let spec = PolarGridSpec { n_r, n_gamma, gamma_min, gamma_max, r_max, cart_h, cart_w };
        spec.validate()?;
        *out = Box::into_raw(Box::new(AsGrid { spec }));
        Ok(())
    })
}

/// Create the default 64 x 64 grid.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn as_grid_default(out: *mut *mut AsGrid) -> AsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = Box::into_raw(Box::new(AsGrid { spec: PolarGridSpec::default() }));
        Ok(())
    })
}

/// # Safety
/// `grid` must come from `as_grid_new`/`as_grid_default`/`as_session_grid` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn as_grid_free(grid: *mut AsGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Dimensions of a grid. Any output pointer may be null.
///
/// # Safety
/// `grid` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn as_grid_shape(
    grid: *const AsGrid,
    n_r: *mut usize,
    n_gamma: *mut usize,
    cart_h: *mut usize,
    cart_w: *mut usize,
) -> AsStatus {
    guard(|| {
        let g = &as_ref(grid, "grid")?.spec;
        for (p, v) in [(n_r, g.n_r), (n_gamma, g.n_gamma), (cart_h, g.cart_h), (cart_w, g.cart_w)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Scan-convert a polar frame onto the Cartesian raster.
///
/// # Safety
/// Buffers must hold the stated number of `f64`s.
#[no_mangle]
pub unsafe extern "C" fn as_polar_to_cartesian(
    grid: *const AsGrid,
    polar: *const f64,
    polar_len: usize,
    out: *mut f64,
    out_len: usize,
) -> AsStatus {
    guard(|| {
        let g = &as_ref(grid, "grid")?.spec;
        exact(polar_len, g.n_r * g.n_gamma, "polar")?;
        need(out_len, g.cart_h * g.cart_w, "out")?;
        let src = Grid::from_row_slice(g.n_r, g.n_gamma, slice(polar, polar_len, "polar")?);
        let img = polar_to_cartesian(&src, g)?;
        write_grid(&img, slice_mut(out, out_len, "out")?);
        Ok(())
    })
}

/// Resample a Cartesian image onto the polar grid.
///
/// # Safety
/// Buffers must hold the stated number of `f64`s.
#[no_mangle]
pub unsafe extern "C" fn as_cartesian_to_polar(
    grid: *const AsGrid,
    image: *const f64,
    image_len: usize,
    out: *mut f64,
    out_len: usize,
) -> AsStatus {
    guard(|| {
        let g = &as_ref(grid, "grid")?.spec;
        exact(image_len, g.cart_h * g.cart_w, "image")?;
        need(out_len, g.n_r * g.n_gamma, "out")?;
        let src = Grid::from_row_slice(g.cart_h, g.cart_w, slice(image, image_len, "image")?);
        let polar = cartesian_to_polar(&src, g)?;
        write_grid(&polar, slice_mut(out, out_len, "out")?);
        Ok(())
    })
}

/// Pick `lines` scan lines maximising the summed per-line `scores`, no two
/// selected lines closer than `exclusion_radius + 1`. Writes the sorted line
/// indices to `out_lines`.
///
/// # Safety
/// `scores` must hold `n_gamma` values and `out_lines` at least `out_cap`.
#[no_mangle]
pub unsafe extern "C" fn as_trace_policy(
    scores: *const f64,
    n_gamma: usize,
    lines: usize,
    exclusion_radius: usize,
    out_lines: *mut usize,
    out_cap: usize,
) -> AsStatus {
    guard(|| {
        let s = slice(scores, n_gamma, "scores")?;
        need(out_cap, lines, "out_lines")?;
        let d = trace_policy(s, lines, exclusion_radius)?;
        slice_mut(out_lines, out_cap, "out_lines")?[..d.mask.len()].copy_from_slice(d.mask.lines());
        Ok(())
    })
}

fn open_session(
    generative: &str,
    inference: &str,
    policy: &str,
    lines: usize,
    noise_std: f64,
    seed: u64,
) -> Result<AsSession, Fail> {
    let (g, gm) = load_generative(Path::new(generative))?;
    let (i, im) = load_inference(Path::new(inference))?;
    if gm.spec_hash != im.spec_hash {
        return Err(Error::Config("decoder and encoder checkpoints were built for different grids or models".into()).into());
    }
    let kind: PolicyKind = policy.parse()?;
    if let Some(p) = &im.policy {
        if p != kind.as_str() && kind != PolicyKind::Full {
            return Err(Error::Config(format!("encoder was trained with the {p} policy, not {kind}")).into());
        }
    }
    let lines = if kind == PolicyKind::Full { gm.grid.n_gamma } else { lines };
    let policy = PolicyConfig::new(kind, lines);
    policy.validate(gm.grid.n_gamma)?;
    Ok(AsSession {
        generative: g,
        inference: i,
        policy,
        noise: NoiseModel::new(noise_std)?,
        rng: ChaCha8Rng::seed_from_u64(seed),
        grid: gm.grid,
        t: 0,
    })
}

/// Load a decoder and an encoder checkpoint and set up a policy by name
/// (`covariance`, `trace`, `uniform`, `variable_density`, `equispaced`, `full`).
/// `noise_std` is the channel noise the policies assume.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn as_session_open(
    generative_path: *const c_char,
    inference_path: *const c_char,
    policy: *const c_char,
    lines: usize,
    noise_std: f64,
    seed: u64,
    out: *mut *mut AsSession,
) -> AsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let s = open_session(
            c_str(generative_path, "generative_path")?,
            c_str(inference_path, "inference_path")?,
            c_str(policy, "policy")?,
            lines,
            noise_std,
            seed,
        )?;
        *out = Box::into_raw(Box::new(s));
        Ok(())
    })
}

/// # Safety
/// `session` must come from `as_session_open` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn as_session_free(session: *mut AsSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Copy of the session's polar grid, to be freed with `as_grid_free`.
///
/// # Safety
/// `session` must be live and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn as_session_grid(session: *const AsSession, out: *mut *mut AsGrid) -> AsStatus {
    guard(|| {
        let s = as_ref(session, "session")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = Box::into_raw(Box::new(AsGrid { spec: s.grid.clone() }));
        Ok(())
    })
}

/// Number of lines the session acquires per frame.
///
/// # Safety
/// `session` must be live; `lines` valid.
#[no_mangle]
pub unsafe extern "C" fn as_session_lines(session: *const AsSession, lines: *mut usize) -> AsStatus {
    guard(|| {
        let s = as_ref(session, "session")?;
        if lines.is_null() {
            return Err(Fail::Null("lines"));
        }
        *lines = s.policy.lines;
        Ok(())
    })
}

/// Restart the acquisition and write the mask for the first frame.
///
/// # Safety
/// `session` must be live; `out_lines` must hold `out_cap` values.
#[no_mangle]
pub unsafe extern "C" fn as_session_reset(
    session: *mut AsSession,
    out_lines: *mut usize,
    out_cap: usize,
    out_len: *mut usize,
) -> AsStatus {
    guard(|| {
        let s = session.as_mut().ok_or(Fail::Null("session"))?;
        if out_len.is_null() {
            return Err(Fail::Null("out_len"));
        }
        s.t = 0;
        let mask = initial_mask(&s.policy, s.grid.n_gamma, &mut s.rng)?;
        need(out_cap, mask.len(), "out_lines")?;
        slice_mut(out_lines, out_cap, "out_lines")?[..mask.len()].copy_from_slice(mask.lines());
        *out_len = mask.len();
        Ok(())
    })
}

/// One acquisition step. `measured` holds the acquired columns, row-major
/// `n_r x n_lines`, column `k` belonging to `mask_lines[k]` (sorted,
/// distinct). Writes the polar reconstruction (`n_r x n_gamma`) and the
/// lines to acquire next.
///
/// # Safety
/// Buffers must hold the stated number of elements; `next_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn as_session_step(
    session: *mut AsSession,
    mask_lines: *const usize,
    n_lines: usize,
    measured: *const f64,
    measured_len: usize,
    recon: *mut f64,
    recon_len: usize,
    next_lines: *mut usize,
    next_cap: usize,
    next_len: *mut usize,
) -> AsStatus {
    guard(|| {
        let s = session.as_mut().ok_or(Fail::Null("session"))?;
        if next_len.is_null() {
            return Err(Fail::Null("next_len"));
        }
        let (n_r, n_gamma) = (s.grid.n_r, s.grid.n_gamma);
        let lines = slice(mask_lines, n_lines, "mask_lines")?;
        let mask = ScanLineMask::new(lines.to_vec(), n_gamma)?;
        if mask.lines() != lines {
            return Err(Error::RejectedInput("mask_lines must be sorted and distinct".into()).into());
        }
        exact(measured_len, n_r * n_lines, "measured")?;
        need(recon_len, n_r * n_gamma, "recon")?;
        need(next_cap, s.policy.lines, "next_lines")?;
        let values = Grid::from_row_slice(n_r, n_lines, slice(measured, measured_len, "measured")?);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::RejectedInput("measured contains non-finite values".into()).into());
        }
        let obs = Observation { values, mask, frame_index: s.t };
        let (filled, image) = zero_fill(&obs, n_gamma);
        let x = encoder_input(&[&filled], &[&image], s.inference.dtype(), &s.inference.device)?;
        let post = s.inference.encode_batch(&x)?;
        let r = reconstruct(&post, &s.generative, Reconstruction::PosteriorMean, &mut s.rng)?.remove(0);
        let next = next_masks(&s.policy, s.t + 1, &post, &s.generative, s.noise, &mut s.rng)?.remove(0);
        write_grid(&r, slice_mut(recon, recon_len, "recon")?);
        slice_mut(next_lines, next_cap, "next_lines")?[..next.len()].copy_from_slice(next.lines());
        *next_len = next.len();
        s.t += 1;
        Ok(())
    })
}

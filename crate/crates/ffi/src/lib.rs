//! C interface to mgmar.
//!
//! Every function returns an [`MgmarStatus`]. On failure the message for the
//! calling thread is available from [`mgmar_last_error_message`] until the
//! next call on that thread. Handles are opaque and must be released with
//! their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mgmar::config::{Preset, RunConfig};
use mgmar::eval;
use mgmar::nmar::nmar_complete;
use mgmar::pipeline::{Pipeline, PipelineError, RunOptions, StageSet};
use mgmar::projector::Projector;
use mgmar::raster::{Image, ImageGeometry, MetalMask, MetalTrace, Sinogram, SinogramGeometry};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MgmarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    MissingArtifact = 4,
    StrictFailure = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: MgmarStatus, msg: impl Into<String>) -> MgmarStatus {
    set_error(msg);
    status
}

fn from_pipeline(e: PipelineError) -> MgmarStatus {
    let status = match &e {
        PipelineError::Config(_) | PipelineError::UnknownAblation(_) | PipelineError::UnknownStage(_) => MgmarStatus::Config,
        PipelineError::Missing(_) => MgmarStatus::MissingArtifact,
        PipelineError::Strict(_) => MgmarStatus::StrictFailure,
        PipelineError::Io { .. } => MgmarStatus::Io,
        _ => MgmarStatus::Internal,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning a panic into `MgmarStatus::Panic`.
fn guard(f: impl FnOnce() -> MgmarStatus) -> MgmarStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MgmarStatus::Panic, msg)
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize) -> Option<&'a [T]> {
    if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(p, len))
    }
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize) -> Option<&'a mut [T]> {
    if p.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts_mut(p, len))
    }
}

unsafe fn opt_str(p: *const c_char) -> Result<Option<String>, MgmarStatus> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(|s| Some(s.to_string()))
        .map_err(|_| fail(MgmarStatus::InvalidArgument, "string is not valid UTF-8"))
}

/// Message describing the last failure on this thread, or NULL. The pointer
/// stays valid until the next mgmar call on the same thread.
#[no_mangle]
pub extern "C" fn mgmar_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mgmar_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque projector for one image/sinogram geometry.
pub struct MgmarProjector {
    inner: Projector,
}

/// Builds a projector for an `n`×`n` image over `fov_mm`, with a curved fan
/// detector when `fan` is true and parallel beams otherwise.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mgmar_projector_new(
    n: usize,
    fov_mm: f64,
    views: usize,
    bins: usize,
    fan: bool,
    out: *mut *mut MgmarProjector,
) -> MgmarStatus {
    guard(|| {
        if out.is_null() {
            return fail(MgmarStatus::NullPointer, "out is NULL");
        }
        let built = ImageGeometry::new(n, fov_mm).and_then(|img| {
            let sino = if fan { SinogramGeometry::fan(views, bins, &img) } else { SinogramGeometry::parallel(views, bins, &img) }?;
            Ok((img, sino))
        });
        let (img, sino) = match built {
            Ok(g) => g,
            Err(e) => return fail(MgmarStatus::InvalidArgument, e.to_string()),
        };
        match Projector::new(img, sino) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(MgmarProjector { inner: p }));
                MgmarStatus::Ok
            }
            Err(e) => fail(MgmarStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// # Safety
/// `p` must be NULL or a handle from `mgmar_projector_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mgmar_projector_free(p: *mut MgmarProjector) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Number of image pixels and of sinogram entries (views × bins).
///
/// # Safety
/// `p` must be a live handle; `n_pixels` and `n_rays` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mgmar_projector_dims(p: *const MgmarProjector, n_pixels: *mut usize, n_rays: *mut usize) -> MgmarStatus {
    guard(|| {
        if p.is_null() || n_pixels.is_null() || n_rays.is_null() {
            return fail(MgmarStatus::NullPointer, "NULL argument");
        }
        let p = &(*p).inner;
        *n_pixels = p.img.len();
        *n_rays = p.sino.len();
        MgmarStatus::Ok
    })
}

unsafe fn image_arg(p: &Projector, img: *const f32, len: usize) -> Result<Image, MgmarStatus> {
    let v = slice(img, len).ok_or_else(|| fail(MgmarStatus::NullPointer, "image is NULL"))?;
    Image::from_values(p.img, v.to_vec()).map_err(|e| fail(MgmarStatus::InvalidArgument, e.to_string()))
}

unsafe fn sino_arg(p: &Projector, s: *const f32, len: usize) -> Result<Sinogram, MgmarStatus> {
    let v = slice(s, len).ok_or_else(|| fail(MgmarStatus::NullPointer, "sinogram is NULL"))?;
    Sinogram::from_values(p.sino, v.to_vec()).map_err(|e| fail(MgmarStatus::InvalidArgument, e.to_string()))
}

unsafe fn write_out(dst: *mut f32, len: usize, src: &[f32]) -> MgmarStatus {
    match slice_mut(dst, len) {
        None => fail(MgmarStatus::NullPointer, "output is NULL"),
        Some(d) if d.len() != src.len() => fail(MgmarStatus::InvalidArgument, format!("output holds {len} values, need {}", src.len())),
        Some(d) => {
            d.copy_from_slice(src);
            MgmarStatus::Ok
        }
    }
}

/// Line integrals of a row-major image into a view-major sinogram.
///
/// # Safety
/// `p` must be a live handle; `img` and `sino_out` must hold the given lengths.
#[no_mangle]
pub unsafe extern "C" fn mgmar_forward_project(
    p: *const MgmarProjector,
    img: *const f32,
    img_len: usize,
    sino_out: *mut f32,
    sino_len: usize,
) -> MgmarStatus {
    guard(|| {
        if p.is_null() {
            return fail(MgmarStatus::NullPointer, "projector is NULL");
        }
        let p = &(*p).inner;
        let img = match image_arg(p, img, img_len) {
            Ok(i) => i,
            Err(s) => return s,
        };
        match p.forward_project(&img) {
            Ok(s) => write_out(sino_out, sino_len, &s.values),
            Err(e) => fail(MgmarStatus::Internal, e.to_string()),
        }
    })
}

/// Filtered backprojection of a view-major sinogram.
///
/// # Safety
/// `p` must be a live handle; `sino` and `img_out` must hold the given lengths.
#[no_mangle]
pub unsafe extern "C" fn mgmar_fbp(
    p: *const MgmarProjector,
    sino: *const f32,
    sino_len: usize,
    img_out: *mut f32,
    img_len: usize,
) -> MgmarStatus {
    guard(|| {
        if p.is_null() {
            return fail(MgmarStatus::NullPointer, "projector is NULL");
        }
        let p = &(*p).inner;
        let s = match sino_arg(p, sino, sino_len) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match p.fbp(&s) {
            Ok(img) => write_out(img_out, img_len, &img.values),
            Err(e) => fail(MgmarStatus::Internal, e.to_string()),
        }
    })
}

/// Metal trace of a binary mask (nonzero bytes are metal): a sinogram-sized
/// array of 0/1 bytes, set where the metal path exceeds `tau_mm`.
///
/// # Safety
/// `p` must be a live handle; `mask` and `trace_out` must hold the given lengths.
#[no_mangle]
pub unsafe extern "C" fn mgmar_metal_trace(
    p: *const MgmarProjector,
    mask: *const u8,
    mask_len: usize,
    tau_mm: f64,
    trace_out: *mut u8,
    trace_len: usize,
) -> MgmarStatus {
    guard(|| {
        if p.is_null() {
            return fail(MgmarStatus::NullPointer, "projector is NULL");
        }
        let p = &(*p).inner;
        let Some(m) = slice(mask, mask_len) else { return fail(MgmarStatus::NullPointer, "mask is NULL") };
        if m.len() != p.img.len() {
            return fail(MgmarStatus::InvalidArgument, format!("mask holds {mask_len} values, need {}", p.img.len()));
        }
        let mask = MetalMask { geometry: p.img, bits: m.iter().map(|&b| b != 0).collect() };
        let trace = match p.metal_trace(&mask, tau_mm) {
            Ok(t) => t,
            Err(e) => return fail(MgmarStatus::Internal, e.to_string()),
        };
        match slice_mut(trace_out, trace_len) {
            None => fail(MgmarStatus::NullPointer, "trace_out is NULL"),
            Some(d) if d.len() != trace.bits.len() => fail(MgmarStatus::InvalidArgument, "trace_out has the wrong length"),
            Some(d) => {
                d.iter_mut().zip(&trace.bits).for_each(|(o, &b)| *o = u8::from(b));
                MgmarStatus::Ok
            }
        }
    })
}

/// Prior-normalized interpolation of the traced entries of `sino`.
///
/// # Safety
/// `p` must be a live handle; the arrays must each hold `sino_len` values.
#[no_mangle]
pub unsafe extern "C" fn mgmar_nmar_complete(
    p: *const MgmarProjector,
    sino: *const f32,
    prior: *const f32,
    trace: *const u8,
    sino_len: usize,
    eps_floor: f64,
    out: *mut f32,
) -> MgmarStatus {
    guard(|| {
        if p.is_null() {
            return fail(MgmarStatus::NullPointer, "projector is NULL");
        }
        let p = &(*p).inner;
        let (s, pr) = match (sino_arg(p, sino, sino_len), sino_arg(p, prior, sino_len)) {
            (Ok(s), Ok(pr)) => (s, pr),
            (Err(st), _) | (_, Err(st)) => return st,
        };
        let Some(t) = slice(trace, sino_len) else { return fail(MgmarStatus::NullPointer, "trace is NULL") };
        let trace = MetalTrace { geometry: p.sino, bits: t.iter().map(|&b| b != 0).collect() };
        match nmar_complete(&s, &pr, &trace, eps_floor) {
            Ok(done) => write_out(out, sino_len, &done.values),
            Err(e) => fail(MgmarStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// RMSE, PSNR and SSIM of `img` against `reference`, both `rows`×`cols`.
/// A `data_range` of zero or less uses the range of the reference.
///
/// # Safety
/// `img` and `reference` must hold `rows * cols` values; the outputs must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn mgmar_image_metrics(
    img: *const f32,
    reference: *const f32,
    rows: usize,
    cols: usize,
    data_range: f64,
    rmse_out: *mut f64,
    psnr_out: *mut f64,
    ssim_out: *mut f64,
) -> MgmarStatus {
    guard(|| {
        if rmse_out.is_null() || psnr_out.is_null() || ssim_out.is_null() {
            return fail(MgmarStatus::NullPointer, "output is NULL");
        }
        if rows != cols {
            return fail(MgmarStatus::InvalidArgument, "images must be square");
        }
        let geom = match ImageGeometry::new(rows, rows as f64) {
            Ok(g) => g,
            Err(e) => return fail(MgmarStatus::InvalidArgument, e.to_string()),
        };
        let (a, b) = match (image_vals(geom, img), image_vals(geom, reference)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let range = if data_range > 0.0 { data_range } else { eval::data_range(&b) };
        let window = eval::SSIM_WINDOW.min(if rows % 2 == 1 { rows } else { rows - 1 });
        let metrics = eval::rmse(&a, &b, None).and_then(|r| Ok((r, eval::ssim_with(&a, &b, range, window, eval::SSIM_SIGMA)?)));
        match metrics {
            Ok((r, s)) => {
                *rmse_out = r;
                *psnr_out = eval::psnr_from_rmse(r, range);
                *ssim_out = s;
                MgmarStatus::Ok
            }
            Err(e) => fail(MgmarStatus::InvalidArgument, e.to_string()),
        }
    })
}

unsafe fn image_vals(geom: ImageGeometry, p: *const f32) -> Result<Image, MgmarStatus> {
    let v = slice(p, geom.len()).ok_or_else(|| fail(MgmarStatus::NullPointer, "image is NULL"))?;
    Image::from_values(geom, v.to_vec()).map_err(|e| fail(MgmarStatus::InvalidArgument, e.to_string()))
}

/// Opaque pipeline bound to one configuration and output directory.
pub struct MgmarPipeline {
    inner: Pipeline,
}

/// Loads `config_path` (NULL for the desk preset), then applies `out_dir`
/// and `seed` when given (NULL and a negative seed keep the config values).
///
/// # Safety
/// Strings must be NULL or NUL-terminated; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mgmar_pipeline_new(
    config_path: *const c_char,
    out_dir: *const c_char,
    seed: i64,
    out: *mut *mut MgmarPipeline,
) -> MgmarStatus {
    guard(|| {
        if out.is_null() {
            return fail(MgmarStatus::NullPointer, "out is NULL");
        }
        let (path, dir) = match (opt_str(config_path), opt_str(out_dir)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let cfg = match path {
            Some(p) => RunConfig::load(&PathBuf::from(p), None),
            None => Ok(RunConfig::preset(Preset::Desk)),
        };
        let mut cfg = match cfg {
            Ok(c) => c,
            Err(e) => return fail(MgmarStatus::Config, e.to_string()),
        };
        if let Some(d) = dir {
            cfg.out = PathBuf::from(d);
        }
        if seed >= 0 {
            cfg.seed = seed as u64;
        }
        match Pipeline::new(cfg) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(MgmarPipeline { inner: p }));
                MgmarStatus::Ok
            }
            Err(e) => from_pipeline(e),
        }
    })
}

/// Applies `section.key=value` overrides to a pipeline's configuration.
/// Several may be given on separate lines; they are validated together and
/// either all apply or none do.
///
/// # Safety
/// `p` must be a live handle and `assignment` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mgmar_pipeline_set(p: *mut MgmarPipeline, assignment: *const c_char) -> MgmarStatus {
    guard(|| {
        if p.is_null() {
            return fail(MgmarStatus::NullPointer, "pipeline is NULL");
        }
        let a = match opt_str(assignment) {
            Ok(Some(a)) => a,
            Ok(None) => return fail(MgmarStatus::NullPointer, "assignment is NULL"),
            Err(s) => return s,
        };
        let mut cfg = (*p).inner.cfg.clone();
        for line in a.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Err(e) = cfg.set_str(line) {
                return fail(MgmarStatus::Config, e.to_string());
            }
        }
        // geometry may change, so the pipeline is rebuilt
        match Pipeline::new(cfg) {
            Ok(np) => {
                (*p).inner = np;
                MgmarStatus::Ok
            }
            Err(e) => from_pipeline(e),
        }
    })
}

/// # Safety
/// `p` must be NULL or a handle from `mgmar_pipeline_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mgmar_pipeline_free(p: *mut MgmarPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

unsafe fn with_pipeline(p: *const MgmarPipeline, f: impl FnOnce(&Pipeline) -> Result<(), PipelineError>) -> MgmarStatus {
    guard(|| {
        if p.is_null() {
            return fail(MgmarStatus::NullPointer, "pipeline is NULL");
        }
        match f(&(*p).inner) {
            Ok(()) => MgmarStatus::Ok,
            Err(e) => from_pipeline(e),
        }
    })
}

/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mgmar_pipeline_gen_data(p: *const MgmarPipeline) -> MgmarStatus {
    with_pipeline(p, |p| p.gen_data().map(drop))
}

/// Trains the prior stages and the residual network; `meta` also trains the
/// meta-learned baseline initialization.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mgmar_pipeline_pretrain(p: *const MgmarPipeline, meta: bool) -> MgmarStatus {
    with_pipeline(p, |p| p.pretrain(meta).map(drop))
}

/// Corrects one case (`case_id`) or the validation split (NULL). `stages` is
/// a comma-separated subset of prior,nmar,residual (NULL for all); a negative
/// `n_iter` keeps the configured refinement length.
///
/// # Safety
/// `p` must be a live handle; strings NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mgmar_pipeline_run(
    p: *const MgmarPipeline,
    case_id: *const c_char,
    stages: *const c_char,
    n_iter: i64,
) -> MgmarStatus {
    let (case, stages) = match (opt_str(case_id), opt_str(stages)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(s), _) | (_, Err(s)) => return s,
    };
    with_pipeline(p, |p| {
        let stages = match stages {
            Some(s) => StageSet::parse(&s)?,
            None => StageSet::ALL,
        };
        let opts = RunOptions { stages, n_iter: (n_iter >= 0).then_some(n_iter as usize), case };
        p.run(&opts).map(drop)
    })
}

/// Writes metrics.csv and report.md. With `strict`, a failed ordering check
/// returns `MGMAR_STATUS_STRICT_FAILURE` after the files are written.
///
/// # Safety
/// `p` must be a live handle; `n_failures` NULL or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn mgmar_pipeline_eval(p: *const MgmarPipeline, strict: bool, n_failures: *mut usize) -> MgmarStatus {
    with_pipeline(p, |p| {
        let out = p.eval(false)?;
        if !n_failures.is_null() {
            *n_failures = out.failures.len();
        }
        if strict && !out.failures.is_empty() {
            return Err(PipelineError::Strict(out.failures.join("; ")));
        }
        Ok(())
    })
}

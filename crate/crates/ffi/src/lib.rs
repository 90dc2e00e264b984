//! C ABI for dpsct.
//!
//! Objects cross the boundary as opaque heap handles created by `*_new`,
//! `*_load` or an operation's out-parameter and released with the matching
//! `*_free`. Every fallible call returns a [`DpsctStatus`]; on failure the
//! thread's last error message is available from [`dpsct_last_error`].
//! Out-parameters are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dpsct::config::ScenarioConfig;
use dpsct::fbp::fbp_from_measurement;
use dpsct::forward::{Measurement, NoiseOptions};
use dpsct::harness;
use dpsct::image::{GridShape, ImageGrid};
use dpsct::io;
use dpsct::metrics::{self, RunEnsemble};
use dpsct::sampler::run_ensemble_tolerant;
use dpsct::score::CountingModel;
use dpsct::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpsctStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    NonFinite = 4,
    Diverged = 5,
    NotConverged = 6,
    Format = 7,
    Io = 8,
    Unsupported = 9,
    Panic = 10,
}

impl From<&Error> for DpsctStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::TimeStepOutOfRange { .. } => Self::InvalidArgument,
            Error::ShapeMismatch { .. } => Self::ShapeMismatch,
            Error::NonFinite(_) => Self::NonFinite,
            Error::JacobianUnavailable => Self::Unsupported,
            Error::Diverged { .. } => Self::Diverged,
            Error::NotConverged { .. } => Self::NotConverged,
            Error::Format(_) => Self::Format,
            Error::Io(_) => Self::Io,
        }
    }
}

/// Scenario configuration.
pub struct DpsctConfig(ScenarioConfig);

/// Measured counts with their forward model.
pub struct DpsctMeasurement(Measurement);

/// Attenuation image in mm⁻¹.
pub struct DpsctImage(ImageGrid);

/// Ensemble of reconstructions of one measurement.
pub struct DpsctEnsemble {
    ensemble: RunEnsemble,
    diverged: usize,
    score_evaluations: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DpsctStatus, msg: impl Into<String>) -> DpsctStatus {
    set_last_error(msg.into());
    status
}

/// Runs `f`, mapping errors and panics to a status.
fn guard(f: impl FnOnce() -> Result<(), DpsctStatus>) -> DpsctStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpsctStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DpsctStatus::Panic, msg)
        }
    }
}

fn check(r: dpsct::Result<()>) -> Result<(), DpsctStatus> {
    r.map_err(|e| fail(DpsctStatus::from(&e), e.to_string()))
}

fn lift<T>(r: dpsct::Result<T>) -> Result<T, DpsctStatus> {
    r.map_err(|e| fail(DpsctStatus::from(&e), e.to_string()))
}

unsafe fn href<'a, T>(p: *const T, what: &str) -> Result<&'a T, DpsctStatus> {
    p.as_ref().ok_or_else(|| fail(DpsctStatus::NullPointer, format!("{what} is null")))
}

unsafe fn hmut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, DpsctStatus> {
    p.as_mut().ok_or_else(|| fail(DpsctStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, DpsctStatus> {
    if p.is_null() {
        return Err(fail(DpsctStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DpsctStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out<T>(slot: *mut *mut T, value: T) -> Result<(), DpsctStatus> {
    if slot.is_null() {
        return Err(fail(DpsctStatus::NullPointer, "output pointer is null"));
    }
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dpsct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpsct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in preset, `"low-mas"` or `"sparse"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out_cfg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_config_preset(name: *const c_char, out_cfg: *mut *mut DpsctConfig) -> DpsctStatus {
    guard(|| {
        let cfg = lift(ScenarioConfig::preset(string(name, "name")?))?;
        out(out_cfg, DpsctConfig(cfg))
    })
}

/// Parses TOML config text layered over the preset it names.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_cfg` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_config_from_toml(text: *const c_char, out_cfg: *mut *mut DpsctConfig) -> DpsctStatus {
    guard(|| {
        let cfg = lift(ScenarioConfig::from_toml(string(text, "text")?))?;
        lift(cfg.validate())?;
        out(out_cfg, DpsctConfig(cfg))
    })
}

/// Sets the output directory used by file-writing operations.
///
/// # Safety
/// `cfg` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpsct_config_set_output_dir(cfg: *mut DpsctConfig, dir: *const c_char) -> DpsctStatus {
    guard(|| {
        let cfg = hmut(cfg, "config")?;
        cfg.0.output.dir = string(dir, "dir")?.into();
        Ok(())
    })
}

/// Overrides the sampler's mode (`"baseline"`/`"stable"`), `T′`, `η`,
/// subset count, seed and ensemble size.
///
/// # Safety
/// `cfg` must be a live handle; `mode` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpsct_config_set_sampler(
    cfg: *mut DpsctConfig,
    mode: *const c_char,
    t_prime: usize,
    eta: f64,
    n_subsets: usize,
    seed: u64,
    n_runs: usize,
) -> DpsctStatus {
    guard(|| {
        let cfg = hmut(cfg, "config")?;
        let mut next = cfg.0.clone();
        next.sampler.mode = string(mode, "mode")?.to_string();
        next.sampler.t_prime = t_prime;
        next.sampler.eta = eta;
        next.sampler.n_subsets = n_subsets;
        next.sampler.seed = seed;
        next.sampler.n_runs = n_runs;
        lift(next.validate())?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpsct_config_free(cfg: *mut DpsctConfig) {
    release(cfg);
}

/// Rasterizes the configured phantom and simulates a measurement in memory.
/// `out_truth` may be null.
///
/// # Safety
/// `cfg` must be a live handle; `out_measurement` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_simulate(
    cfg: *const DpsctConfig,
    out_measurement: *mut *mut DpsctMeasurement,
    out_truth: *mut *mut DpsctImage,
) -> DpsctStatus {
    guard(|| {
        let cfg = &href(cfg, "config")?.0;
        let truth = lift(cfg.truth())?;
        let model = lift(cfg.geometry().and_then(|g| cfg.forward_model(g)))?;
        let m = lift(model.simulate_noisy(
            &truth,
            NoiseOptions {
                seed: cfg.simulate.seed,
                noiseless: cfg.simulate.noiseless,
                variance_floor: cfg.detector.variance_floor,
            },
        ))?;
        out(out_measurement, DpsctMeasurement(m))?;
        if !out_truth.is_null() {
            *out_truth = Box::into_raw(Box::new(DpsctImage(truth)));
        }
        Ok(())
    })
}

/// Reads a measurement file, attaching the config's grid and detector.
///
/// # Safety
/// `cfg` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpsct_measurement_load(
    cfg: *const DpsctConfig,
    path: *const c_char,
    out_measurement: *mut *mut DpsctMeasurement,
) -> DpsctStatus {
    guard(|| {
        let cfg = &href(cfg, "config")?.0;
        let m = lift(harness::load_measurement(cfg, Path::new(string(path, "path")?)))?;
        out(out_measurement, DpsctMeasurement(m))
    })
}

/// # Safety
/// `m` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpsct_measurement_save(m: *const DpsctMeasurement, path: *const c_char) -> DpsctStatus {
    guard(|| {
        let m = &href(m, "measurement")?.0;
        check(harness::save_measurement(Path::new(string(path, "path")?), m))
    })
}

/// Number of readings, `views · bins`.
///
/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpsct_measurement_len(m: *const DpsctMeasurement) -> usize {
    m.as_ref().map_or(0, |m| m.0.counts().len())
}

/// Copies the counts into `buf`, which must hold `len` values.
///
/// # Safety
/// `m` must be a live handle; `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn dpsct_measurement_counts(m: *const DpsctMeasurement, buf: *mut f64, len: usize) -> DpsctStatus {
    guard(|| {
        let m = &href(m, "measurement")?.0;
        copy_out(m.counts(), buf, len)
    })
}

/// Negative log-likelihood of an image under the measurement.
///
/// # Safety
/// `m` and `img` must be live handles; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_measurement_nll(
    m: *const DpsctMeasurement,
    img: *const DpsctImage,
    out_value: *mut f64,
) -> DpsctStatus {
    guard(|| {
        let m = &href(m, "measurement")?.0;
        let img = &href(img, "image")?.0;
        let v = lift(m.neg_log_likelihood(img.data()))?;
        *hmut(out_value, "out_value")? = v;
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpsct_measurement_free(m: *mut DpsctMeasurement) {
    release(m);
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), DpsctStatus> {
    if buf.is_null() {
        return Err(fail(DpsctStatus::NullPointer, "buffer is null"));
    }
    if len != src.len() {
        return Err(fail(
            DpsctStatus::ShapeMismatch,
            format!("buffer holds {len} values, need {}", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, len);
    Ok(())
}

/// Image from `width · height` row-major values, row 0 at the top.
///
/// # Safety
/// `data` must be valid for `width · height` reads; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_new(
    width: usize,
    height: usize,
    pixel_size: f64,
    data: *const f64,
    out_image: *mut *mut DpsctImage,
) -> DpsctStatus {
    guard(|| {
        if data.is_null() {
            return Err(fail(DpsctStatus::NullPointer, "data is null"));
        }
        let shape = lift(GridShape::new(width, height, pixel_size))?;
        let values = std::slice::from_raw_parts(data, shape.len()).to_vec();
        out(out_image, DpsctImage(lift(ImageGrid::new(shape, values))?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_read(path: *const c_char, out_image: *mut *mut DpsctImage) -> DpsctStatus {
    guard(|| {
        let img = lift(io::read_image(Path::new(string(path, "path")?)))?;
        out(out_image, DpsctImage(img))
    })
}

/// # Safety
/// `img` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_write(img: *const DpsctImage, path: *const c_char) -> DpsctStatus {
    guard(|| {
        let img = &href(img, "image")?.0;
        check(io::write_image(Path::new(string(path, "path")?), img))
    })
}

/// # Safety
/// `img` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_width(img: *const DpsctImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// # Safety
/// `img` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_height(img: *const DpsctImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.height())
}

/// # Safety
/// `img` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_pixel_size(img: *const DpsctImage) -> f64 {
    img.as_ref().map_or(0.0, |i| i.0.pixel_size())
}

/// Copies the pixels into `buf`, which must hold `width · height` values.
///
/// # Safety
/// `img` must be a live handle; `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_data(img: *const DpsctImage, buf: *mut f64, len: usize) -> DpsctStatus {
    guard(|| copy_out(href(img, "image")?.0.data(), buf, len))
}

/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpsct_image_free(img: *mut DpsctImage) {
    release(img);
}

/// Filtered backprojection of a measurement.
///
/// # Safety
/// `m` must be a live handle; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_fbp(m: *const DpsctMeasurement, out_image: *mut *mut DpsctImage) -> DpsctStatus {
    guard(|| {
        let img = lift(fbp_from_measurement(&href(m, "measurement")?.0))?;
        out(out_image, DpsctImage(img))
    })
}

/// Runs the configured sampler ensemble. Stable mode starts from the FBP of
/// `m` unless `init` is given. `truth` may be null; with it, bias and
/// PSNR/SSIM become available. Diverged runs are counted and skipped; if
/// fewer than one run survives the call fails with `Diverged`.
///
/// # Safety
/// `cfg` and `m` must be live handles; `init`, `truth` live or null;
/// `out_ensemble` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_reconstruct(
    cfg: *const DpsctConfig,
    m: *const DpsctMeasurement,
    init: *const DpsctImage,
    truth: *const DpsctImage,
    out_ensemble: *mut *mut DpsctEnsemble,
) -> DpsctStatus {
    guard(|| {
        let cfg = &href(cfg, "config")?.0;
        let m = &href(m, "measurement")?.0;
        let init = match init.as_ref() {
            Some(i) => i.0.clone(),
            None => lift(fbp_from_measurement(m))?,
        };
        let model = CountingModel::new(lift(cfg.prior())?);
        let schedule = lift(cfg.schedule())?;
        let sampler = lift(cfg.sampler_config())?;
        let outcome = lift(run_ensemble_tolerant(m, &model, &schedule, &sampler, Some(&init)))?;
        if outcome.runs.is_empty() {
            let msg = outcome
                .failures
                .first()
                .map_or_else(|| "no runs requested".to_string(), |(_, e)| e.to_string());
            return Err(fail(DpsctStatus::Diverged, msg));
        }
        let diverged = outcome.failures.len();
        let mut ensemble = lift(RunEnsemble::new(outcome.runs))?;
        if let Some(t) = truth.as_ref() {
            ensemble = lift(ensemble.with_truth(t.0.clone()))?;
        }
        out(
            out_ensemble,
            DpsctEnsemble {
                ensemble,
                diverged,
                score_evaluations: model.evaluations(),
            },
        )
    })
}

/// # Safety
/// `e` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_len(e: *const DpsctEnsemble) -> usize {
    e.as_ref().map_or(0, |e| e.ensemble.n_runs())
}

/// # Safety
/// `e` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_diverged(e: *const DpsctEnsemble) -> usize {
    e.as_ref().map_or(0, |e| e.diverged)
}

/// Total score-model evaluations across the ensemble.
///
/// # Safety
/// `e` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_score_evaluations(e: *const DpsctEnsemble) -> u64 {
    e.as_ref().map_or(0, |e| e.score_evaluations)
}

/// Copy of run `index`.
///
/// # Safety
/// `e` must be a live handle; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_run(e: *const DpsctEnsemble, index: usize, out_image: *mut *mut DpsctImage) -> DpsctStatus {
    guard(|| {
        let e = href(e, "ensemble")?;
        let img = e.ensemble.runs().get(index).cloned().ok_or_else(|| {
            fail(
                DpsctStatus::InvalidArgument,
                format!("run {index} out of range (ensemble has {})", e.ensemble.n_runs()),
            )
        })?;
        out(out_image, DpsctImage(img))
    })
}

/// # Safety
/// `e` must be a live handle; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_mean(e: *const DpsctEnsemble, out_image: *mut *mut DpsctImage) -> DpsctStatus {
    guard(|| out(out_image, DpsctImage(href(e, "ensemble")?.ensemble.mean_image())))
}

/// Pixelwise standard deviation; needs at least two runs.
///
/// # Safety
/// `e` must be a live handle; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_std(e: *const DpsctEnsemble, out_image: *mut *mut DpsctImage) -> DpsctStatus {
    guard(|| {
        let img = lift(href(e, "ensemble")?.ensemble.std_map())?;
        out(out_image, DpsctImage(img))
    })
}

/// Ensemble summary. Needs a truth image and at least two runs.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DpsctSummary {
    pub std: f64,
    pub bias: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// # Safety
/// `e` must be a live handle; `out_summary` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_summary(e: *const DpsctEnsemble, out_summary: *mut DpsctSummary) -> DpsctStatus {
    guard(|| {
        let s = lift(href(e, "ensemble")?.ensemble.summary())?;
        *hmut(out_summary, "out_summary")? = DpsctSummary {
            std: s.std,
            bias: s.bias,
            psnr: s.psnr,
            ssim: s.ssim,
        };
        Ok(())
    })
}

/// # Safety
/// `e` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpsct_ensemble_free(e: *mut DpsctEnsemble) {
    release(e);
}

/// PSNR in dB with the truth maximum as peak; identical images give +∞.
///
/// # Safety
/// `recon`, `truth` must be live handles; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_psnr(recon: *const DpsctImage, truth: *const DpsctImage, out_value: *mut f64) -> DpsctStatus {
    guard(|| {
        let v = lift(metrics::psnr(&href(recon, "recon")?.0, &href(truth, "truth")?.0))?;
        *hmut(out_value, "out_value")? = v;
        Ok(())
    })
}

/// # Safety
/// `recon`, `truth` must be live handles; `out_value` writable.
#[no_mangle]
pub unsafe extern "C" fn dpsct_ssim(recon: *const DpsctImage, truth: *const DpsctImage, out_value: *mut f64) -> DpsctStatus {
    guard(|| {
        let v = lift(metrics::ssim(&href(recon, "recon")?.0, &href(truth, "truth")?.0))?;
        *hmut(out_value, "out_value")? = v;
        Ok(())
    })
}

//! C ABI for the divmotion library: dataset generation, the two training
//! stages, evaluation, and a predictor session for sampling futures from
//! trained checkpoints. Handles are opaque, every call returns a status
//! code, and the last error message is kept per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use divmotion::commands;
use divmotion::config::{Method, RunConfig};
use divmotion::cvae::{random_sample, CvaeModel};
use divmotion::rng;
use divmotion::sampler::{sample_diverse, BankNet, DlowModel, SamplerModel};
use divmotion::tensor::Tensor;

/// Status code returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    RunFailed = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Aggregate metrics from one evaluation run.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DmMetrics {
    pub apd: f64,
    pub ade: f64,
    pub fde: f64,
    pub mmade: f64,
    pub mmfde: f64,
    pub ade_median: f64,
    pub fde_median: f64,
    /// Fraction of synthetic modes covered, or -1 when unavailable.
    pub mode_coverage: f64,
    pub k: usize,
}

/// Dimensions of the sequences a predictor consumes and produces.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DmDims {
    pub joints: usize,
    pub coords: usize,
    pub history_frames: usize,
    pub future_frames: usize,
    pub latent_dim: usize,
}

enum Net {
    Random,
    Aux(SamplerModel),
    Dlow(DlowModel),
}

/// Opaque predictor session holding the frozen models.
pub struct DmPredictor {
    cvae: CvaeModel,
    net: Net,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into()).unwrap_or_else(|_| CString::new("invalid error").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn fail(msg: impl Into<String>) -> DmStatus {
    set_error(msg);
    DmStatus::RunFailed
}

fn guard<F: FnOnce() -> DmStatus>(f: F) -> DmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            DmStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or NULL.
unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, DmStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(DmStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        DmStatus::InvalidUtf8
    })
}

fn load_config(path: &str) -> Result<RunConfig, DmStatus> {
    RunConfig::from_file(Path::new(path)).map_err(|e| {
        set_error(format!("config {path}: {e}"));
        DmStatus::InvalidArgument
    })
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn dm_version() -> *const c_char {
    concat!("divmotion ", env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Last error message for this thread, or NULL if none. Free the returned
/// string with `dm_string_free`.
#[no_mangle]
pub extern "C" fn dm_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        Some(s) => s.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn dm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generate the synthetic dataset described by the config file.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dm_generate_dataset(config_path: *const c_char) -> DmStatus {
    guard(|| {
        let path = match read_str(config_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match load_config(path) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match commands::cmd_gen_data(&cfg) {
            Ok(()) => DmStatus::Ok,
            Err(e) => fail(e.to_string()),
        }
    })
}

/// Pretrain the CVAE per the config file.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dm_train_cvae(config_path: *const c_char) -> DmStatus {
    guard(|| {
        let path = match read_str(config_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match load_config(path) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match commands::cmd_train_cvae(&cfg) {
            Ok(_) => DmStatus::Ok,
            Err(e) => fail(e.to_string()),
        }
    })
}

/// Train the sampling stage selected by the config's `method`.
///
/// # Safety
/// `config_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dm_train_sampler(config_path: *const c_char) -> DmStatus {
    guard(|| {
        let path = match read_str(config_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let cfg = match load_config(path) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match commands::cmd_train_sampler(&cfg) {
            Ok(_) => DmStatus::Ok,
            Err(e) => fail(e.to_string()),
        }
    })
}

/// Evaluate `method` at `k` samples per input and write `out_metrics`.
///
/// # Safety
/// `config_path` and `method` must be valid NUL-terminated strings;
/// `out_metrics` must point to writable memory for one `DmMetrics`.
#[no_mangle]
pub unsafe extern "C" fn dm_evaluate(
    config_path: *const c_char,
    method: *const c_char,
    k: usize,
    out_metrics: *mut DmMetrics,
) -> DmStatus {
    guard(|| {
        if out_metrics.is_null() {
            set_error("out_metrics is null");
            return DmStatus::NullPointer;
        }
        let path = match read_str(config_path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let method_str = match read_str(method) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let mut cfg = match load_config(path) {
            Ok(c) => c,
            Err(s) => return s,
        };
        cfg.method = match Method::parse(method_str) {
            Ok(m) => m,
            Err(e) => {
                set_error(e.to_string());
                return DmStatus::InvalidArgument;
            }
        };
        if k > 0 {
            cfg.k_eval = k;
        }
        let dataset = match divmotion::synth::load(&cfg.data_dir) {
            Ok(d) => d,
            Err(e) => return fail(e.to_string()),
        };
        match commands::evaluate_method_chunked(&cfg, &dataset, cfg.method, cfg.k_eval) {
            Ok(r) => {
                *out_metrics = DmMetrics {
                    apd: r.apd,
                    ade: r.ade,
                    fde: r.fde,
                    mmade: r.mmade,
                    mmfde: r.mmfde,
                    ade_median: r.ade_m,
                    fde_median: r.fde_m,
                    mode_coverage: r.coverage.unwrap_or(-1.0),
                    k: r.k_used,
                };
                DmStatus::Ok
            }
            Err(e) => fail(e.to_string()),
        }
    })
}

/// Open a predictor session from checkpoint directories. `sampler_dir` may
/// be NULL for `method = "random"`. The handle must be released with
/// `dm_predictor_free`.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings (or NULL where
/// documented); `out` must point to writable pointer storage.
#[no_mangle]
pub unsafe extern "C" fn dm_predictor_open(
    cvae_dir: *const c_char,
    sampler_dir: *const c_char,
    method: *const c_char,
    seed: u64,
    out: *mut *mut DmPredictor,
) -> DmStatus {
    guard(|| {
        if out.is_null() {
            set_error("out handle pointer is null");
            return DmStatus::NullPointer;
        }
        let cvae_path = match read_str(cvae_dir) {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        let method_str = match read_str(method) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let parsed = match Method::parse(method_str) {
            Ok(m) => m,
            Err(e) => {
                set_error(e.to_string());
                return DmStatus::InvalidArgument;
            }
        };
        let cvae = match CvaeModel::load(&cvae_path) {
            Ok(m) => m,
            Err(e) => return fail(e.to_string()),
        };
        let net = match parsed {
            Method::Random => Net::Random,
            Method::Auxiliary | Method::Dlow => {
                let dir = match read_str(sampler_dir) {
                    Ok(p) => PathBuf::from(p),
                    Err(s) => return s,
                };
                match parsed {
                    Method::Auxiliary => match SamplerModel::load(&dir) {
                        Ok(m) => Net::Aux(m),
                        Err(e) => return fail(e.to_string()),
                    },
                    _ => match DlowModel::load(&dir) {
                        Ok(m) => Net::Dlow(m),
                        Err(e) => return fail(e.to_string()),
                    },
                }
            }
        };
        let handle = Box::new(DmPredictor { cvae, net, seed });
        *out = Box::into_raw(handle);
        DmStatus::Ok
    })
}

/// Sequence dimensions of an open predictor.
///
/// # Safety
/// `p` must be a live handle from `dm_predictor_open`; `out` must point to
/// writable memory for one `DmDims`.
#[no_mangle]
pub unsafe extern "C" fn dm_predictor_dims(p: *const DmPredictor, out: *mut DmDims) -> DmStatus {
    guard(|| {
        if p.is_null() || out.is_null() {
            set_error("null handle or output pointer");
            return DmStatus::NullPointer;
        }
        let d = (*p).cvae.dims;
        *out = DmDims {
            joints: d.joints,
            coords: d.coords,
            history_frames: d.history_frames,
            future_frames: d.future_frames,
            latent_dim: d.n_z,
        };
        DmStatus::Ok
    })
}

/// Sample `k` futures for one observed sequence. `observed` is row-major
/// [joints*coords, history_frames]; `out` receives k predictions of
/// [joints*coords, future_frames] back to back. `stream_id` selects the
/// random stream, so (seed, stream_id) pairs replay exactly.
///
/// # Safety
/// `p` must be a live handle; `observed` must hold `observed_len` doubles
/// and `out` must have room for `out_capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn dm_predictor_sample(
    p: *const DmPredictor,
    observed: *const f64,
    observed_len: usize,
    k: usize,
    stream_id: u64,
    out: *mut f64,
    out_capacity: usize,
) -> DmStatus {
    guard(|| {
        if p.is_null() || observed.is_null() || out.is_null() {
            set_error("null pointer argument");
            return DmStatus::NullPointer;
        }
        let pred = &*p;
        let d = pred.cvae.dims;
        let rows = d.pose_rows();
        if observed_len != rows * d.history_frames {
            set_error(format!(
                "observed_len {} != joints*coords*history = {}",
                observed_len,
                rows * d.history_frames
            ));
            return DmStatus::InvalidArgument;
        }
        let needed = k * rows * d.future_frames;
        if out_capacity < needed {
            set_error(format!("output needs {needed} doubles, got {out_capacity}"));
            return DmStatus::BufferTooSmall;
        }
        let obs = std::slice::from_raw_parts(observed, observed_len);
        let x = match Tensor::new(&[rows, d.history_frames], obs.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(e.to_string()),
        };
        let mut r = rng::stream(pred.seed, &format!("ffi-sample-{stream_id}"));
        let preds = match &pred.net {
            Net::Random => random_sample(&pred.cvae, &x, k, &mut r),
            Net::Aux(net) => sample_diverse(net, &pred.cvae, &x, k, &mut r),
            Net::Dlow(net) => sample_diverse(net, &pred.cvae, &x, k, &mut r),
        };
        match preds {
            Ok(preds) => {
                let out_slice = std::slice::from_raw_parts_mut(out, needed);
                for (i, t) in preds.iter().enumerate() {
                    let n = t.len();
                    out_slice[i * n..(i + 1) * n].copy_from_slice(t.data());
                }
                DmStatus::Ok
            }
            Err(e) => fail(e.to_string()),
        }
    })
}

/// Number of samples a fixed-K head produces per call, or 0 when the
/// predictor accepts any K.
///
/// # Safety
/// `p` must be a live handle from `dm_predictor_open`.
#[no_mangle]
pub unsafe extern "C" fn dm_predictor_fixed_k(p: *const DmPredictor) -> usize {
    if p.is_null() {
        return 0;
    }
    match &(*p).net {
        Net::Dlow(net) => net.fixed_k().unwrap_or(0),
        _ => 0,
    }
}

/// Release a predictor handle.
///
/// # Safety
/// `p` must be a handle from `dm_predictor_open`, not freed twice.
#[no_mangle]
pub unsafe extern "C" fn dm_predictor_free(p: *mut DmPredictor) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

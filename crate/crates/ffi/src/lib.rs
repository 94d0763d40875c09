//! C ABI for the msdftvnet forecaster.
//!
//! Every fallible call returns an [`MsdStatus`]; on failure a message is
//! available from [`msd_last_error`] on the same thread. Models are opaque
//! [`MsdForecaster`] handles released with [`msd_forecaster_free`]. Arrays
//! are row-major `double` buffers of `time × channels`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use msdftvnet::data::Split;
use msdftvnet::model::ModelConfig;
use msdftvnet::pipeline::{fit, DataSource, Forecaster};
use msdftvnet::train::TrainOptions;
use msdftvnet::{spectral, Error, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Format = 5,
    Numeric = 6,
    InsufficientData = 7,
    Panic = 8,
}

/// Opaque trained model with its normalisation statistics.
pub struct MsdForecaster {
    inner: Forecaster,
}

/// Training parameters; fill with [`msd_train_config_default`] first.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MsdTrainConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub scales: usize,
    pub embed_dim: usize,
    pub taps: usize,
    /// 0 selects four times `embed_dim`.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gradient-norm clip; 0 or negative disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MsdModelInfo {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub scales: usize,
    pub parameters: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MsdEvalResult {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Split selector values for [`msd_forecaster_evaluate`].
pub const MSD_SPLIT_TRAIN: i32 = 0;
pub const MSD_SPLIT_VAL: i32 = 1;
pub const MSD_SPLIT_TEST: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(MsdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. } => MsdStatus::Dimension,
            Error::Contract(_) | Error::Config(_) => MsdStatus::InvalidArgument,
            Error::Numeric(_) | Error::NonFiniteGradient(_) => MsdStatus::Numeric,
            Error::InputTooShort { .. } | Error::InsufficientData { .. } => MsdStatus::InsufficientData,
            Error::Parse { .. } | Error::Format(_) => MsdStatus::Format,
            Error::Io(_) => MsdStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MsdStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(MsdStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MsdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MsdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn handle<'a>(p: *const MsdForecaster) -> Result<&'a Forecaster, Failure> {
    p.as_ref().map(|h| &h.inner).ok_or_else(|| null("model"))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn msd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Defaults: lookback 96, horizon 24, 2 scales, width 32, 3 taps,
/// 10 epochs, batch 32, learning rate 1e-4, clip 5, seed 42, split 0.7/0.1/0.2.
///
/// # Safety
/// `out` must be null or point to writable memory for one config.
#[no_mangle]
pub unsafe extern "C" fn msd_train_config_default(out: *mut MsdTrainConfig) -> MsdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let opts = TrainOptions::default();
        *out = MsdTrainConfig {
            lookback: 96,
            horizon: 24,
            scales: 2,
            embed_dim: 32,
            taps: 3,
            hidden: 0,
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            learning_rate: opts.lr,
            clip: opts.clip.unwrap_or(0.0),
            seed: 42,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
        };
        Ok(())
    })
}

/// Train on `data` (a CSV path or `synthetic:...` spec) and return a new handle.
///
/// # Safety
/// `data` must be a NUL-terminated string, `config` a valid config, and
/// `out` writable; a handle stored in `out` must be freed by the caller.
#[no_mangle]
pub unsafe extern "C" fn msd_forecaster_train(
    data: *const c_char,
    config: *const MsdTrainConfig,
    out: *mut *mut MsdForecaster,
) -> MsdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let data = str_arg(data, "data")?;
        let c = *config.as_ref().ok_or_else(|| null("config"))?;
        let raw = data.parse::<DataSource>()?.load()?;
        let mut mc = ModelConfig::new(c.lookback, c.horizon, raw.channels()).with_embed_dim(c.embed_dim);
        mc.scales = c.scales;
        mc.taps = c.taps;
        mc.seed = c.seed;
        if c.hidden > 0 {
            mc.hidden = c.hidden;
        }
        let opts = TrainOptions {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.learning_rate,
            clip: (c.clip > 0.0).then_some(c.clip),
            seed: c.seed,
            ..TrainOptions::default()
        };
        let ratios = (c.train_ratio, c.val_ratio, c.test_ratio);
        let (forecaster, outcome) = fit(raw, &mc, ratios, &opts, |_| {})?;
        if let Some(msg) = outcome.diverged {
            return Err(Failure(MsdStatus::Numeric, msg));
        }
        *out = Box::into_raw(Box::new(MsdForecaster { inner: forecaster }));
        Ok(())
    })
}

/// Load a checkpoint written by [`msd_forecaster_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msd_forecaster_load(path: *const c_char, out: *mut *mut MsdForecaster) -> MsdStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let f = Forecaster::load(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(MsdForecaster { inner: f }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn msd_forecaster_save(model: *const MsdForecaster, path: *const c_char) -> MsdStatus {
    guard(|| {
        handle(model)?.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn msd_forecaster_free(model: *mut MsdForecaster) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msd_forecaster_info(model: *const MsdForecaster, out: *mut MsdModelInfo) -> MsdStatus {
    guard(|| {
        let f = handle(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = f.config();
        *out = MsdModelInfo {
            lookback: c.lookback,
            horizon: c.horizon,
            channels: c.channels,
            embed_dim: c.embed_dim,
            scales: c.scales,
            parameters: c.param_count(),
        };
        Ok(())
    })
}

/// Forecast from a raw `lookback × channels` window into a
/// `horizon × channels` buffer, both in original units.
///
/// # Safety
/// `window` must hold `window_len` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn msd_forecaster_predict(
    model: *const MsdForecaster,
    window: *const f64,
    window_len: usize,
    out: *mut f64,
    out_len: usize,
) -> MsdStatus {
    guard(|| {
        let f = handle(model)?;
        if window.is_null() {
            return Err(null("window"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let c = f.config();
        let (need_in, need_out) = (c.lookback * c.channels, c.horizon * c.channels);
        if window_len != need_in || out_len != need_out {
            return Err(Failure(
                MsdStatus::Dimension,
                format!("buffers hold {window_len} and {out_len} values, expected {need_in} and {need_out}"),
            ));
        }
        let x = Tensor::new(
            &[c.lookback, c.channels],
            std::slice::from_raw_parts(window, window_len).to_vec(),
        )?;
        let y = f.forecast_raw(&x)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Score the model on one split of `data` (normalised units).
///
/// # Safety
/// `model` must be a live handle, `data` a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn msd_forecaster_evaluate(
    model: *const MsdForecaster,
    data: *const c_char,
    split: i32,
    out: *mut MsdEvalResult,
) -> MsdStatus {
    guard(|| {
        let f = handle(model)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let split = match split {
            MSD_SPLIT_TRAIN => Split::Train,
            MSD_SPLIT_VAL => Split::Val,
            MSD_SPLIT_TEST => Split::Test,
            other => return Err(invalid(format!("unknown split {other}"))),
        };
        let raw = str_arg(data, "data")?.parse::<DataSource>()?.load()?;
        let r = f.evaluate_split(raw, split)?;
        *out = MsdEvalResult {
            mse: r.mse,
            mae: r.mae,
            windows: r.windows,
        };
        Ok(())
    })
}

/// Top-`k` periods of a `len × channels` window. Each output array holds `k` entries.
///
/// # Safety
/// `x` must hold `len * channels` doubles; outputs must hold `k` entries each.
#[no_mangle]
pub unsafe extern "C" fn msd_spectral_profile(
    x: *const f64,
    len: usize,
    channels: usize,
    k: usize,
    frequencies: *mut usize,
    periods: *mut usize,
    amplitudes: *mut f64,
) -> MsdStatus {
    guard(|| {
        if x.is_null() || frequencies.is_null() || periods.is_null() || amplitudes.is_null() {
            return Err(null("buffer"));
        }
        if len == 0 || channels == 0 {
            return Err(invalid("window must be non-empty"));
        }
        let data = std::slice::from_raw_parts(x, len * channels).to_vec();
        let p = spectral::profile(&Tensor::new(&[len, channels], data)?, k)?;
        std::slice::from_raw_parts_mut(frequencies, k).copy_from_slice(&p.frequencies);
        std::slice::from_raw_parts_mut(periods, k).copy_from_slice(&p.periods);
        std::slice::from_raw_parts_mut(amplitudes, k).copy_from_slice(&p.amplitudes);
        Ok(())
    })
}

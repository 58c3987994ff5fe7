//! C ABI for featadapt.
//!
//! Handles are opaque (`FaModel *`) and owned by the caller once returned;
//! release them with `fa_model_free`. Every fallible call returns an
//! `FaStatus`; on failure `fa_last_error` yields a message for the calling
//! thread. Panics are caught at the boundary and reported as
//! `FA_STATUS_PANIC`.
//!
//! Handles are not synchronized: do not use one from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use featadapt::adapters::{self, AdapterKind, AdapterSpec};
use featadapt::eem::{self, OneDExperiment, OneDMode};
use featadapt::trainer::{self, Targets, TrainConfig, TrainData};
use featadapt::{checkpoint, metrics, models::Model, Error, Rng, Tensor};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Adapter = 4,
    Io = 5,
    Format = 6,
    Diverged = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaAdapterKind {
    FullFt = 0,
    LinearProbe = 1,
    Lora = 2,
    Lorfa = 3,
    Vefa = 4,
    InputShift = 5,
}

impl From<FaAdapterKind> for AdapterKind {
    fn from(k: FaAdapterKind) -> Self {
        match k {
            FaAdapterKind::FullFt => AdapterKind::FullFt,
            FaAdapterKind::LinearProbe => AdapterKind::LinearProbe,
            FaAdapterKind::Lora => AdapterKind::Lora,
            FaAdapterKind::Lorfa => AdapterKind::Lorfa,
            FaAdapterKind::Vefa => AdapterKind::Vefa,
            FaAdapterKind::InputShift => AdapterKind::InputShift,
        }
    }
}

/// Opaque model handle, with the adapter regime last attached.
pub struct FaModel {
    model: Model,
    spec: AdapterSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> FaStatus {
    match e {
        Error::Shape { .. } | Error::EmptyShape(_) | Error::DataLength { .. } => FaStatus::Shape,
        Error::Adapter(_) | Error::UnsupportedKind { .. } => FaStatus::Adapter,
        Error::Io { .. } => FaStatus::Io,
        Error::Format { .. } | Error::Json(_) => FaStatus::Format,
        Error::Diverged { .. } => FaStatus::Diverged,
        _ => FaStatus::InvalidArgument,
    }
}

struct Fail(FaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(FaStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic for `fa_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FaStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn handle<'a>(m: *const FaModel) -> Result<&'a FaModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn handle_mut<'a>(m: *mut FaModel) -> Result<&'a mut FaModel, Fail> {
    m.as_mut().ok_or_else(|| null("model"))
}

unsafe fn c_path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Fail(FaStatus::InvalidArgument, format!("path is not UTF-8: {e}")))?;
    Ok(PathBuf::from(s))
}

fn rank_of(kind: AdapterKind, rank: usize) -> Option<usize> {
    kind.is_rank_bearing().then_some(rank)
}

fn spec_for(kind: FaAdapterKind, rank: usize, seed: u64) -> Result<AdapterSpec, Fail> {
    let kind = AdapterKind::from(kind);
    let spec = AdapterSpec {
        rank: rank_of(kind, rank),
        seed,
        ..AdapterSpec::new(kind)
    };
    spec.validate()?;
    Ok(spec)
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a seeded ReLU MLP classifier `input -> hidden[..] -> classes`.
///
/// # Safety
/// `hidden` must point to `n_hidden` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_model_mlp(
    input: usize,
    hidden: *const usize,
    n_hidden: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut FaModel,
) -> FaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let hidden = slice(hidden, n_hidden, "hidden")?;
        let model = Model::mlp(input, hidden, classes, &mut Rng::new(seed))?;
        let boxed = Box::new(FaModel {
            model,
            spec: AdapterSpec::full_ft().with_seed(seed),
        });
        *out = Box::into_raw(boxed);
        Ok(())
    })
}

/// Loads a model checkpoint written by `fa_model_save` or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fa_model_load(path: *const c_char, out: *mut *mut FaModel) -> FaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, _) = checkpoint::load_model(&c_path(path)?)?;
        *out = Box::into_raw(Box::new(FaModel {
            model,
            spec: AdapterSpec::full_ft(),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fa_model_save(model: *const FaModel, path: *const c_char) -> FaStatus {
    guard(|| {
        checkpoint::save_model(&handle(model)?.model, &c_path(path)?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fa_model_free(model: *mut FaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `input`/`output` writable or null.
#[no_mangle]
pub unsafe extern "C" fn fa_model_dims(model: *const FaModel, input: *mut usize, output: *mut usize) -> FaStatus {
    guard(|| {
        let m = &handle(model)?.model;
        if let Some(i) = input.as_mut() {
            *i = m.input_dim();
        }
        if let Some(o) = output.as_mut() {
            *o = m.output_dim();
        }
        Ok(())
    })
}

/// Freezes the model and attaches a fresh zero-initialized adapter
/// (`rank` is ignored for kinds without one).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fa_model_attach(model: *mut FaModel, kind: FaAdapterKind, rank: usize, seed: u64) -> FaStatus {
    guard(|| {
        let h = handle_mut(model)?;
        let spec = spec_for(kind, rank, seed)?;
        adapters::attach(&mut h.model, &spec)?;
        h.spec = spec;
        Ok(())
    })
}

/// Number of scalars the optimizer would update.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fa_model_trainable_count(model: *const FaModel, out: *mut usize) -> FaStatus {
    guard(|| {
        let n = handle(model)?.model.trainable_parameters().1;
        *out.as_mut().ok_or_else(|| null("out"))? = n;
        Ok(())
    })
}

/// Row-major forward pass: `x` is `rows x input_dim`, `out` receives
/// `rows x output_dim` values.
///
/// # Safety
/// `x` must hold `rows * cols` values and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn fa_model_forward(
    model: *const FaModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> FaStatus {
    guard(|| {
        let m = &handle(model)?.model;
        let x = Tensor::new(rows, cols, slice(x, rows * cols, "x")?.to_vec())?;
        let y = m.forward(&x)?;
        if out_len < y.len() {
            return Err(Fail(
                FaStatus::BufferTooSmall,
                format!("output needs {} values, buffer holds {out_len}", y.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(y.data().as_ptr(), out, y.len());
        Ok(())
    })
}

/// Cross-entropy fine-tuning of the attached regime with AdamW.
/// `final_loss` (optional) receives the last epoch's mean loss.
///
/// # Safety
/// `x` must hold `rows * cols` values and `labels` `rows` values.
#[no_mangle]
pub unsafe extern "C" fn fa_model_fit(
    model: *mut FaModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    labels: *const usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    final_loss: *mut f64,
) -> FaStatus {
    guard(|| {
        let h = handle_mut(model)?;
        let x = Tensor::new(rows, cols, slice(x, rows * cols, "x")?.to_vec())?;
        let labels = slice(labels, rows, "labels")?.to_vec();
        let data = TrainData::new(x, Targets::Labels(labels))?;
        let cfg = TrainConfig {
            lr_adapter: lr,
            lr_head: lr,
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        let report = trainer::fit(&mut h.model, &h.spec, &data, &cfg)?;
        if let Some(l) = final_loss.as_mut() {
            *l = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Adapter parameter count over `n` target matrices of shape
/// `p[i] x q[i]`.
///
/// # Safety
/// `p` and `q` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fa_param_count(
    kind: FaAdapterKind,
    rank: usize,
    p: *const usize,
    q: *const usize,
    n: usize,
    out: *mut usize,
) -> FaStatus {
    guard(|| {
        let (p, q) = (slice(p, n, "p")?, slice(q, n, "q")?);
        let shapes: Vec<(usize, usize)> = p.iter().copied().zip(q.iter().copied()).collect();
        let kind = AdapterKind::from(kind);
        let count = adapters::param_count_for_shapes(kind, rank_of(kind, rank), &shapes)?;
        *out.as_mut().ok_or_else(|| null("out"))? = count;
        Ok(())
    })
}

/// Robustness margin: fine-tuned minus zero-shot metric.
#[no_mangle]
pub extern "C" fn fa_r1(metric_ft: f64, metric_zeroshot: f64) -> f64 {
    metrics::r1(metric_ft, metric_zeroshot)
}

/// Fits the 1-D reference problem (slope 5, four points) by gradient
/// descent; `feature_space` selects `5 (1 + d)` over `5 + d`. Writes the
/// fitted slope and the number of steps taken.
///
/// # Safety
/// `slope` and `steps` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn fa_oned_fit(
    feature_space: bool,
    lr: f64,
    max_steps: usize,
    slope: *mut f64,
    steps: *mut usize,
) -> FaStatus {
    guard(|| {
        let mode = if feature_space { OneDMode::FeatureSpace } else { OneDMode::WeightSpace };
        let exp = OneDExperiment {
            lr,
            steps: max_steps,
            ..OneDExperiment::reference(mode)
        };
        let trace = eem::run_1d(&exp)?;
        if let Some(s) = slope.as_mut() {
            *s = trace.fitted_slope(exp.pretrained_slope);
        }
        if let Some(n) = steps.as_mut() {
            *n = trace.steps.len() - 1;
        }
        Ok(())
    })
}

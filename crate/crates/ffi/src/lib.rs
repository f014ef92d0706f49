//! C ABI over the probadapt library.
//!
//! Objects are opaque handles created by `pa_*_new`/`pa_*_load` style calls
//! and released with the matching `pa_*_free`. Every fallible call returns a
//! [`PaStatus`]; on failure [`pa_last_error`] describes the problem for the
//! calling thread. Strings returned to the caller are freed with
//! [`pa_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use probadapt::adapters::{forward, predict, ModelConfig, ModelState};
use probadapt::evaluation::{energy_score, text_blocks};
use probadapt::feature_provider::{
    build_task_stream, load_feature_store, synth_stream, FeatureStore, SynthSpec, TaskStream,
};
use probadapt::rng::chacha;
use probadapt::trainer::{
    load_checkpoint, run_experiment, save_checkpoint, MemoryConfig, MetricsConfig, RunConfig,
    TrainConfig,
};
use probadapt::Error;
use serde::Deserialize;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Corrupt = 5,
    Shape = 6,
    Contract = 7,
    Panic = 8,
}

/// Feature store together with its task stream.
pub struct PaStore {
    store: FeatureStore,
    stream: TaskStream,
}

/// A trained or loaded model.
pub struct PaModel {
    state: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> PaStatus {
    match err {
        Error::Io { .. } => PaStatus::Io,
        Error::Corrupt { .. } | Error::NonFinite { .. } | Error::DimensionMismatch { .. } => {
            PaStatus::Corrupt
        }
        Error::Shape(_) => PaStatus::Shape,
        Error::Contract(_) => PaStatus::Contract,
        Error::InvalidArgument(_) => PaStatus::InvalidArgument,
        Error::Config(_) | Error::Manifest { .. } | Error::Json(_) => PaStatus::Config,
    }
}

struct Failure(PaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PaStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PaStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PaStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PaStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic store of `num_tasks × classes_per_task` classes.
///
/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn pa_store_synth(
    num_tasks: usize,
    classes_per_task: usize,
    samples_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    out: *mut *mut PaStore,
) -> PaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = SynthSpec {
            num_tasks,
            classes_per_task,
            samples_per_class,
            dim,
            cluster_spread: spread,
            seed,
            ..SynthSpec::default()
        };
        let (store, stream) = synth_stream(&spec)?;
        *out = Box::into_raw(Box::new(PaStore { store, stream }));
        Ok(())
    })
}

/// Loads a store directory and splits it into `num_tasks` tasks. Classes are
/// shuffled with `shuffle_seed` when `shuffle` is nonzero.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pa_store_load(
    path: *const c_char,
    num_tasks: usize,
    shuffle: i32,
    shuffle_seed: u64,
    out: *mut *mut PaStore,
) -> PaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let store = load_feature_store(path)?;
        let stream = build_task_stream(&store, num_tasks, (shuffle != 0).then_some(shuffle_seed))?;
        *out = Box::into_raw(Box::new(PaStore { store, stream }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pa_store_free(store: *mut PaStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Feature width, or 0 for NULL.
///
/// # Safety
/// `store` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_store_dim(store: *const PaStore) -> usize {
    store.as_ref().map_or(0, |s| s.store.dim)
}

/// # Safety
/// `store` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_store_num_tasks(store: *const PaStore) -> usize {
    store.as_ref().map_or(0, |s| s.stream.num_tasks())
}

/// # Safety
/// `store` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_store_num_classes(store: *const PaStore) -> usize {
    store.as_ref().map_or(0, |s| s.store.num_classes())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FfiRunConfig {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    memory: MemoryConfig,
    #[serde(default)]
    metrics: MetricsConfig,
}

/// Runs the full stream. `config_json` may be NULL for defaults or a JSON
/// object with optional `model`, `train`, `memory` and `metrics` sections.
/// On success `*out_model` receives the final model and, when
/// `out_results_json` is non-NULL, a JSON summary to free with
/// [`pa_string_free`].
///
/// # Safety
/// `store` must be a live handle, `config_json` NULL or NUL-terminated, and
/// the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn pa_run_experiment(
    store: *const PaStore,
    config_json: *const c_char,
    out_model: *mut *mut PaModel,
    out_results_json: *mut *mut c_char,
) -> PaStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        if out_model.is_null() {
            return Err(null("out_model"));
        }
        let parsed: FfiRunConfig = if config_json.is_null() {
            FfiRunConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Failure(PaStatus::InvalidArgument, "config is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Failure(PaStatus::Config, e.to_string()))?
        };
        let cfg = RunConfig {
            model: parsed
                .model
                .unwrap_or_else(|| ModelConfig::for_dim(s.store.dim)),
            train: parsed.train,
            memory: parsed.memory,
            metrics: parsed.metrics,
        };
        let outcome = run_experiment(&s.store, &s.stream, &cfg)?;
        if !out_results_json.is_null() {
            let summary = serde_json::json!({
                "accuracy_matrix": outcome.accuracy.rows,
                "metrics": outcome.metrics,
                "memory": outcome.memory,
            });
            let text = CString::new(summary.to_string()).expect("JSON has no NUL");
            *out_results_json = text.into_raw();
        }
        *out_model = Box::into_raw(Box::new(PaModel {
            state: outcome.state,
        }));
        Ok(())
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pa_model_load(path: *const c_char, out: *mut *mut PaModel) -> PaStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let state = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(PaModel { state }));
        Ok(())
    })
}

/// Writes a checkpoint directory.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pa_model_save(model: *const PaModel, path: *const c_char) -> PaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        save_checkpoint(&m.state, path)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pa_model_free(model: *mut PaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learned tasks, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_model_num_tasks(model: *const PaModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.adapters.len())
}

/// Number of output classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pa_model_num_classes(model: *const PaModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.num_classes())
}

/// Class probabilities averaged over `samples` draws for `n` row-major
/// feature vectors of width `dim`. Text features come from `store`'s first
/// `pa_model_num_tasks` tasks. `out_probs` holds `n × num_classes` floats;
/// `out_energy`, when non-NULL, receives `n` energy scores.
///
/// # Safety
/// Pointers must be live handles or buffers of the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn pa_model_predict(
    model: *const PaModel,
    store: *const PaStore,
    features: *const f32,
    n: usize,
    dim: usize,
    samples: usize,
    seed: u64,
    out_probs: *mut f32,
    out_energy: *mut f32,
) -> PaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        if dim != m.state.dim() {
            return Err(Failure(
                PaStatus::Shape,
                format!("features have width {dim}, model expects {}", m.state.dim()),
            ));
        }
        let tasks = m.state.adapters.len();
        if tasks == 0
            || tasks > s.stream.num_tasks()
            || m.state.task_sizes() != s.stream.task_sizes()[..tasks]
        {
            return Err(Failure(
                PaStatus::Shape,
                "model and store task layouts differ".into(),
            ));
        }
        let raw = std::slice::from_raw_parts(features, n * dim);
        let images = ndarray::Array2::from_shape_fn((n, dim), |(i, j)| f64::from(raw[i * dim + j]));
        let texts = text_blocks(&s.store, &s.stream, tasks);
        let out = forward(&m.state, images.view(), &texts, samples, &mut chacha(seed))?;
        let pred = predict(&out.logits);
        let c = m.state.num_classes();
        let probs = std::slice::from_raw_parts_mut(out_probs, n * c);
        for (dst, &p) in probs.iter_mut().zip(pred.mean_probs.iter()) {
            *dst = p as f32;
        }
        if !out_energy.is_null() {
            let mean = out
                .logits
                .mean_axis(ndarray::Axis(0))
                .expect("at least one sample");
            let e = energy_score(mean.view(), 1.0);
            let dst = std::slice::from_raw_parts_mut(out_energy, n);
            for (d, &v) in dst.iter_mut().zip(e.iter()) {
                *d = v as f32;
            }
        }
        Ok(())
    })
}

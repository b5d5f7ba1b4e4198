//! C interface to the aseer library.
//!
//! Datasets and trained models are exposed as opaque handles. Every
//! fallible function returns an [`AseerStatus`]; on failure the message of
//! the most recent error on the calling thread is available from
//! [`aseer_last_error_message`]. Handles are freed with their matching
//! `_free` function; passing NULL to a `_free` function is a no-op.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aseer::baselines::{HistoricalAverage, Last};
use aseer::config::Checkpoint;
use aseer::data::{self, build_graph, split_windows, window_at, DataFiles, Dataset, DiffusionGraph, SensorNode};
use aseer::eval::{evaluate, write_forecast_csv};
use aseer::metrics::MetricSet;
use aseer::model::Forecaster;
use aseer::synthgen::{self, Generated, ScenarioConfig};
use aseer::Error;

/// Result of every fallible call. The numeric values match the exit codes
/// of the command-line tool where they overlap.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AseerStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Divergence = 3,
    NullPointer = 4,
    Internal = 5,
}

/// Reference predictors available without a checkpoint.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AseerBaseline {
    Last = 0,
    HistoricalAverage = 1,
}

/// The six evaluation metrics; NaN marks a metric with nothing to average.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AseerMetrics {
    pub c_mae: f64,
    pub c_rmse: f64,
    pub c_mape: f64,
    pub f_mae: f64,
    pub f_rmse: f64,
    pub f_aae: f64,
    /// Windows evaluated.
    pub windows: usize,
}

/// Sensor data plus its diffusion graph.
pub struct AseerDataset {
    generated: Generated,
    graph: DiffusionGraph,
}

/// A trained model restored from a checkpoint.
pub struct AseerModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AseerStatus {
    match e.exit_code() {
        1 => AseerStatus::Usage,
        3 => AseerStatus::Divergence,
        _ => AseerStatus::Data,
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), AseerStatus>) -> AseerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AseerStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            AseerStatus::Internal
        }
    }
}

fn fail(e: Error) -> AseerStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> AseerStatus {
    set_error(format!("{what} is NULL"));
    AseerStatus::NullPointer
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, AseerStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error(format!("{what} is not valid UTF-8"));
            Err(AseerStatus::Usage)
        }
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, AseerStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

fn metrics_out(m: &MetricSet, windows: usize) -> AseerMetrics {
    let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
    AseerMetrics {
        c_mae: v(m.c_mae),
        c_rmse: v(m.c_rmse),
        c_mape: v(m.c_mape),
        f_mae: v(m.f_mae),
        f_rmse: v(m.f_rmse),
        f_aae: v(m.f_aae),
        windows,
    }
}

impl AseerDataset {
    fn new(generated: Generated, epsilon_km: f64) -> aseer::Result<Self> {
        let graph = build_graph(&generated.nodes, &generated.reachability, epsilon_km)?;
        let dataset = generated.dataset.aligned_to(&graph)?;
        Ok(Self {
            generated: Generated { dataset, ..generated },
            graph,
        })
    }

    fn dataset(&self) -> &Dataset {
        &self.generated.dataset
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aseer_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aseer_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulates a scenario. `scenario_json` may be NULL for the default scenario.
///
/// # Safety
/// `scenario_json` must be NULL or a NUL-terminated string; `out` must be a
/// valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn aseer_dataset_generate(
    scenario_json: *const c_char,
    days: u32,
    epsilon_km: f64,
    out: *mut *mut AseerDataset,
) -> AseerStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let scenario: ScenarioConfig = if scenario_json.is_null() {
            ScenarioConfig::default()
        } else {
            let text = CStr::from_ptr(scenario_json).to_str().map_err(|_| {
                set_error("scenario_json is not valid UTF-8".into());
                AseerStatus::Usage
            })?;
            serde_json::from_str(text).map_err(|e| fail(Error::Config(e.to_string())))?
        };
        if days == 0 {
            return Err(fail(Error::Config("days must be >= 1".into())));
        }
        let generated = synthgen::generate(&scenario, days).map_err(fail)?;
        let ds = AseerDataset::new(generated, epsilon_km).map_err(fail)?;
        *out = Box::into_raw(Box::new(ds));
        Ok(())
    })
}

/// Loads `dataset.csv`, `nodes.csv` and `reach.csv` from a directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseer_dataset_load(
    dir: *const c_char,
    epsilon_km: f64,
    out: *mut *mut AseerDataset,
) -> AseerStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = path_arg(dir, "dir")?;
        // validates and aligns the files
        data::load_dir(&dir, epsilon_km).map_err(fail)?;
        let dataset = Dataset::read_csv(&dir.join(DataFiles::DATASET)).map_err(fail)?;
        let nodes: Vec<SensorNode> = data::read_nodes_csv(&dir.join(DataFiles::NODES)).map_err(fail)?;
        let reachability: BTreeSet<(String, String)> =
            data::read_reach_csv(&dir.join(DataFiles::REACH)).map_err(fail)?;
        let ds = AseerDataset::new(
            Generated {
                dataset,
                nodes,
                reachability,
            },
            epsilon_km,
        )
        .map_err(fail)?;
        *out = Box::into_raw(Box::new(ds));
        Ok(())
    })
}

/// Writes the dataset files into `dir`, creating it if needed.
///
/// # Safety
/// `dataset` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aseer_dataset_export(dataset: *const AseerDataset, dir: *const c_char) -> AseerStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let dir = path_arg(dir, "dir")?;
        synthgen::export(&ds.generated, &dir).map_err(fail)
    })
}

/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseer_dataset_sensor_count(dataset: *const AseerDataset, out: *mut usize) -> AseerStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ds.dataset().len();
        Ok(())
    })
}

/// First and last recorded second of the dataset.
///
/// # Safety
/// `dataset` must be a live handle; `start` and `end` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseer_dataset_time_range(
    dataset: *const AseerDataset,
    start: *mut i64,
    end: *mut i64,
) -> AseerStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        if start.is_null() || end.is_null() {
            return Err(null("start/end"));
        }
        let (a, b) = ds
            .dataset()
            .time_range()
            .ok_or_else(|| fail(Error::Data("dataset has no cycles".into())))?;
        *start = a;
        *end = b;
        Ok(())
    })
}

/// # Safety
/// `dataset` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn aseer_dataset_free(dataset: *mut AseerDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Restores a model from a checkpoint file written by training.
///
/// # Safety
/// `checkpoint` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseer_model_load(checkpoint: *const c_char, out: *mut *mut AseerModel) -> AseerStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(checkpoint, "checkpoint")?;
        let checkpoint = Checkpoint::load(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(AseerModel { checkpoint }));
        Ok(())
    })
}

/// Slots the model emits per decoding step.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseer_model_step_size(model: *const AseerModel, out: *mut usize) -> AseerStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.checkpoint.model.xi();
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn aseer_model_free(model: *mut AseerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Forecasts the window whose history ends at `anchor` and writes the
/// forecast CSV to `out_csv`. `slots_out` (may be NULL) receives the number
/// of rows written.
///
/// # Safety
/// `model` and `dataset` must be live handles; `out_csv` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aseer_forecast(
    model: *const AseerModel,
    dataset: *const AseerDataset,
    anchor: i64,
    out_csv: *const c_char,
    slots_out: *mut usize,
) -> AseerStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = handle(dataset, "dataset")?;
        let path = path_arg(out_csv, "out_csv")?;
        let ck = &m.checkpoint;
        let inst = window_at(ds.dataset(), anchor, &ck.window);
        let fc = ck.model.predict(&inst, &ds.graph, false).map_err(fail)?;
        write_forecast_csv(&path, &ck.model.sensor_ids, &fc).map_err(fail)?;
        if !slots_out.is_null() {
            *slots_out = fc.iter().map(|f| f.slots.len()).sum();
        }
        Ok(())
    })
}

unsafe fn evaluate_with(
    forecaster: &dyn Forecaster,
    ds: &AseerDataset,
    window: data::WindowParams,
    out: *mut AseerMetrics,
) -> Result<(), AseerStatus> {
    if out.is_null() {
        return Err(null("out"));
    }
    let splits = split_windows(ds.dataset(), &window).map_err(fail)?;
    if splits.test.is_empty() {
        return Err(fail(Error::Data("no test windows in dataset".into())));
    }
    let s = evaluate(forecaster, &ds.graph, &splits.test).map_err(fail)?;
    *out = metrics_out(&s.metrics, s.windows);
    Ok(())
}

/// Metrics of a model on the test split (last 20% of the time range).
///
/// # Safety
/// `model` and `dataset` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseer_evaluate(
    model: *const AseerModel,
    dataset: *const AseerDataset,
    out: *mut AseerMetrics,
) -> AseerStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let ds = handle(dataset, "dataset")?;
        evaluate_with(&m.checkpoint.model, ds, m.checkpoint.window, out)
    })
}

/// Metrics of a parameter-free baseline on the test split with default
/// one-hour windows.
///
/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aseer_evaluate_baseline(
    dataset: *const AseerDataset,
    baseline: AseerBaseline,
    out: *mut AseerMetrics,
) -> AseerStatus {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let window = data::WindowParams::default();
        match baseline {
            AseerBaseline::Last => evaluate_with(&Last, ds, window, out),
            AseerBaseline::HistoricalAverage => evaluate_with(&HistoricalAverage, ds, window, out),
        }
    })
}

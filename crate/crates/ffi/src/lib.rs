//! C ABI over the `mmga` library.
//!
//! Every fallible function returns an [`MmgaStatus`]; on failure the message
//! is available from [`mmga_last_error`] on the same thread. Models and graphs
//! are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use mmga::classifier::{model_from_json, ClassifierModel};
use mmga::graph::ScanGraph;
use mmga::metrics::{iou_2d, roc_curve, ConfusionMatrix};
use mmga::soi::{extract_segment, moving_average};
use mmga::types::BoundingBox;
use mmga::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmgaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidInput = 3,
    Parse = 4,
    Io = 5,
    Validation = 6,
    Config = 7,
    NoFeasiblePoint = 8,
    ModelLoad = 9,
    Stage = 10,
    Utf8 = 11,
    Panic = 12,
}

impl From<&Error> for MmgaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) => MmgaStatus::InvalidInput,
            Error::InvalidArgument(_) => MmgaStatus::InvalidArgument,
            Error::Parse { .. } => MmgaStatus::Parse,
            Error::Validation { .. } => MmgaStatus::Validation,
            Error::Io { .. } => MmgaStatus::Io,
            Error::Config(_) => MmgaStatus::Config,
            Error::NoFeasiblePoint(_) => MmgaStatus::NoFeasiblePoint,
            Error::ModelLoad(_) => MmgaStatus::ModelLoad,
            Error::Stage { .. } => MmgaStatus::Stage,
        }
    }
}

/// Trained graph classifier.
pub struct MmgaModel(ClassifierModel);

/// Scan graph.
pub struct MmgaGraph(ScanGraph);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(MmgaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MmgaStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmgaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MmgaStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmgaStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(MmgaStatus::Utf8, format!("{what}: {e}")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn mmga_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Area under the ROC curve of `n` scores; `labels[i]` is nonzero for positives.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable elements; `auc` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    auc: *mut f64,
) -> MmgaStatus {
    guard(|| {
        let scores = input(scores, n, "scores")?;
        let labels = input(labels, n, "labels")?;
        let auc = out(auc, "auc")?;
        let pairs: Vec<(f64, bool)> = scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| (s, l != 0))
            .collect();
        *auc = roc_curve(&pairs)?.auc;
        Ok(())
    })
}

/// IoU of two boxes given as `[x_tl, y_tl, x_br, y_br]`.
///
/// # Safety
/// `a` and `b` must point to 4 readable values; `iou` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_iou_2d(a: *const f64, b: *const f64, iou: *mut f64) -> MmgaStatus {
    guard(|| {
        let bx = |p: &[f64]| BoundingBox::new(p[0], p[1], p[2], p[3]);
        let a = bx(input(a, 4, "a")?)?;
        let b = bx(input(b, 4, "b")?)?;
        *out(iou, "iou")? = iou_2d(&a, &b);
        Ok(())
    })
}

/// Centered moving average with an odd `window`, truncated at the edges.
///
/// # Safety
/// `signal` must point to `n` readable values and `smoothed` to `n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn mmga_moving_average(
    signal: *const f64,
    n: usize,
    window: usize,
    smoothed: *mut f64,
) -> MmgaStatus {
    guard(|| {
        let signal = input(signal, n, "signal")?;
        let ma = moving_average(signal, window)?;
        if n > 0 {
            if smoothed.is_null() {
                return Err(null("smoothed"));
            }
            slice::from_raw_parts_mut(smoothed, n).copy_from_slice(&ma);
        }
        Ok(())
    })
}

/// Slices of interest of a probability signal. `found` is set to 0 when no
/// smoothed value exceeds `threshold`, in which case `first` and `last` are
/// left untouched.
///
/// # Safety
/// `probs` must point to `n` readable values; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_extract_segment(
    probs: *const f64,
    n: usize,
    threshold: f64,
    window: usize,
    found: *mut u8,
    first: *mut usize,
    last: *mut usize,
) -> MmgaStatus {
    guard(|| {
        let probs = input(probs, n, "probs")?;
        let (found, first, last) = (out(found, "found")?, out(first, "first")?, out(last, "last")?);
        match extract_segment(probs, threshold, window)? {
            Some(seg) => {
                *found = 1;
                *first = seg.first;
                *last = seg.last;
            }
            None => *found = 0,
        }
        Ok(())
    })
}

/// `[ppv, npv, recall, f1]` from confusion counts; undefined ratios are NaN.
///
/// # Safety
/// `metrics` must point to 4 writable values.
#[no_mangle]
pub unsafe extern "C" fn mmga_confusion_metrics(
    tp: u64,
    fn_: u64,
    tn: u64,
    fp: u64,
    metrics: *mut f64,
) -> MmgaStatus {
    guard(|| {
        if metrics.is_null() {
            return Err(null("metrics"));
        }
        let cm = ConfusionMatrix::new(tp, fn_, tn, fp);
        let vals = [cm.precision(), cm.npv(), cm.recall(), cm.f1()]
            .map(|r| if r.degenerate { f64::NAN } else { r.value });
        slice::from_raw_parts_mut(metrics, 4).copy_from_slice(&vals);
        Ok(())
    })
}

/// Load a model file written by the `train` stage.
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_model_load(path: *const c_char, model: *mut *mut MmgaModel) -> MmgaStatus {
    guard(|| {
        let path = text(path, "path")?;
        let slot = out(model, "model")?;
        let m = mmga::classifier::load_model(Path::new(path))?;
        *slot = Box::into_raw(Box::new(MmgaModel(m)));
        Ok(())
    })
}

/// Parse a model from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_model_from_json(json: *const c_char, model: *mut *mut MmgaModel) -> MmgaStatus {
    guard(|| {
        let json = text(json, "json")?;
        let slot = out(model, "model")?;
        *slot = Box::into_raw(Box::new(MmgaModel(model_from_json(json)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmga_model_free(model: *mut MmgaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Parse one graph from its JSON text, as written by the `graphs` stage.
///
/// # Safety
/// `json` must be a NUL-terminated string; `graph` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_graph_from_json(json: *const c_char, graph: *mut *mut MmgaGraph) -> MmgaStatus {
    guard(|| {
        let json = text(json, "json")?;
        let slot = out(graph, "graph")?;
        let g: ScanGraph = serde_json::from_str(json)
            .map_err(|e| Failure(MmgaStatus::Parse, format!("graph: {e}")))?;
        g.validate()?;
        *slot = Box::into_raw(Box::new(MmgaGraph(g)));
        Ok(())
    })
}

/// # Safety
/// `graph` must be a live handle; `nodes` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_graph_num_nodes(graph: *const MmgaGraph, nodes: *mut usize) -> MmgaStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        *out(nodes, "nodes")? = g.0.num_nodes();
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmga_graph_free(graph: *mut MmgaGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Eval-mode abnormality probability of one graph.
///
/// # Safety
/// `model` and `graph` must be live handles; `probability` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmga_model_predict(
    model: *const MmgaModel,
    graph: *const MmgaGraph,
    probability: *mut f64,
) -> MmgaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        *out(probability, "probability")? = m.0.predict(&g.0)?;
        Ok(())
    })
}

//! C ABI over the pruning toolkit.
//!
//! Every function returns a [`PkStatus`]; on failure the message is available
//! from [`pk_last_error_message`] on the same thread. Objects are opaque
//! handles released with their matching `*_free` function, strings with
//! [`pk_string_free`] and byte buffers with [`pk_bytes_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prunekit::deps::{compute_dependencies, ResidualPolicy};
use prunekit::fixtures::{self, FixtureSize};
use prunekit::ir::{canonical_json, count_ops, count_params};
use prunekit::prune::{build_plan, score_filters, shrink_graph, transfer_weights, PrunePlan, RankingScope};
use prunekit::runtime::{decode_weights, encode_weights, forward, init_weights, Mode};
use prunekit::{parse_model, serialize_model, Error, ModelGraph, Tensor, WeightStore};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Schema = 3,
    Validation = 4,
    Shape = 5,
    Dependency = 6,
    MissingWeight = 7,
    ShapeMismatch = 8,
    InfeasibleTarget = 9,
    NonFinite = 10,
    Format = 11,
    Config = 12,
    Io = 13,
    Other = 14,
    Panic = 15,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkScope {
    Global = 0,
    PerLayer = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkResidualPolicy {
    TieGroup = 0,
    SkipFinal = 1,
}

/// A validated model graph.
pub struct PkModel {
    graph: ModelGraph,
}

/// Named f32 tensors.
pub struct PkWeights {
    store: WeightStore,
}

/// A pruning plan.
pub struct PkPlan {
    plan: PrunePlan,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PkStatus {
    match e {
        Error::Schema(_) => PkStatus::Schema,
        Error::Validation { .. } => PkStatus::Validation,
        Error::Shape { .. } => PkStatus::Shape,
        Error::Dependency { .. } => PkStatus::Dependency,
        Error::MissingWeight(_) => PkStatus::MissingWeight,
        Error::ShapeMismatch { .. } => PkStatus::ShapeMismatch,
        Error::InfeasibleTarget { .. } => PkStatus::InfeasibleTarget,
        Error::NonFinite { .. } => PkStatus::NonFinite,
        Error::Format { .. } => PkStatus::Format,
        Error::Config(_) => PkStatus::Config,
        Error::Io { .. } => PkStatus::Io,
        _ => PkStatus::Other,
    }
}

enum Fail {
    Null(&'static str),
    Utf8,
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PkStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PkStatus::NullPointer
        }
        Ok(Err(Fail::Utf8)) => {
            set_error("string is not valid UTF-8".into());
            PkStatus::InvalidUtf8
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(format!("{}: {e}", e.kind()));
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PkStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8)
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = CString::new(s).map_err(|_| Fail::Utf8)?.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `data`/`len` must be a buffer returned by [`pk_weights_encode`].
#[no_mangle]
pub unsafe extern "C" fn pk_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Vec::from_raw_parts(data, len, len));
    }
}

/// Parses a model IR document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_parse(json: *const c_char, out: *mut *mut PkModel) -> PkStatus {
    guard(|| {
        let graph = parse_model(str_arg(json, "json")?)?;
        put(out, PkModel { graph }, "out")
    })
}

/// Builds a bundled fixture (`tiny-alexnet`, `tiny-resnet`,
/// `tiny-mobilenetv2`, `tiny-squeezenet`).
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_fixture(
    name: *const c_char,
    resolution: usize,
    width: usize,
    num_classes: usize,
    out: *mut *mut PkModel,
) -> PkStatus {
    guard(|| {
        let size = FixtureSize {
            resolution,
            width,
            num_classes,
        };
        let graph = fixtures::by_name(str_arg(name, "name")?, size)?;
        put(out, PkModel { graph }, "out")
    })
}

/// Canonical serialization; free the result with [`pk_string_free`].
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_serialize(model: *const PkModel, out: *mut *mut c_char) -> PkStatus {
    guard(|| put_string(out, serialize_model(&ref_arg(model, "model")?.graph)))
}

/// Total parameters and operations (2 per multiply-accumulate).
///
/// # Safety
/// `model` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pk_model_cost(model: *const PkModel, params: *mut u64, ops: *mut u64) -> PkStatus {
    guard(|| {
        let g = &ref_arg(model, "model")?.graph;
        if params.is_null() || ops.is_null() {
            return Err(Fail::Null("params/ops"));
        }
        *params = count_params(g).total_params;
        *ops = count_ops(g).total_ops;
        Ok(())
    })
}

/// Number of input floats per sample and logits per sample.
///
/// # Safety
/// `model` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pk_model_io_sizes(model: *const PkModel, input: *mut usize, classes: *mut usize) -> PkStatus {
    guard(|| {
        let g = &ref_arg(model, "model")?.graph;
        if input.is_null() || classes.is_null() {
            return Err(Fail::Null("input/classes"));
        }
        *input = g.input_shape().numel();
        *classes = g.num_classes();
        Ok(())
    })
}

fn policy(p: PkResidualPolicy) -> ResidualPolicy {
    match p {
        PkResidualPolicy::TieGroup => ResidualPolicy::TieGroup,
        PkResidualPolicy::SkipFinal => ResidualPolicy::SkipFinal,
    }
}

/// Dependency report as a JSON document.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_analyze(
    model: *const PkModel,
    residual_policy: PkResidualPolicy,
    out: *mut *mut c_char,
) -> PkStatus {
    guard(|| {
        let deps = compute_dependencies(&ref_arg(model, "model")?.graph, policy(residual_policy))?;
        put_string(out, canonical_json(&deps.report()))
    })
}

/// # Safety
/// `model` must be a handle from this library, or NULL.
#[no_mangle]
pub unsafe extern "C" fn pk_model_free(model: *mut PkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Seeded initialization for `model`.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_weights_init(model: *const PkModel, seed: u64, out: *mut *mut PkWeights) -> PkStatus {
    guard(|| {
        let store = init_weights(&ref_arg(model, "model")?.graph, seed);
        put(out, PkWeights { store }, "out")
    })
}

/// Decodes a weight container.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_weights_decode(data: *const u8, len: usize, out: *mut *mut PkWeights) -> PkStatus {
    guard(|| {
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let store = decode_weights(std::slice::from_raw_parts(data, len))?;
        put(out, PkWeights { store }, "out")
    })
}

/// Encodes a weight container; free with [`pk_bytes_free`].
///
/// # Safety
/// `weights` must be a live handle; outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pk_weights_encode(weights: *const PkWeights, data: *mut *mut u8, len: *mut usize) -> PkStatus {
    guard(|| {
        let ws = ref_arg(weights, "weights")?;
        if data.is_null() || len.is_null() {
            return Err(Fail::Null("data/len"));
        }
        let bytes = encode_weights(&ws.store).into_boxed_slice();
        *len = bytes.len();
        *data = Box::into_raw(bytes) as *mut u8;
        Ok(())
    })
}

/// # Safety
/// `weights` must be a handle from this library, or NULL.
#[no_mangle]
pub unsafe extern "C" fn pk_weights_free(weights: *mut PkWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// L1-ranked, dependency-respecting plan reaching `level` percent of
/// parameter memory.
///
/// # Safety
/// `model` and `weights` must be live handles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_plan_build(
    model: *const PkModel,
    weights: *const PkWeights,
    level: f64,
    scope: PkScope,
    residual_policy: PkResidualPolicy,
    out: *mut *mut PkPlan,
) -> PkStatus {
    guard(|| {
        let g = &ref_arg(model, "model")?.graph;
        let ws = &ref_arg(weights, "weights")?.store;
        ws.check_against(g)?;
        let deps = compute_dependencies(g, policy(residual_policy))?;
        let scores = score_filters(g, ws, &deps)?;
        let scope = match scope {
            PkScope::Global => RankingScope::Global,
            PkScope::PerLayer => RankingScope::PerLayer,
        };
        let plan = build_plan(g, &deps, &scores, level, scope)?;
        put(out, PkPlan { plan }, "out")
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_plan_from_json(json: *const c_char, out: *mut *mut PkPlan) -> PkStatus {
    guard(|| {
        let plan = PrunePlan::from_json(str_arg(json, "json")?)?;
        put(out, PkPlan { plan }, "out")
    })
}

/// # Safety
/// `plan` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_plan_to_json(plan: *const PkPlan, out: *mut *mut c_char) -> PkStatus {
    guard(|| put_string(out, ref_arg(plan, "plan")?.plan.to_json()))
}

/// # Safety
/// `plan` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_plan_achieved_level(plan: *const PkPlan, out: *mut f64) -> PkStatus {
    guard(|| {
        let p = ref_arg(plan, "plan")?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = p.plan.achieved_level;
        Ok(())
    })
}

/// # Safety
/// `plan` must be a handle from this library, or NULL.
#[no_mangle]
pub unsafe extern "C" fn pk_plan_free(plan: *mut PkPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Physically removes the planned filters. `weights` and `out_weights` may
/// both be NULL to shrink the graph only.
///
/// # Safety
/// Non-NULL handles must be live; `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_shrink(
    model: *const PkModel,
    weights: *const PkWeights,
    plan: *const PkPlan,
    out_model: *mut *mut PkModel,
    out_weights: *mut *mut PkWeights,
) -> PkStatus {
    guard(|| {
        let g = &ref_arg(model, "model")?.graph;
        let p = &ref_arg(plan, "plan")?.plan;
        if out_model.is_null() {
            return Err(Fail::Null("out_model"));
        }
        let (shrunk, remap) = shrink_graph(g, p)?;
        let moved = match weights.as_ref() {
            Some(ws) => {
                if out_weights.is_null() {
                    return Err(Fail::Null("out_weights"));
                }
                Some(transfer_weights(&ws.store, &remap, &shrunk)?)
            }
            None => None,
        };
        put(out_model, PkModel { graph: shrunk }, "out_model")?;
        if let Some(store) = moved {
            put(out_weights, PkWeights { store }, "out_weights")?;
        }
        Ok(())
    })
}

/// Eval-mode forward pass. `input` holds `batch` samples in channel-major
/// layout; `logits` receives `batch * num_classes` values.
///
/// # Safety
/// Handles must be live; `input` and `logits` must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn pk_forward(
    model: *const PkModel,
    weights: *const PkWeights,
    input: *const f32,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> PkStatus {
    guard(|| {
        let g = &ref_arg(model, "model")?.graph;
        let ws = &ref_arg(weights, "weights")?.store;
        if input.is_null() || logits.is_null() {
            return Err(Fail::Null("input/logits"));
        }
        let per = g.input_shape().numel();
        if logits_len != batch * g.num_classes() {
            return Err(Error::ShapeMismatch {
                name: "logits".into(),
                expected: vec![batch, g.num_classes()],
                found: vec![logits_len],
            }
            .into());
        }
        let mut dims = vec![batch];
        dims.extend_from_slice(g.input_shape().dims());
        let x = Tensor::new(dims, std::slice::from_raw_parts(input, batch * per).to_vec())?;
        let y = forward(g, ws, &x, Mode::Eval)?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(y.data());
        Ok(())
    })
}

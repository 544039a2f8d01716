//! C ABI over the promptsci core.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Strings returned through `char**`
//! out-parameters are NUL-terminated UTF-8 and must be released with
//! [`ps_string_free`]. Every fallible call returns a [`PsStatus`]; on
//! failure [`ps_last_error`] describes the most recent error on the calling
//! thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use promptsci::audit::{self, AuditBundle};
use promptsci::metrics::{
    cohens_kappa, krippendorff_alpha, percent_agreement, Coefficient, Distance, LabelMatrix, MetricsError, Rater,
    ScaleDescriptor, ScaleKind,
};
use promptsci::simulation::{bundled, simulate, SimulationFixture};

/// Result codes shared by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The coefficient is undefined for this data (for example, no variation).
    Undefined = 3,
    /// The matrix has no item with two or more labels.
    EmptyMatrix = 4,
    /// Input could not be parsed as a bundle or fixture.
    Malformed = 5,
    /// The simulation realized a different trajectory than its fixture expects.
    Deviation = 6,
    /// The bundle has violations or otherwise refuses to render.
    Violations = 7,
    Internal = 99,
}

/// An items × raters matrix of category indices.
pub struct PsLabelMatrix {
    inner: LabelMatrix,
}

/// A parsed or freshly exported audit bundle.
pub struct PsBundle {
    inner: AuditBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("NULs removed"));
}

fn fail(status: PsStatus, msg: impl Into<String>) -> PsStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> PsStatus) -> PsStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(PsStatus::Internal, "panic inside promptsci"))
}

fn metrics_status(e: MetricsError) -> PsStatus {
    let status = match e {
        MetricsError::EmptyMatrix => PsStatus::EmptyMatrix,
        _ => PsStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PsStatus> {
    if p.is_null() {
        return Err(fail(PsStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> PsStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            PsStatus::Ok
        }
        Err(_) => fail(PsStatus::Internal, "string contains NUL"),
    }
}

/// Message for the last failed call on this thread; empty when none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an empty matrix over categories `0..n_categories`. `ordinal`
/// non-zero ranks categories by index. Returns NULL on invalid sizes.
#[no_mangle]
pub extern "C" fn ps_matrix_new(n_items: usize, n_raters: usize, n_categories: usize, ordinal: i32) -> *mut PsLabelMatrix {
    let built = catch_unwind(|| {
        if n_categories == 0 {
            return Err(MetricsError::InvalidScale("at least one category is required".into()));
        }
        let kind = if ordinal != 0 { ScaleKind::Ordinal } else { ScaleKind::Nominal };
        let scale = ScaleDescriptor::new(kind, (0..n_categories).map(|c| c.to_string()), Vec::<String>::new())?;
        let items = (0..n_items).map(|i| format!("i{i}")).collect();
        let raters = (0..n_raters).map(|r| Rater::human(format!("r{r}"))).collect();
        LabelMatrix::new(items, raters, scale)
    });
    match built {
        Ok(Ok(inner)) => Box::into_raw(Box::new(PsLabelMatrix { inner })),
        Ok(Err(e)) => {
            set_error(e.to_string());
            ptr::null_mut()
        }
        Err(_) => {
            set_error("panic inside promptsci");
            ptr::null_mut()
        }
    }
}

/// Sets one cell; `category < 0` leaves it missing.
///
/// # Safety
/// `matrix` must be a live handle from [`ps_matrix_new`].
#[no_mangle]
pub unsafe extern "C" fn ps_matrix_set(matrix: *mut PsLabelMatrix, item: usize, rater: usize, category: i32) -> PsStatus {
    guard(|| {
        let Some(m) = matrix.as_mut() else {
            return fail(PsStatus::NullPointer, "matrix is NULL");
        };
        if category < 0 {
            return PsStatus::Ok;
        }
        let (Some(item_id), Some(rater_id)) =
            (m.inner.items().get(item).cloned(), m.inner.raters().get(rater).map(|r| r.id.clone()))
        else {
            return fail(PsStatus::InvalidArgument, format!("cell ({item}, {rater}) is out of range"));
        };
        match m.inner.set(&item_id, &rater_id, &category.to_string()) {
            Ok(()) => PsStatus::Ok,
            Err(e) => metrics_status(e),
        }
    })
}

/// # Safety
/// `matrix` must be NULL or a live handle from [`ps_matrix_new`].
#[no_mangle]
pub unsafe extern "C" fn ps_matrix_free(matrix: *mut PsLabelMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

unsafe fn coefficient(
    matrix: *const PsLabelMatrix,
    out: *mut f64,
    f: impl FnOnce(&LabelMatrix) -> Result<Coefficient, MetricsError>,
) -> PsStatus {
    guard(|| {
        let Some(m) = matrix.as_ref() else {
            return fail(PsStatus::NullPointer, "matrix is NULL");
        };
        if out.is_null() {
            return fail(PsStatus::NullPointer, "out is NULL");
        }
        match f(&m.inner) {
            Ok(Coefficient::Defined { value }) => {
                *out = value;
                PsStatus::Ok
            }
            Ok(Coefficient::Undefined { reason }) => fail(PsStatus::Undefined, reason),
            Err(e) => metrics_status(e),
        }
    })
}

/// Cohen's kappa; the matrix must have exactly two raters.
///
/// # Safety
/// `matrix` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn ps_cohens_kappa(matrix: *const PsLabelMatrix, out: *mut f64) -> PsStatus {
    coefficient(matrix, out, cohens_kappa)
}

/// Krippendorff's alpha with nominal or, for ordinal matrices, ordinal distance.
///
/// # Safety
/// `matrix` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn ps_krippendorff_alpha(matrix: *const PsLabelMatrix, out: *mut f64) -> PsStatus {
    coefficient(matrix, out, |m| {
        let distance = if m.scale().kind() == ScaleKind::Ordinal { Distance::Ordinal } else { Distance::Nominal };
        krippendorff_alpha(m, distance)
    })
}

/// Mean pairwise percent agreement.
///
/// # Safety
/// `matrix` must be a live handle; `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn ps_percent_agreement(matrix: *const PsLabelMatrix, out: *mut f64) -> PsStatus {
    coefficient(matrix, out, |m| percent_agreement(m).map(|value| Coefficient::Defined { value }))
}

/// Runs a simulation in replay mode and exports its audit bundle.
///
/// `fixture` is a bundled fixture name or a fixture JSON document.
/// `seed` overrides the fixture seed when `use_seed` is non-zero. On a
/// trajectory deviation the bundle is still returned, with status
/// `Deviation`.
///
/// # Safety
/// `fixture` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_simulate(fixture: *const c_char, seed: u64, use_seed: i32, out: *mut *mut PsBundle) -> PsStatus {
    guard(|| {
        let text = match str_arg(fixture, "fixture") {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(PsStatus::NullPointer, "out is NULL");
        }
        let fixture: SimulationFixture = match bundled(text) {
            Ok(f) => f,
            Err(_) => match serde_json::from_str(text) {
                Ok(f) => f,
                Err(e) => return fail(PsStatus::Malformed, format!("fixture: {e}")),
            },
        };
        let outcome = match simulate(&fixture, (use_seed != 0).then_some(seed)) {
            Ok(o) => o,
            Err(e) => return fail(PsStatus::InvalidArgument, e.to_string()),
        };
        *out = Box::into_raw(Box::new(PsBundle { inner: audit::export(&outcome.engine) }));
        if outcome.ok() {
            PsStatus::Ok
        } else {
            let list: Vec<String> = outcome.deviations.iter().map(ToString::to_string).collect();
            fail(PsStatus::Deviation, list.join("; "))
        }
    })
}

/// Parses a serialized audit bundle.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_parse(json: *const c_char, out: *mut *mut PsBundle) -> PsStatus {
    guard(|| {
        let text = match str_arg(json, "json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(PsStatus::NullPointer, "out is NULL");
        }
        match AuditBundle::from_json(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PsBundle { inner }));
                PsStatus::Ok
            }
            Err(e) => fail(PsStatus::Malformed, e.to_string()),
        }
    })
}

/// Serializes a bundle to its canonical JSON text.
///
/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_to_json(bundle: *const PsBundle, out: *mut *mut c_char) -> PsStatus {
    guard(|| match (bundle.as_ref(), out.is_null()) {
        (Some(b), false) => put_string(out, b.inner.to_json()),
        _ => fail(PsStatus::NullPointer, "bundle or out is NULL"),
    })
}

/// Verifies a bundle. Writes the violation count and, when `violations` is
/// not NULL, a JSON array of violation messages. Returns `Violations` when
/// the count is non-zero.
///
/// # Safety
/// `bundle` must be a live handle; `count` must be writable; `violations`
/// may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_verify(bundle: *const PsBundle, count: *mut usize, violations: *mut *mut c_char) -> PsStatus {
    guard(|| {
        let (Some(b), false) = (bundle.as_ref(), count.is_null()) else {
            return fail(PsStatus::NullPointer, "bundle or count is NULL");
        };
        let found: Vec<String> = audit::verify(&b.inner).iter().map(ToString::to_string).collect();
        *count = found.len();
        if !violations.is_null() {
            let status = put_string(violations, serde_json::to_string(&found).expect("strings serialize"));
            if status != PsStatus::Ok {
                return status;
            }
        }
        if found.is_empty() {
            PsStatus::Ok
        } else {
            fail(PsStatus::Violations, format!("{} violations", found.len()))
        }
    })
}

/// Renders the markdown report; refuses bundles with violations.
///
/// # Safety
/// `bundle` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_report(bundle: *const PsBundle, out: *mut *mut c_char) -> PsStatus {
    guard(|| {
        let (Some(b), false) = (bundle.as_ref(), out.is_null()) else {
            return fail(PsStatus::NullPointer, "bundle or out is NULL");
        };
        match audit::render_report(&b.inner) {
            Ok(md) => put_string(out, md),
            Err(e) => fail(PsStatus::Violations, e.to_string()),
        }
    })
}

/// # Safety
/// `bundle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_bundle_free(bundle: *mut PsBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

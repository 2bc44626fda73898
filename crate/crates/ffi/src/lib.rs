//! C ABI over trained SelfGNN checkpoints.
//!
//! A model is opened from a checkpoint and the run configuration that
//! produced it, then queried for scores, top-k recommendations and test
//! metrics. Every function returns an [`SgStatus`]; on failure the message
//! is available from [`sg_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use selfgnn::cli::{restore, RunConfig};
use selfgnn::data::{SplitDataset, UserItemIndex};
use selfgnn::eval::{metrics_from_ranks, rank_users, Target};
use selfgnn::{Embeddings, Error};

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    Format = 4,
    Io = 5,
    Runtime = 6,
    Panic = 7,
}

/// Opaque handle to a loaded model and its dataset.
pub struct SgModel {
    emb: Embeddings,
    index: UserItemIndex,
    split: SplitDataset,
    users: usize,
    items: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure {
    status: SgStatus,
    message: String,
}

fn failure(status: SgStatus, message: String) -> Failure {
    Failure { status, message }
}

fn status_of(e: &Error) -> SgStatus {
    match e {
        Error::MissingCheckpoint(_) => SgStatus::NotFound,
        Error::Format(_) | Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => SgStatus::Format,
        Error::Io(_) => SgStatus::Io,
        Error::Config(_) | Error::UnknownVariant(_) | Error::Shape(_) => SgStatus::InvalidArgument,
        _ => SgStatus::Runtime,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        failure(status_of(&e), e.to_string())
    }
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = text);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SgStatus::Ok,
        Ok(Err(f)) => {
            set_error(&f.message);
            f.status
        }
        Err(_) => {
            set_error("internal panic");
            SgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    failure(SgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<Option<PathBuf>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| failure(SgStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(Some(PathBuf::from(s)))
}

unsafe fn model_ref<'a>(model: *const SgModel) -> Result<&'a SgModel, Failure> {
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

impl SgModel {
    fn check_user(&self, user: usize) -> Result<(), Failure> {
        if user >= self.users {
            return Err(failure(SgStatus::InvalidArgument, format!("user {user} out of range ({} users)", self.users)));
        }
        Ok(())
    }

    fn check_item(&self, item: usize) -> Result<(), Failure> {
        if item >= self.items {
            return Err(failure(SgStatus::InvalidArgument, format!("item {item} out of range ({} items)", self.items)));
        }
        Ok(())
    }
}

/// Loads `checkpoint` and rebuilds the dataset it was trained on from the
/// JSON run configuration at `config` (as echoed by the CLI). A null
/// `config` uses the built-in defaults. On success `*out` owns a handle to
/// release with [`sg_model_free`].
///
/// # Safety
/// `checkpoint` and `config` must be null or NUL-terminated strings; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_open(
    checkpoint: *const c_char,
    config: *const c_char,
    out: *mut *mut SgModel,
) -> SgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = ptr::null_mut() };
        let ckpt_path = unsafe { path_arg(checkpoint, "checkpoint") }?.ok_or_else(|| null("checkpoint"))?;
        let cfg = match unsafe { path_arg(config, "config") }? {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(Error::from)?;
                serde_json::from_str::<RunConfig>(&text).map_err(Error::from)?
            }
            None => RunConfig::default(),
        };
        let (ckpt, prep, views) = restore(&cfg, &ckpt_path)?;
        let emb = ckpt.model.embed(&views.graphs, &views.sequences)?;
        let model = SgModel {
            emb,
            index: UserItemIndex::new(&prep.split.train),
            users: ckpt.model.users,
            items: ckpt.model.items,
            split: prep.split,
        };
        unsafe { *out = Box::into_raw(Box::new(model)) };
        Ok(())
    })
}

/// Releases a handle from [`sg_model_open`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sg_model_free(model: *mut SgModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of users and items the model covers.
///
/// # Safety
/// `model` must be a live handle; `users` and `items` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sg_model_counts(model: *const SgModel, users: *mut usize, items: *mut usize) -> SgStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        if users.is_null() || items.is_null() {
            return Err(null("output"));
        }
        unsafe {
            *users = m.users;
            *items = m.items;
        }
        Ok(())
    })
}

/// Preference score of `user` for `item`.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_model_score(model: *const SgModel, user: usize, item: usize, out: *mut f64) -> SgStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        m.check_user(user)?;
        m.check_item(item)?;
        unsafe { *out = m.emb.score(user, item) };
        Ok(())
    })
}

/// Writes the `k` highest-scoring items for `user` (ties to the lower id)
/// into `items_out` and `scores_out`, both of capacity `k`, and their
/// count into `*written`. With `exclude_train`, items the user interacted
/// with in training are skipped.
///
/// # Safety
/// `model` must be a live handle; the output arrays must hold `k` elements.
#[no_mangle]
pub unsafe extern "C" fn sg_model_top_k(
    model: *const SgModel,
    user: usize,
    k: usize,
    exclude_train: bool,
    items_out: *mut usize,
    scores_out: *mut f64,
    written: *mut usize,
) -> SgStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        if written.is_null() || (k > 0 && (items_out.is_null() || scores_out.is_null())) {
            return Err(null("output"));
        }
        m.check_user(user)?;
        let mut ranked: Vec<(usize, f64)> = (0..m.items)
            .filter(|&i| !(exclude_train && m.index.contains(user, i)))
            .map(|i| (i, m.emb.score(user, i)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        for (slot, (item, score)) in ranked.iter().enumerate() {
            unsafe {
                *items_out.add(slot) = *item;
                *scores_out.add(slot) = *score;
            }
        }
        unsafe { *written = ranked.len() };
        Ok(())
    })
}

/// HR@n and NDCG@n over the test users of the model's split.
///
/// # Safety
/// `model` must be a live handle; `hr` and `ndcg` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sg_model_evaluate(model: *const SgModel, n: usize, hr: *mut f64, ndcg: *mut f64) -> SgStatus {
    guard(|| {
        let m = unsafe { model_ref(model) }?;
        if hr.is_null() || ndcg.is_null() {
            return Err(null("output"));
        }
        let ranks: Vec<usize> = rank_users(&m.emb, &m.split, Target::Test)?.iter().map(|l| l.rank).collect();
        let metrics = metrics_from_ranks(&ranks, &[n])?;
        unsafe {
            *hr = metrics[&format!("hr{n}")];
            *ndcg = metrics[&format!("ndcg{n}")];
        }
        Ok(())
    })
}

/// Message of the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn sg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

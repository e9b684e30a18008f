//! C ABI over a trained poserec checkpoint.
//!
//! A [`PoserecEngine`] owns a model and its precomputed item index. Every
//! fallible call returns a [`PoserecStatus`]; on failure the message is
//! available from [`poserec_last_error`] on the same thread until the next
//! failing call. Pose input is `n_frames × 33 × 4` doubles, row-major
//! (x, y, z, visibility per landmark).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use poserec::checkpoint::Checkpoint;
use poserec::dataio::load_items;
use poserec::evaluator::{build_item_index, rank, ItemIndex};
use poserec::item_encoder::ItemRecord;
use poserec::model::PoseRecModel;
use poserec::numerics::Tensor;
use poserec::pose_encoder::{PoseTrajectory, LANDMARKS, POSE_CHANNELS};
use poserec::trainer::{item_catalog, sliding_windows};
use poserec::Error;

/// Doubles per frame: 33 landmarks × 4 channels.
pub const POSEREC_FRAME_LEN: usize = 132;

const _: () = assert!(POSEREC_FRAME_LEN == LANDMARKS * POSE_CHANNELS);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoserecStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Bad argument value, e.g. zero `top` or non-UTF-8 text.
    InvalidArgument = 2,
    /// The output buffer is too small; the needed size was reported.
    BufferTooSmall = 3,
    /// File could not be read.
    Io = 4,
    /// Malformed checkpoint or item file.
    Format = 5,
    /// Valid syntax but inconsistent content (shape mismatch, unknown id, too few frames).
    Data = 6,
    /// Degenerate vectors or other numerical failure.
    Numerical = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Opaque model plus item index.
pub struct PoserecEngine {
    model: PoseRecModel,
    index: ItemIndex,
    window_step: usize,
}

// Read-only after open, so callers may share one engine across threads.
const _: fn() = || {
    fn sync<T: Send + Sync>() {}
    sync::<PoserecEngine>();
};

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PoserecStatus {
    match e {
        Error::Io { .. } => PoserecStatus::Io,
        Error::Format { .. } => PoserecStatus::Format,
        Error::Usage(_) | Error::Config(_) => PoserecStatus::InvalidArgument,
        Error::DegenerateVector { .. }
        | Error::NonDeterministic { .. }
        | Error::Diverged { .. }
        | Error::GradcheckFailed { .. } => PoserecStatus::Numerical,
        _ => PoserecStatus::Data,
    }
}

struct Fail(PoserecStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PoserecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PoserecStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PoserecStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PoserecStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(PoserecStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn engine_ref<'a>(e: *const PoserecEngine) -> Result<&'a PoserecEngine, Fail> {
    e.as_ref().ok_or_else(|| null("engine"))
}

unsafe fn trajectory(frames: *const f64, n_frames: usize) -> Result<PoseTrajectory, Fail> {
    if frames.is_null() {
        return Err(null("frames"));
    }
    let data = std::slice::from_raw_parts(frames, n_frames * POSEREC_FRAME_LEN).to_vec();
    let t = Tensor::new(vec![n_frames, LANDMARKS, POSE_CHANNELS], data)?;
    Ok(PoseTrajectory::new("ffi", t)?)
}

impl PoserecEngine {
    fn window_embeddings(&self, traj: &PoseTrajectory) -> Result<Vec<Vec<f64>>, Fail> {
        let windows = sliding_windows(traj, self.model.spec.window_len, self.window_step)?;
        if windows.is_empty() {
            return Err(Error::Window {
                expected: self.model.spec.window_len,
                got: traj.num_frames(),
            }
            .into());
        }
        let refs: Vec<&Tensor> = windows.iter().collect();
        Ok(self.model.encode_windows(&refs)?)
    }
}

/// Message of the last failing call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn poserec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint and an item file and build the item index.
///
/// # Safety
/// `checkpoint_path` and `items_path` must be nul-terminated strings; `out`
/// must be a valid place to store the handle.
#[no_mangle]
pub unsafe extern "C" fn poserec_engine_open(
    checkpoint_path: *const c_char,
    items_path: *const c_char,
    out: *mut *mut PoserecEngine,
) -> PoserecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let items_path = path_arg(items_path, "items_path")?;
        let (model, cfg) = PoseRecModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
        let items = load_items(items_path)?;
        let catalog = item_catalog(items.len(), cfg.item_fraction, cfg.seed);
        let refs: Vec<&ItemRecord> = catalog.iter().map(|&i| &items[i]).collect();
        let index = build_item_index(&model, &refs, &cfg.factor_mask)?;
        *out = Box::into_raw(Box::new(PoserecEngine {
            model,
            index,
            window_step: cfg.window_step,
        }));
        Ok(())
    })
}

/// Release an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from [`poserec_engine_open`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn poserec_engine_free(engine: *mut PoserecEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Number of indexed items (degenerate items are left out of the index).
///
/// # Safety
/// `engine` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn poserec_engine_item_count(engine: *const PoserecEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.index.len())
}

/// Width of a window embedding.
///
/// # Safety
/// `engine` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn poserec_engine_embed_dim(engine: *const PoserecEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.model.spec.embed_dim())
}

/// Frames per window; shorter videos cannot be scored.
///
/// # Safety
/// `engine` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn poserec_engine_window_len(engine: *const PoserecEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.model.spec.window_len)
}

/// Copy the id of indexed item `index` into `buf` with a trailing nul.
/// `needed` (optional) receives the buffer size required, nul included.
///
/// # Safety
/// `buf` must hold `buf_len` writable bytes; `needed` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn poserec_item_id(
    engine: *const PoserecEngine,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> PoserecStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        let id = e.index.ids.get(index).ok_or_else(|| {
            Fail(
                PoserecStatus::InvalidArgument,
                format!("item index {index} out of range 0..{}", e.index.len()),
            )
        })?;
        let n = id.len() + 1;
        if !needed.is_null() {
            *needed = n;
        }
        if buf.is_null() || buf_len < n {
            return Err(Fail(PoserecStatus::BufferTooSmall, format!("id needs {n} bytes")));
        }
        ptr::copy_nonoverlapping(id.as_ptr(), buf as *mut u8, id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}

/// Position of item `id` in the index.
///
/// # Safety
/// `id` must be a nul-terminated string and `out_index` valid.
#[no_mangle]
pub unsafe extern "C" fn poserec_find_item(
    engine: *const PoserecEngine,
    id: *const c_char,
    out_index: *mut usize,
) -> PoserecStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if id.is_null() {
            return Err(null("id"));
        }
        if out_index.is_null() {
            return Err(null("out_index"));
        }
        let id = CStr::from_ptr(id)
            .to_str()
            .map_err(|_| Fail(PoserecStatus::InvalidArgument, "id is not UTF-8".into()))?;
        let pos = e
            .index
            .ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Fail(PoserecStatus::Data, format!("item {id} is not indexed")))?;
        *out_index = pos;
        Ok(())
    })
}

/// Embed every window of a video. Writes `n_windows × embed_dim` doubles to
/// `out` when `out_len` is large enough; `n_windows` is always reported.
///
/// # Safety
/// `frames` must hold `n_frames × POSEREC_FRAME_LEN` doubles, `out` must hold
/// `out_len` doubles, `n_windows` must be valid.
#[no_mangle]
pub unsafe extern "C" fn poserec_encode_video(
    engine: *const PoserecEngine,
    frames: *const f64,
    n_frames: usize,
    out: *mut f64,
    out_len: usize,
    n_windows: *mut usize,
) -> PoserecStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if n_windows.is_null() {
            return Err(null("n_windows"));
        }
        let emb = e.window_embeddings(&trajectory(frames, n_frames)?)?;
        *n_windows = emb.len();
        let need = emb.len() * e.model.spec.embed_dim();
        if out.is_null() || out_len < need {
            return Err(Fail(
                PoserecStatus::BufferTooSmall,
                format!("embeddings need {need} doubles"),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (chunk, w) in dst.chunks_mut(e.model.spec.embed_dim()).zip(&emb) {
            chunk.copy_from_slice(w);
        }
        Ok(())
    })
}

/// Score every indexed item for a video (mean over its windows). `out`
/// receives one score per item in index order.
///
/// # Safety
/// `frames` must hold `n_frames × POSEREC_FRAME_LEN` doubles and `out`
/// `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn poserec_score_video(
    engine: *const PoserecEngine,
    frames: *const f64,
    n_frames: usize,
    out: *mut f64,
    out_len: usize,
) -> PoserecStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if out.is_null() || out_len < e.index.len() {
            return Err(Fail(
                PoserecStatus::BufferTooSmall,
                format!("scores need {} doubles", e.index.len()),
            ));
        }
        let scores = e
            .index
            .video_scores(&e.window_embeddings(&trajectory(frames, n_frames)?)?)?;
        std::slice::from_raw_parts_mut(out, scores.len()).copy_from_slice(&scores);
        Ok(())
    })
}

/// Top `top` items for a video, best first, ties broken by ascending id.
/// Writes up to `top` index positions and scores; `out_count` receives how
/// many were written (fewer when the index is smaller).
///
/// # Safety
/// `out_items` and `out_scores` must hold `top` elements; `frames` as for
/// [`poserec_score_video`].
#[no_mangle]
pub unsafe extern "C" fn poserec_recommend(
    engine: *const PoserecEngine,
    frames: *const f64,
    n_frames: usize,
    top: usize,
    out_items: *mut usize,
    out_scores: *mut f64,
    out_count: *mut usize,
) -> PoserecStatus {
    guard(|| {
        let e = engine_ref(engine)?;
        if out_items.is_null() || out_scores.is_null() || out_count.is_null() {
            return Err(null("output pointer"));
        }
        if top == 0 {
            return Err(Fail(PoserecStatus::InvalidArgument, "top must be at least 1".into()));
        }
        let scores = e
            .index
            .video_scores(&e.window_embeddings(&trajectory(frames, n_frames)?)?)?;
        let order = rank(&scores, &e.index.ids);
        let n = top.min(order.len());
        let items = std::slice::from_raw_parts_mut(out_items, n);
        let vals = std::slice::from_raw_parts_mut(out_scores, n);
        for (j, &i) in order.iter().take(n).enumerate() {
            items[j] = i;
            vals[j] = scores[i];
        }
        *out_count = n;
        Ok(())
    })
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn poserec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

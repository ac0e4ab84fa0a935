//! C ABI over `aima_core`.
//!
//! Every fallible function returns an [`AimaStatus`]; on failure the message
//! is kept per thread and can be copied out with [`aima_last_error`]. Handles
//! are opaque and must be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aima_core::geometry::{BBox, PatchGrid};
use aima_core::grounding::{Strategy, StrategyConfig};
use aima_core::harness::ground_one_step;
use aima_core::labeling::patch_labels;
use aima_core::synthdata::{gen_scene, DifficultyLevel, Scene};
use aima_core::toymodel::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use aima_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AimaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Shape = 4,
    Config = 5,
    Input = 6,
    Trace = 7,
    Numeric = 8,
    Checkpoint = 9,
    Generation = 10,
    Parse = 11,
    Io = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AimaStrategy {
    Vanilla = 0,
    Uniform = 1,
    AllQuery = 2,
    Anchor = 3,
    Sink = 4,
    Soft = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AimaDifficulty {
    Easy = 0,
    Hard = 1,
}

/// Result of grounding one scene, in global pixel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AimaClick {
    pub x: f64,
    pub y: f64,
    pub hit: bool,
    /// Smallest bbox expansion in patches that contains the click; -1 if none.
    pub min_relax: i32,
}

/// Opaque model handle.
pub struct AimaModel(Model);

/// Opaque scene handle.
pub struct AimaScene(Scene);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> AimaStatus {
    match e.class() {
        "domain" => AimaStatus::Domain,
        "shape" => AimaStatus::Shape,
        "config" => AimaStatus::Config,
        "input" => AimaStatus::Input,
        "trace" => AimaStatus::Trace,
        "numeric" => AimaStatus::Numeric,
        "checkpoint" => AimaStatus::Checkpoint,
        "generation" => AimaStatus::Generation,
        "parse" => AimaStatus::Parse,
        _ => AimaStatus::Io,
    }
}

struct Fail(AimaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AimaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            AimaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AimaStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail(AimaStatus::NullPointer, "null pointer argument".into())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(AimaStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn aima_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a model with the default architecture and the given seed.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn aima_model_new(seed: u64, out: *mut *mut AimaModel) -> AimaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let model = Model::new(ModelConfig { seed, ..ModelConfig::default() })?;
        *out = Box::into_raw(Box::new(AimaModel(model)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn aima_model_load(path: *const c_char, out: *mut *mut AimaModel) -> AimaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let model = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(AimaModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn aima_model_save(model: *const AimaModel, path: *const c_char) -> AimaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        save_checkpoint(&m.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aima_model_free(model: *mut AimaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generates one synthetic scene.
///
/// # Safety
/// `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn aima_scene_generate(
    seed: u64,
    difficulty: AimaDifficulty,
    out: *mut *mut AimaScene,
) -> AimaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let level = match difficulty {
            AimaDifficulty::Easy => DifficultyLevel::Easy,
            AimaDifficulty::Hard => DifficultyLevel::Hard,
        };
        let scene = gen_scene(seed, &level.config())?;
        *out = Box::into_raw(Box::new(AimaScene(scene)));
        Ok(())
    })
}

/// Writes the target bbox as `x1, y1, x2, y2` into `out`.
///
/// # Safety
/// `scene` must be a live handle and `out` point to 4 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn aima_scene_target(scene: *const AimaScene, out: *mut f64) -> AimaStatus {
    guard(|| {
        let s = scene.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let b = s.0.gt_bbox;
        for (i, v) in [b.x1, b.y1, b.x2, b.y2].into_iter().enumerate() {
            *out.add(i) = v;
        }
        Ok(())
    })
}

/// # Safety
/// `scene` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aima_scene_free(scene: *mut AimaScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// One-step grounding with the given strategy; sink uses global top-1.
///
/// # Safety
/// `model` and `scene` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aima_ground(
    model: *const AimaModel,
    scene: *const AimaScene,
    strategy: AimaStrategy,
    out: *mut AimaClick,
) -> AimaStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(null)?;
        let s = scene.as_ref().ok_or_else(null)?;
        let out = out.as_mut().ok_or_else(null)?;
        let st = match strategy {
            AimaStrategy::Vanilla => Strategy::Vanilla,
            AimaStrategy::Uniform => Strategy::Uniform,
            AimaStrategy::AllQuery => Strategy::AllQuery,
            AimaStrategy::Anchor => Strategy::Anchor,
            AimaStrategy::Sink => Strategy::Sink,
            AimaStrategy::Soft => Strategy::Soft,
        };
        let r = ground_one_step(&m.0, &s.0, 0, &StrategyConfig::new(st))?;
        *out = AimaClick {
            x: r.predicted.x,
            y: r.predicted.y,
            hit: r.hit,
            min_relax: r.min_relax.map_or(-1, |k| k as i32),
        };
        Ok(())
    })
}

/// Patch label distribution of `bbox` (`x1, y1, x2, y2`) on an image tiled
/// by square patches. Writes `rows * cols` values in row-major order to
/// `out` and the count to `written`.
///
/// # Safety
/// `bbox` must point to 4 doubles, `out` to `out_len` writable doubles, and
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aima_patch_labels(
    image_w: u32,
    image_h: u32,
    patch_px: u32,
    bbox: *const f64,
    alpha: f64,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> AimaStatus {
    guard(|| {
        if bbox.is_null() || out.is_null() || written.is_null() {
            return Err(null());
        }
        let b = std::slice::from_raw_parts(bbox, 4);
        let grid = PatchGrid::new(image_w, image_h, patch_px)?;
        let label = patch_labels(&grid, &BBox::new(b[0], b[1], b[2], b[3]), alpha)?;
        let values = label.values();
        *written = values.len();
        if out_len < values.len() {
            return Err(Fail(
                AimaStatus::BufferTooSmall,
                format!("need {} values, buffer holds {out_len}", values.len()),
            ));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_map_classes() {
        assert_eq!(status_of(&Error::Shape("x".into())), AimaStatus::Shape);
        assert_eq!(status_of(&Error::EmptyQuery), AimaStatus::Trace);
        assert_eq!(status_of(&Error::Truncated("x")), AimaStatus::Checkpoint);
    }
}

//! C interface to `platedpm`.
//!
//! Models and readings are opaque handles owned by the caller and released
//! with their `_free` function. Every call returns a [`PdpmStatus`]; on
//! failure [`pdpm_last_error_message`] describes the error for the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use platedpm::dpm::{io as model_io, CharacterMixtureSet};
use platedpm::pipeline::{recognize_plate, PipelineConfig, PlateReading};
use platedpm::{Error, ImageBuffer};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdpmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    ModelFormat = 4,
    Decode = 5,
    Precondition = 6,
    OutOfRange = 7,
    Internal = 8,
}

/// Loaded character models.
pub struct PdpmModel {
    models: CharacterMixtureSet,
}

/// One plate reading.
pub struct PdpmReading {
    reading: PlateReading,
    text: CString,
}

/// A kept character of a reading, in plate pixel coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdpmCharacter {
    /// Unicode scalar value of the character.
    pub codepoint: u32,
    pub score: f64,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> PdpmStatus {
    match e {
        Error::Io { .. } => PdpmStatus::Io,
        Error::ModelFormat(_) => PdpmStatus::ModelFormat,
        Error::Decode(_) | Error::Format(_) => PdpmStatus::Decode,
        Error::Precondition(_) | Error::EmptyPyramid => PdpmStatus::Precondition,
        Error::Parameter(_) | Error::Bounds(..) => PdpmStatus::InvalidArgument,
        _ => PdpmStatus::Internal,
    }
}

/// Runs `f`, recording its error or panic for [`pdpm_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), (PdpmStatus, String)>) -> PdpmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PdpmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            PdpmStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (PdpmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PdpmStatus, String) {
    (PdpmStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (PdpmStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| {
        (
            PdpmStatus::InvalidArgument,
            "path is not valid UTF-8".to_string(),
        )
    })?;
    Ok(PathBuf::from(s))
}

fn make_reading(reading: PlateReading) -> Box<PdpmReading> {
    let text = CString::new(reading.text.clone()).unwrap_or_default();
    Box::new(PdpmReading { reading, text })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pdpm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn pdpm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a model file written by `platedpm train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpm_model_load(
    path: *const c_char,
    out: *mut *mut PdpmModel,
) -> PdpmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path)? };
        let models = model_io::load(&path).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(PdpmModel { models })) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`pdpm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdpm_model_free(model: *mut PdpmModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of character classes in the model, 0 for null.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn pdpm_model_num_classes(model: *const PdpmModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.models.classes.len())
}

/// Reads a plate crop given as interleaved `f32` pixels in `[0, 1]` with 1
/// or 3 channels, row-major without padding.
///
/// # Safety
/// `pixels` must point to `width * height * channels` floats; `model` must
/// be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpm_recognize_plate(
    model: *const PdpmModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    channels: usize,
    threshold: f64,
    out: *mut *mut PdpmReading,
) -> PdpmStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if channels != 1 && channels != 3 {
            return Err((
                PdpmStatus::InvalidArgument,
                format!("{channels} channels; expected 1 or 3"),
            ));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| {
                (
                    PdpmStatus::InvalidArgument,
                    "image size overflows".to_string(),
                )
            })?;
        let data = unsafe { std::slice::from_raw_parts(pixels, n) }.to_vec();
        let img = ImageBuffer::new(width, height, channels, data).map_err(lib_err)?;
        let config = PipelineConfig {
            threshold,
            ..PipelineConfig::default()
        };
        let reading = recognize_plate(&img, &model.models, &config).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(make_reading(reading)) };
        Ok(())
    })
}

/// Decodes a PNG or JPEG plate crop and reads it.
///
/// # Safety
/// `path` must be a NUL-terminated string, `model` a live handle and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpm_recognize_file(
    model: *const PdpmModel,
    path: *const c_char,
    threshold: f64,
    out: *mut *mut PdpmReading,
) -> PdpmStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path)? };
        let img = ImageBuffer::open(&path).map_err(lib_err)?;
        let config = PipelineConfig {
            threshold,
            ..PipelineConfig::default()
        };
        let reading = recognize_plate(&img, &model.models, &config).map_err(lib_err)?;
        unsafe { *out = Box::into_raw(make_reading(reading)) };
        Ok(())
    })
}

/// Releases a reading. Null is ignored.
///
/// # Safety
/// `reading` must come from a recognize call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pdpm_reading_free(reading: *mut PdpmReading) {
    if !reading.is_null() {
        drop(unsafe { Box::from_raw(reading) });
    }
}

/// The plate string, owned by the reading. Null for a null handle.
///
/// # Safety
/// `reading` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pdpm_reading_text(reading: *const PdpmReading) -> *const c_char {
    unsafe { reading.as_ref() }.map_or(std::ptr::null(), |r| r.text.as_ptr())
}

/// Number of kept characters.
///
/// # Safety
/// `reading` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pdpm_reading_len(reading: *const PdpmReading) -> usize {
    unsafe { reading.as_ref() }.map_or(0, |r| r.reading.detections.len())
}

/// False when the digit-position rule could not be satisfied.
///
/// # Safety
/// `reading` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pdpm_reading_valid(reading: *const PdpmReading) -> bool {
    unsafe { reading.as_ref() }.is_some_and(|r| r.reading.valid)
}

/// Copies character `index` (left to right) into `out`.
///
/// # Safety
/// `reading` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pdpm_reading_char(
    reading: *const PdpmReading,
    index: usize,
    out: *mut PdpmCharacter,
) -> PdpmStatus {
    guard(|| {
        let r = unsafe { reading.as_ref() }.ok_or_else(|| null("reading"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let d = r.reading.detections.get(index).ok_or_else(|| {
            (
                PdpmStatus::OutOfRange,
                format!("index {index} >= {}", r.reading.detections.len()),
            )
        })?;
        let c = PdpmCharacter {
            codepoint: d.label.as_char().map_or(0, u32::from),
            score: d.score,
            x: d.bbox.x,
            y: d.bbox.y,
            width: d.bbox.w,
            height: d.bbox.h,
        };
        unsafe { *out = c };
        Ok(())
    })
}

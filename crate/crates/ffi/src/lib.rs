//! C ABI over `sebsfv`.
//!
//! Videos cross the boundary as opaque `SbfvVideo` handles created by the
//! `sbfv_video_*` constructors and released with [`sbfv_video_free`]. Every
//! entry point returns an [`SbfvStatus`]; on failure the message is kept per
//! thread and can be copied out with [`sbfv_last_error`]. Pixel data is
//! column-major `d x n` (`d = width * height`, one frame per column, each
//! frame row-major) with intensities in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::DMatrix;
use sebsfv::pipeline::{self, PipelineConfig};
use sebsfv::videodata::{self, quantize_u8, VideoMatrix};
use sebsfv::{metrics, registration, Error};

/// Status code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbfvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque frame sequence.
pub struct SbfvVideo {
    inner: VideoMatrix,
}

/// Pipeline settings; obtain defaults from [`sbfv_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbfvConfig {
    pub chunk: usize,
    pub k: usize,
    pub eta: f64,
    /// 0 selects the rank automatically.
    pub rank: usize,
    pub forgetting: f64,
    pub carry_state: bool,
    pub swap_roles: bool,
    pub seed: u64,
}

impl From<&SbfvConfig> for PipelineConfig {
    fn from(c: &SbfvConfig) -> Self {
        PipelineConfig {
            chunk: c.chunk,
            k: c.k,
            eta: c.eta,
            rank: (c.rank > 0).then_some(c.rank),
            forgetting: c.forgetting,
            carry_state: c.carry_state,
            swap_roles: c.swap_roles,
            seed: c.seed,
            ..PipelineConfig::default()
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> SbfvStatus {
    match err {
        Error::Io { .. } | Error::NoFrames(_) => SbfvStatus::Io,
        Error::Pgm { .. } | Error::MatrixFormat(_) | Error::Json(_) | Error::DimensionMismatch { .. } => {
            SbfvStatus::Format
        }
        Error::Numerical(_) => SbfvStatus::Numerical,
        _ => SbfvStatus::InvalidArgument,
    }
}

struct Failure(SbfvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SbfvStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbfvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SbfvStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SbfvStatus::Panic
        }
    }
}

unsafe fn video_ref<'a>(v: *const SbfvVideo) -> Result<&'a VideoMatrix, Failure> {
    v.as_ref().map(|v| &v.inner).ok_or_else(|| null("video"))
}

unsafe fn emit(out: *mut *mut SbfvVideo, video: VideoMatrix) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(SbfvVideo { inner: video }));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sbfv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to `len`) into `buf` and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sbfv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub extern "C" fn sbfv_config_default() -> SbfvConfig {
    let d = PipelineConfig::default();
    SbfvConfig {
        chunk: d.chunk,
        k: d.k,
        eta: d.eta,
        rank: d.rank.unwrap_or(0),
        forgetting: d.forgetting,
        carry_state: d.carry_state,
        swap_roles: d.swap_roles,
        seed: d.seed,
    }
}

/// Loads a directory of PGM frames (with optional `.mask.pgm` companions).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbfv_video_load_dir(path: *const c_char, out: *mut *mut SbfvVideo) -> SbfvStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(SbfvStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let video = videodata::load_frame_sequence(Path::new(path))?;
        emit(out, video)
    })
}

/// Builds a video from `width * height * frames` column-major intensities.
/// `valid` may be null (all pixels valid) or point to as many bytes, non-zero
/// meaning valid.
///
/// # Safety
/// `data` (and `valid` when non-null) must point to `width * height * frames`
/// readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbfv_video_from_frames(
    width: usize,
    height: usize,
    frames: usize,
    data: *const f64,
    valid: *const u8,
    out: *mut *mut SbfvVideo,
) -> SbfvStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let d = width
            .checked_mul(height)
            .ok_or_else(|| Failure(SbfvStatus::InvalidArgument, "width * height overflows".into()))?;
        let len = d
            .checked_mul(frames)
            .ok_or_else(|| Failure(SbfvStatus::InvalidArgument, "d * frames overflows".into()))?;
        if len == 0 {
            return Err(Failure(SbfvStatus::InvalidArgument, "empty video".into()));
        }
        let values = std::slice::from_raw_parts(data, len).to_vec();
        let mask: Vec<bool> = if valid.is_null() {
            vec![true; len]
        } else {
            std::slice::from_raw_parts(valid, len).iter().map(|&b| b != 0).collect()
        };
        if let Some(bad) = values
            .iter()
            .zip(&mask)
            .position(|(v, &m)| m && !(0.0..=1.0).contains(v))
        {
            return Err(Failure(
                SbfvStatus::InvalidArgument,
                format!("value {} at index {bad} is outside [0, 1]", values[bad]),
            ));
        }
        let video = VideoMatrix::new(
            width,
            height,
            DMatrix::from_vec(d, frames, values),
            DMatrix::from_vec(d, frames, mask),
        )?;
        emit(out, video)
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `video` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sbfv_video_free(video: *mut SbfvVideo) {
    if !video.is_null() {
        drop(Box::from_raw(video));
    }
}

/// # Safety
/// `video` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn sbfv_video_dims(
    video: *const SbfvVideo,
    width: *mut usize,
    height: *mut usize,
    frames: *mut usize,
) -> SbfvStatus {
    guard(|| {
        let v = video_ref(video)?;
        for (p, value) in [(width, v.width()), (height, v.height()), (frames, v.n())] {
            if !p.is_null() {
                *p = value;
            }
        }
        Ok(())
    })
}

/// Copies the column-major intensities into `out` (`len` elements).
/// Invalid pixels are copied as stored.
///
/// # Safety
/// `video` must be a live handle; `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sbfv_video_copy_data(video: *const SbfvVideo, out: *mut f64, len: usize) -> SbfvStatus {
    guard(|| {
        let v = video_ref(video)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let data = v.data().as_slice();
        if len < data.len() {
            return Err(Failure(
                SbfvStatus::BufferTooSmall,
                format!("buffer holds {len} values, {} needed", data.len()),
            ));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        Ok(())
    })
}

/// Copies the validity mask (1 valid, 0 invalid) into `out` (`len` bytes).
///
/// # Safety
/// `video` must be a live handle; `out` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sbfv_video_copy_mask(video: *const SbfvVideo, out: *mut u8, len: usize) -> SbfvStatus {
    guard(|| {
        let v = video_ref(video)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mask = v.mask().as_slice();
        if len < mask.len() {
            return Err(Failure(
                SbfvStatus::BufferTooSmall,
                format!("buffer holds {len} values, {} needed", mask.len()),
            ));
        }
        for (i, &m) in mask.iter().enumerate() {
            *out.add(i) = m as u8;
        }
        Ok(())
    })
}

/// Writes the video as numbered PGM frames into `dir`.
///
/// # Safety
/// `video` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sbfv_video_save_dir(video: *const SbfvVideo, dir: *const c_char) -> SbfvStatus {
    guard(|| {
        let v = video_ref(video)?;
        if dir.is_null() {
            return Err(null("dir"));
        }
        let dir = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Failure(SbfvStatus::InvalidArgument, "dir is not UTF-8".into()))?;
        videodata::save_frame_sequence(Path::new(dir), v, false)?;
        Ok(())
    })
}

/// Registers every frame to the first frame of its `chunk`.
///
/// # Safety
/// `video` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbfv_register(video: *const SbfvVideo, chunk: usize, out: *mut *mut SbfvVideo) -> SbfvStatus {
    guard(|| {
        let v = video_ref(video)?;
        let frames = v.frames()?;
        let registered = registration::register_sequence(&frames, chunk)?;
        emit(out, registered.video)
    })
}

/// Streaming enhancement followed by the per-chunk ADMM clean-up. `config`
/// may be null for defaults.
///
/// # Safety
/// `video` must be a live handle; `config` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sbfv_enhance(
    video: *const SbfvVideo,
    config: *const SbfvConfig,
    out: *mut *mut SbfvVideo,
) -> SbfvStatus {
    guard(|| {
        let v = video_ref(video)?;
        let cfg = config.as_ref().map(PipelineConfig::from).unwrap_or_default();
        let (enhanced, _) = pipeline::enhance(v, &cfg)?;
        emit(out, enhanced.video)
    })
}

/// Shannon entropy in bits of the quantized valid pixels of one frame.
///
/// # Safety
/// `video` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sbfv_entropy(video: *const SbfvVideo, frame: usize, out: *mut f64) -> SbfvStatus {
    guard(|| {
        let v = video_ref(video)?;
        if out.is_null() {
            return Err(null("out"));
        }
        if frame >= v.n() {
            return Err(Failure(
                SbfvStatus::InvalidArgument,
                format!("frame {frame} out of range (n = {})", v.n()),
            ));
        }
        let f = v.frame(frame)?;
        *out = metrics::entropy(&quantize_u8(&f), Some(f.valid()))?;
        Ok(())
    })
}

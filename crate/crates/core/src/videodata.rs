//! Frames, the column-stacked video matrix, and their on-disk formats.
//!
//! Intensities live in `[0, 1]` as `f64` everywhere inside the crate; 8-bit
//! values only appear at the PGM boundary and in the metric/detection code.
//!
//! Two file formats are supported:
//!
//! * binary PGM (`P5`, maxval 255) for frames, with an optional companion
//!   `<stem>.mask.pgm` (0 = invalid, anything else = valid);
//! * `SBFV1` matrix dumps: the ASCII magic `SBFV1`, `u32` LE rows, `u32` LE
//!   cols, then `rows * cols` LE `f64` values in column-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Suffix used for companion mask files written next to frames.
pub const MASK_SUFFIX: &str = ".mask.pgm";

const SBFV_MAGIC: &[u8; 5] = b"SBFV1";

/// A single gray frame with a per-pixel validity mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    valid: Vec<bool>,
}

impl Frame {
    /// Builds a frame with every pixel valid.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        let valid = vec![true; pixels.len()];
        Self::with_mask(width, height, pixels, valid)
    }

    pub fn with_mask(width: usize, height: usize, pixels: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("frame dimensions must be non-zero"));
        }
        if pixels.len() != width * height || valid.len() != pixels.len() {
            return Err(Error::invalid(format!(
                "frame {}x{} needs {} pixels and mask entries, got {} and {}",
                width,
                height,
                width * height,
                pixels.len(),
                valid.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::invalid(format!("intensity {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
            valid,
        })
    }

    /// Builds a frame from values that may stray outside `[0, 1]`; they are clamped.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        for p in pixels.iter_mut() {
            *p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::with_mask(width, height, pixels, valid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Row-major flattening of a frame into a pixel vector and its mask.
pub fn frame_to_column(frame: &Frame) -> (DVector<f64>, Vec<bool>) {
    (DVector::from_column_slice(&frame.pixels), frame.valid.clone())
}

/// Inverse of [`frame_to_column`].
pub fn column_to_frame(width: usize, height: usize, column: &[f64], mask: &[bool]) -> Result<Frame> {
    Frame::with_mask(width, height, column.to_vec(), mask.to_vec())
}

/// `round(255 * intensity)`, rounding half away from zero.
pub fn quantize_u8(frame: &Frame) -> Vec<u8> {
    frame.pixels.iter().map(|&p| quantize_value(p)).collect()
}

#[inline]
pub fn quantize_value(intensity: f64) -> u8 {
    (255.0 * intensity.clamp(0.0, 1.0)).round() as u8
}

/// A `d x n` matrix whose column `j` is frame `j`, plus the validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoMatrix {
    width: usize,
    height: usize,
    data: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl VideoMatrix {
    pub fn new(width: usize, height: usize, data: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if data.nrows() != width * height {
            return Err(Error::invalid(format!(
                "matrix has {} rows but frames are {}x{}",
                data.nrows(),
                width,
                height
            )));
        }
        if mask.shape() != data.shape() {
            return Err(Error::invalid("mask shape differs from data shape"));
        }
        Ok(Self {
            width,
            height,
            data,
            mask,
        })
    }

    /// All entries valid.
    pub fn from_data(width: usize, height: usize, data: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(data.nrows(), data.ncols(), true);
        Self::new(width, height, data, mask)
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::invalid("no frames"))?;
        let (w, h) = (first.width, first.height);
        let d = w * h;
        let mut data = DMatrix::zeros(d, frames.len());
        let mut mask = DMatrix::from_element(d, frames.len(), false);
        for (j, f) in frames.iter().enumerate() {
            if (f.width, f.height) != (w, h) {
                return Err(Error::DimensionMismatch {
                    expected: (w, h),
                    found: (f.width, f.height),
                    path: PathBuf::new(),
                });
            }
            data.column_mut(j).copy_from_slice(&f.pixels);
            for (i, v) in f.valid.iter().enumerate() {
                mask[(i, j)] = *v;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            data,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixels per frame.
    pub fn d(&self) -> usize {
        self.data.nrows()
    }

    /// Number of frames.
    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let d = self.d();
        &self.data.as_slice()[j * d..(j + 1) * d]
    }

    pub fn column_mask(&self, j: usize) -> &[bool] {
        let d = self.d();
        &self.mask.as_slice()[j * d..(j + 1) * d]
    }

    pub fn frame(&self, j: usize) -> Result<Frame> {
        column_to_frame(self.width, self.height, self.column(j), self.column_mask(j))
    }

    pub fn frames(&self) -> Result<Vec<Frame>> {
        (0..self.n()).map(|j| self.frame(j)).collect()
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> VideoMatrix {
        let len = end - start;
        VideoMatrix {
            width: self.width,
            height: self.height,
            data: self.data.columns(start, len).into_owned(),
            mask: self.mask.columns(start, len).into_owned(),
        }
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<bool>) {
        (self.data, self.mask)
    }
}

// ---------------------------------------------------------------------------
// PGM

/// Parses a binary `P5` PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let err = |reason: &str| Error::Pgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        tokens.push(&bytes[start..pos]);
    }
    if tokens[0] != b"P5" {
        return Err(err("not a binary P5 PGM"));
    }
    let parse = |t: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| err(&format!("bad {what}")))
    };
    let width = parse(tokens[1], "width")?;
    let height = parse(tokens[2], "height")?;
    let maxval = parse(tokens[3], "maxval")?;
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(err("zero dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing raster"));
    }
    pos += 1;
    let need = width * height;
    if bytes.len() - pos < need {
        return Err(err("raster shorter than width*height"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(|e| Error::io(path, e))
}

/// Reads a frame, picking up a companion mask file when one exists.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let (w, h, gray) = read_pgm(path)?;
    let pixels: Vec<f64> = gray.iter().map(|&g| g as f64 / 255.0).collect();
    let mask_path = mask_path_for(path);
    let valid = if mask_path.is_file() {
        let (mw, mh, m) = read_pgm(&mask_path)?;
        if (mw, mh) != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                found: (mw, mh),
                path: mask_path,
            });
        }
        m.iter().map(|&v| v != 0).collect()
    } else {
        vec![true; pixels.len()]
    };
    Frame::with_mask(w, h, pixels, valid)
}

/// Writes the quantized frame; the mask companion is written only when some
/// pixel is invalid or `always_mask` is set.
pub fn write_frame(path: &Path, frame: &Frame, always_mask: bool) -> Result<()> {
    write_pgm(path, frame.width, frame.height, &quantize_u8(frame))?;
    if always_mask || frame.valid.iter().any(|v| !v) {
        let m: Vec<u8> = frame.valid.iter().map(|&v| if v { 255 } else { 0 }).collect();
        write_pgm(&mask_path_for(path), frame.width, frame.height, &m)?;
    }
    Ok(())
}

pub fn mask_path_for(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".pgm").unwrap_or(&name);
    path.with_file_name(format!("{stem}{MASK_SUFFIX}"))
}

/// Frame files in a directory, lexicographically sorted, excluding masks.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_file() && name.ends_with(".pgm") && !name.ends_with(MASK_SUFFIX) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every frame of a directory; filename order defines time.
pub fn load_frame_sequence(dir: &Path) -> Result<VideoMatrix> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let mut frames = Vec::with_capacity(files.len());
    for path in &files {
        let f = read_frame(path)?;
        if let Some(first) = frames.first() {
            let first: &Frame = first;
            if (f.width, f.height) != (first.width, first.height) {
                return Err(Error::DimensionMismatch {
                    expected: (first.width, first.height),
                    found: (f.width, f.height),
                    path: path.clone(),
                });
            }
        }
        frames.push(f);
    }
    VideoMatrix::from_frames(&frames)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:05}.pgm")
}

/// Writes `frame_00000.pgm`, ... into `dir` (created if missing).
pub fn save_frame_sequence(dir: &Path, video: &VideoMatrix, always_mask: bool) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(video.n());
    for j in 0..video.n() {
        let path = dir.join(frame_file_name(j));
        write_frame(&path, &video.frame(j)?, always_mask)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// SBFV1

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * m.len());
    out.extend_from_slice(SBFV_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(mut bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 5];
    bytes
        .read_exact(&mut magic)
        .map_err(|_| Error::MatrixFormat("truncated magic".into()))?;
    if &magic != SBFV_MAGIC {
        return Err(Error::MatrixFormat("bad magic".into()));
    }
    let mut word = [0u8; 4];
    bytes
        .read_exact(&mut word)
        .map_err(|_| Error::MatrixFormat("truncated header".into()))?;
    let rows = u32::from_le_bytes(word) as usize;
    bytes
        .read_exact(&mut word)
        .map_err(|_| Error::MatrixFormat("truncated header".into()))?;
    let cols = u32::from_le_bytes(word) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::MatrixFormat("dimension overflow".into()))?;
    if bytes.len() != count * 8 {
        return Err(Error::MatrixFormat(format!(
            "expected {} payload bytes, found {}",
            count * 8,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect::<Vec<_>>();
    Ok(DMatrix::from_vec(rows, cols, values))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_frame_scaling() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("a.pgm"), 2, 2, &[0, 85, 170, 255]).unwrap();
        let v = load_frame_sequence(dir.path()).unwrap();
        assert_eq!((v.d(), v.n()), (4, 1));
        assert_eq!(v.column(0), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert!(v.mask().iter().all(|m| *m));
    }

    #[test]
    fn duplicate_frames_have_rank_one() {
        let dir = tempfile::tempdir().unwrap();
        let g = [10u8, 20, 30, 40, 50, 60];
        write_pgm(&dir.path().join("0.pgm"), 3, 2, &g).unwrap();
        write_pgm(&dir.path().join("1.pgm"), 3, 2, &g).unwrap();
        let v = load_frame_sequence(dir.path()).unwrap();
        assert_eq!(v.data().rank(1e-12), 1);
    }

    #[test]
    fn lexicographic_order_defines_time() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&dir.path().join("b.pgm"), 1, 1, &[255]).unwrap();
        write_pgm(&dir.path().join("a.pgm"), 1, 1, &[0]).unwrap();
        let v = load_frame_sequence(dir.path()).unwrap();
        assert_eq!(v.column(0), &[0.0]);
        assert_eq!(v.column(1), &[1.0]);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frame_sequence(dir.path()), Err(Error::NoFrames(_))));
        assert!(matches!(
            load_frame_sequence(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
        write_pgm(&dir.path().join("a.pgm"), 2, 2, &[0; 4]).unwrap();
        write_pgm(&dir.path().join("b.pgm"), 2, 3, &[0; 6]).unwrap();
        assert!(matches!(
            load_frame_sequence(dir.path()),
            Err(Error::DimensionMismatch { .. })
        ));
        fs::write(dir.path().join("b.pgm"), b"P2\n2 2\n255\n0 0 0 0").unwrap();
        assert!(matches!(load_frame_sequence(dir.path()), Err(Error::Pgm { .. })));
    }

    #[test]
    fn pgm_header_with_comment() {
        let bytes = b"P5 # comment\n2 # w\n1\n255\n\x05\x06";
        let (w, h, g) = decode_pgm(bytes, Path::new("x")).unwrap();
        assert_eq!((w, h, g), (2, 1, vec![5, 6]));
    }

    #[test]
    fn masks_round_trip_through_companion_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::with_mask(2, 1, vec![0.2, 0.4], vec![true, false]).unwrap();
        let path = dir.path().join("frame_00000.pgm");
        write_frame(&path, &f, false).unwrap();
        assert!(dir.path().join("frame_00000.mask.pgm").is_file());
        let v = load_frame_sequence(dir.path()).unwrap();
        assert_eq!(v.n(), 1);
        assert_eq!(v.column_mask(0), &[true, false]);
    }

    #[test]
    fn frame_to_column_is_row_major() {
        let f = Frame::new(1, 1, vec![0.5]).unwrap();
        assert_eq!(frame_to_column(&f).0.as_slice(), &[0.5]);
        let f = Frame::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(f.get(1, 0), 0.2);
        assert_eq!(f.get(0, 1), 0.3);
        assert_eq!(frame_to_column(&f).0.as_slice(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn quantization() {
        let f = Frame::new(3, 1, vec![0.0, 1.0, 0.5]).unwrap();
        assert_eq!(quantize_u8(&f), vec![0, 255, 128]);
        let grad: Vec<f64> = (0..256).map(|i| i as f64 / 255.0).collect();
        let q = quantize_u8(&Frame::new(256, 1, grad).unwrap());
        let distinct: std::collections::BTreeSet<u8> = q.into_iter().collect();
        assert_eq!(distinct.len(), 256);
    }

    #[test]
    fn frame_rejects_bad_values() {
        assert!(Frame::new(1, 1, vec![1.5]).is_err());
        assert!(Frame::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Frame::new(2, 1, vec![0.0]).is_err());
    }

    #[test]
    fn matrix_dump_layout() {
        let m = DMatrix::from_column_slice(2, 1, &[1.0, -2.5]);
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..5], b"SBFV1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
        assert!(decode_matrix(&bytes[..20]).is_err());
        assert!(decode_matrix(b"SBFV2").is_err());
    }
}

//! Threshold shadow detector: Tsallis-entropy threshold, 8-connected
//! components, area filtering and box emission.

use std::collections::VecDeque;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::LEVELS;
use crate::videodata::{quantize_u8, Frame};

pub use crate::metrics::DetectionBox;

pub const DEFAULT_Q: f64 = 0.8;
pub const MIN_AREA: usize = 50;
pub const MAX_AREA: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    /// Foreground is `value <= threshold` (shadows in raw frames).
    Dark,
    /// Foreground is `value >= threshold` (shadows in enhanced frames).
    Bright,
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dark" => Ok(Self::Dark),
            "bright" => Ok(Self::Bright),
            other => Err(Error::invalid(format!("polarity must be dark or bright, got {other}"))),
        }
    }
}

/// Tsallis entropy of one class; `q = 1` is the Shannon limit.
fn class_entropy(hist: &[f64], mass: f64, q: f64) -> f64 {
    if (q - 1.0).abs() < 1e-12 {
        -hist
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| {
                let r = p / mass;
                r * r.ln()
            })
            .sum::<f64>()
    } else {
        let s: f64 = hist.iter().filter(|&&p| p > 0.0).map(|&p| (p / mass).powf(q)).sum();
        (1.0 - s) / (q - 1.0)
    }
}

/// Threshold `t` in `1..=255` splitting levels `< t` from `>= t` that
/// maximises `S_A + S_B + (1 - q) S_A S_B`; ties go to the lowest `t`.
pub fn tsallis_threshold_histogram(hist: &[u64; LEVELS], q: f64) -> Result<u8> {
    if !q.is_finite() || q <= 0.0 {
        return Err(Error::invalid(format!("q must be positive, got {q}")));
    }
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(Error::EmptyRegion);
    }
    let p: Vec<f64> = hist.iter().map(|&c| c as f64 / total as f64).collect();
    let shannon = (q - 1.0).abs() < 1e-12;
    let mut best: Option<(f64, u8)> = None;
    for t in 1..LEVELS {
        let (a, b) = p.split_at(t);
        let pa: f64 = a.iter().sum();
        let pb: f64 = b.iter().sum();
        if pa <= 0.0 || pb <= 0.0 {
            continue;
        }
        let sa = class_entropy(a, pa, q);
        let sb = class_entropy(b, pb, q);
        let score = if shannon {
            sa + sb
        } else {
            sa + sb + (1.0 - q) * sa * sb
        };
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, t as u8));
        }
    }
    best.map(|(_, t)| t).ok_or(Error::NoThreshold)
}

pub fn tsallis_threshold(img: &[u8], q: f64) -> Result<u8> {
    let mut hist = [0u64; LEVELS];
    for &p in img {
        hist[p as usize] += 1;
    }
    tsallis_threshold_histogram(&hist, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub label: u32,
    pub area: usize,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub kept: bool,
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Component label per pixel, 0 for background.
    pub labels: Vec<u32>,
    pub components: Vec<Component>,
    pub boxes: Vec<DetectionBox>,
}

/// Binarises, labels 8-connected components and keeps those whose area lies
/// in `[50, 300]`. Pixels with a false `valid` entry are never foreground.
pub fn segment(
    img: &[u8],
    width: usize,
    height: usize,
    threshold: u8,
    polarity: Polarity,
    valid: Option<&[bool]>,
    frame: usize,
) -> Result<Segmentation> {
    if img.len() != width * height || valid.is_some_and(|v| v.len() != img.len()) {
        return Err(Error::invalid("image, mask and dimensions disagree"));
    }
    let fg: Vec<bool> = img
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let on = match polarity {
                Polarity::Dark => v <= threshold,
                Polarity::Bright => v >= threshold,
            };
            on && valid.is_none_or(|m| m[i])
        })
        .collect();

    let mut labels = vec![0u32; img.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..img.len() {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        let label = components.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let (mut x0, mut y0, mut x1, mut y1) = (width, height, 0, 0);
        let mut area = 0;
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % width, idx / width);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                    let n = ny * width + nx;
                    if fg[n] && labels[n] == 0 {
                        labels[n] = label;
                        queue.push_back(n);
                    }
                }
            }
        }
        components.push(Component {
            label,
            area,
            x: x0,
            y: y0,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
            kept: (MIN_AREA..=MAX_AREA).contains(&area),
        });
    }
    let boxes = components
        .iter()
        .filter(|c| c.kept)
        .map(|c| DetectionBox {
            frame,
            x: c.x,
            y: c.y,
            w: c.w,
            h: c.h,
            score: c.area as f64 / MAX_AREA as f64,
        })
        .collect();
    Ok(Segmentation {
        labels,
        components,
        boxes,
    })
}

/// Threshold and segment one frame. A frame without a usable threshold
/// (constant or empty) yields no boxes.
pub fn detect_frame(frame: &Frame, index: usize, q: f64, polarity: Polarity) -> Result<Vec<DetectionBox>> {
    let img = quantize_u8(frame);
    let valid_levels: Vec<u8> = img
        .iter()
        .zip(frame.valid())
        .filter(|(_, v)| **v)
        .map(|(p, _)| *p)
        .collect();
    let threshold = match tsallis_threshold(&valid_levels, q) {
        Ok(t) => t,
        Err(Error::NoThreshold | Error::EmptyRegion) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    Ok(segment(
        &img,
        frame.width(),
        frame.height(),
        threshold,
        polarity,
        Some(frame.valid()),
        index,
    )?
    .boxes)
}

/// Runs [`detect_frame`] over a sequence in parallel; boxes come out in frame order.
pub fn detect_sequence(frames: &[Frame], q: f64, polarity: Polarity) -> Result<Vec<DetectionBox>> {
    let per_frame: Result<Vec<Vec<DetectionBox>>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| detect_frame(f, i, q, polarity))
        .collect();
    Ok(per_frame?.into_iter().flatten().collect())
}

//! Rigid frame registration by FFT phase correlation.
//!
//! Rotation comes from the angular correlation of the two magnitude spectra
//! sampled on a log-polar grid (the magnitude spectrum ignores translation).
//! The moving frame is then un-rotated and the residual shift is found by
//! ordinary phase correlation. The 180° ambiguity of the magnitude spectrum is
//! settled by whichever candidate gives the sharper translation peak.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videodata::{Frame, VideoMatrix};

/// Default frames per registration chunk.
pub const DEFAULT_CHUNK: usize = 100;
/// Smallest frame side accepted by [`estimate_rigid_transform`].
pub const MIN_SIDE: usize = 32;

const ANGLE_BINS: usize = 720;
const RINGS: usize = 48;
const WHITEN_FLOOR: f64 = 1e-3;
/// Frequency band (cycles per pixel) used for sub-pixel phase fitting.
const REFINE_BAND: f64 = 0.15;
/// Half-width in degrees of the spatial angle refinement.
const REFINE_SPAN: f64 = 0.75;
const REFINE_TOL: f64 = 0.01;
const RECENTER_PASSES: usize = 2;

/// Rotation about the frame centre followed by a translation.
///
/// `warp_frame(f, t)` produces `out(q) = f(R(-θ)(q - c - t) + c)` with `c` the
/// frame centre, so content rotates by `θ` (counter-clockwise in `x` right,
/// `y` down axes it is clockwise on screen) and then moves by `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Degrees in `(-180, 180]`.
    pub rotation: f64,
    pub dx: f64,
    pub dy: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    pub fn new(rotation: f64, dx: f64, dy: f64) -> Self {
        Self {
            rotation: normalize_degrees(rotation),
            dx,
            dy,
        }
    }

    /// The transform undoing `self`: `warp(warp(f, t), t.inverse()) ≈ f`.
    pub fn inverse(&self) -> Self {
        let (s, c) = (-self.rotation.to_radians()).sin_cos();
        let (rx, ry) = (c * self.dx - s * self.dy, s * self.dx + c * self.dy);
        Self::new(-self.rotation, -rx, -ry)
    }
}

/// Maps an angle in degrees into `(-180, 180]`.
pub fn normalize_degrees(deg: f64) -> f64 {
    let mut a = deg % 360.0;
    if a <= -180.0 {
        a += 360.0;
    } else if a > 180.0 {
        a -= 360.0;
    }
    a
}

fn center(width: usize, height: usize) -> (f64, f64) {
    ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
}

/// Bilinear resampling under `t`. Output pixels whose sample point falls
/// outside the source, or touches an invalid source pixel, are invalid and 0.
pub fn warp_frame(f: &Frame, t: &RigidTransform) -> Frame {
    let (w, h) = (f.width(), f.height());
    let (cx, cy) = center(w, h);
    let (s, c) = (-t.rotation.to_radians()).sin_cos();
    let src = f.pixels();
    let valid = f.valid();
    let mut out = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    let eps = 1e-9;
    out.par_chunks_mut(w)
        .zip(mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, mrow))| {
            for x in 0..w {
                let qx = x as f64 - cx - t.dx;
                let qy = y as f64 - cy - t.dy;
                let px = c * qx - s * qy + cx;
                let py = s * qx + c * qy + cy;
                if px < -eps || py < -eps || px > (w - 1) as f64 + eps || py > (h - 1) as f64 + eps {
                    continue;
                }
                let px = px.clamp(0.0, (w - 1) as f64);
                let py = py.clamp(0.0, (h - 1) as f64);
                let x0 = (px.floor() as usize).min(w - 1);
                let y0 = (py.floor() as usize).min(h - 1);
                let fx = px - x0 as f64;
                let fy = py - y0 as f64;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let taps = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x1, y0, fx * (1.0 - fy)),
                    (x0, y1, (1.0 - fx) * fy),
                    (x1, y1, fx * fy),
                ];
                let mut acc = 0.0;
                let mut ok = true;
                for (tx, ty, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let idx = ty * w + tx;
                    if !valid[idx] {
                        ok = false;
                        break;
                    }
                    acc += wt * src[idx];
                }
                if ok {
                    row[x] = acc.clamp(0.0, 1.0);
                    mrow[x] = true;
                }
            }
        });
    Frame::with_mask(w, h, out, mask).expect("warped values are clamped to [0, 1]")
}

fn fft2(data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
}

/// Mean-filled, mean-removed, windowed copy of a frame as complex samples.
fn prepare(f: &Frame, window: &[f64]) -> Result<Vec<Complex<f64>>> {
    let valid = f.valid();
    let px = f.pixels();
    let count = f.valid_count();
    if count == 0 {
        return Err(Error::NoStructure);
    }
    let mean = px.iter().zip(valid).filter(|(_, v)| **v).map(|(p, _)| p).sum::<f64>() / count as f64;
    let var = px
        .iter()
        .zip(valid)
        .filter(|(_, v)| **v)
        .map(|(p, _)| (p - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    if var < 1e-12 {
        return Err(Error::NoStructure);
    }
    Ok(px
        .iter()
        .zip(valid)
        .zip(window)
        .map(|((p, v), wt)| Complex::new(if *v { (p - mean) * wt } else { 0.0 }, 0.0))
        .collect())
}

/// Separable Hann window.
fn hann_window(w: usize, h: usize) -> Vec<f64> {
    let hann = |n: usize, len: usize| 0.5 - 0.5 * (2.0 * PI * (n as f64 + 0.5) / len as f64).cos();
    (0..h)
        .flat_map(|y| (0..w).map(move |x| hann(x, w) * hann(y, h)))
        .collect()
}

/// Rotation-invariant radial Hann taper over the inscribed disc.
fn radial_window(w: usize, h: usize) -> Vec<f64> {
    let (cx, cy) = center(w, h);
    let radius = (w.min(h) as f64) / 2.0;
    (0..h)
        .flat_map(|y| {
            (0..w).map(move |x| {
                let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() / radius;
                if r >= 1.0 {
                    0.0
                } else {
                    0.5 + 0.5 * (PI * r).cos()
                }
            })
        })
        .collect()
}

/// Phase normalisation `c / (|c| + ε)` with `ε` a small fraction of the
/// largest magnitude, so frequencies holding no signal cannot dominate.
fn whiten(cross: &mut [Complex<f64>]) {
    let max = cross.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let eps = WHITEN_FLOOR * max + 1e-300;
    for c in cross.iter_mut() {
        *c /= c.norm() + eps;
    }
}

/// Sub-sample offset of a peak from its two neighbours.
fn parabolic(prev: f64, peak: f64, next: f64) -> f64 {
    let denom = prev - 2.0 * peak + next;
    if denom.abs() < 1e-300 {
        0.0
    } else {
        (0.5 * (prev - next) / denom).clamp(-0.5, 0.5)
    }
}

/// Phase correlation of two equally sized frames: returns the shift `s` with
/// `moving(q) ≈ reference(q - s)` and the height of the correlation peak.
fn phase_correlate(reference: &Frame, moving: &Frame, planner: &mut FftPlanner<f64>) -> Result<(f64, f64, f64)> {
    let (w, h) = (reference.width(), reference.height());
    let window = hann_window(w, h);
    let mut a = prepare(reference, &window)?;
    let mut b = prepare(moving, &window)?;
    fft2(&mut a, w, h, false, planner);
    fft2(&mut b, w, h, false, planner);
    let raw: Vec<Complex<f64>> = b.iter().zip(&a).map(|(bv, av)| bv * av.conj()).collect();
    let mut cross = raw.clone();
    whiten(&mut cross);
    fft2(&mut cross, w, h, true, planner);
    let scale = 1.0 / (w * h) as f64;
    let surface: Vec<f64> = cross.iter().map(|c| c.re * scale).collect();
    let (best, peak) = surface.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
    );
    let (px, py) = (best % w, best / w);
    let at = |x: usize, y: usize| surface[y * w + x];
    let ox = parabolic(at((px + w - 1) % w, py), peak, at((px + 1) % w, py));
    let oy = parabolic(at(px, (py + h - 1) % h), peak, at(px, (py + 1) % h));
    let wrap = |p: usize, n: usize| if p > n / 2 { p as f64 - n as f64 } else { p as f64 };
    let (sx, sy) = refine_shift(&raw, w, h, wrap(px, w) + ox, wrap(py, h) + oy);
    Ok((sx, sy, peak))
}

/// Sub-pixel refinement by a weighted least-squares fit of the cross-power
/// phase, `arg C(u, v) = -2π (u sx / w + v sy / h)`, over low frequencies.
fn refine_shift(raw: &[Complex<f64>], w: usize, h: usize, mut sx: f64, mut sy: f64) -> (f64, f64) {
    let signed = |k: usize, n: usize| if k > n / 2 { k as f64 - n as f64 } else { k as f64 };
    for _ in 0..3 {
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..h {
            let fv = signed(y, h) / h as f64;
            if fv.abs() > REFINE_BAND {
                continue;
            }
            for x in 0..w {
                let fu = signed(x, w) / w as f64;
                if fu.abs() > REFINE_BAND || (x == 0 && y == 0) {
                    continue;
                }
                let c = raw[y * w + x];
                let wt = c.norm();
                if wt == 0.0 {
                    continue;
                }
                let phase = 2.0 * PI * (fu * sx + fv * sy);
                let residual = (c * Complex::from_polar(1.0, phase)).arg();
                // residual ≈ -2π (fu δx + fv δy)
                let (gx, gy) = (-2.0 * PI * fu, -2.0 * PI * fv);
                a11 += wt * gx * gx;
                a12 += wt * gx * gy;
                a22 += wt * gy * gy;
                b1 += wt * gx * residual;
                b2 += wt * gy * residual;
            }
        }
        let det = a11 * a22 - a12 * a12;
        if det.abs() < 1e-300 {
            break;
        }
        let dx = (a22 * b1 - a12 * b2) / det;
        let dy = (a11 * b2 - a12 * b1) / det;
        if dx.abs() > 1.0 || dy.abs() > 1.0 {
            break;
        }
        sx += dx;
        sy += dy;
        if dx.abs() < 1e-4 && dy.abs() < 1e-4 {
            break;
        }
    }
    (sx, sy)
}

/// `log(1 + |F|)` of the radially windowed frame, DC moved to the centre.
fn log_magnitude(f: &Frame, planner: &mut FftPlanner<f64>) -> Result<Vec<f64>> {
    let (w, h) = (f.width(), f.height());
    let mut a = prepare(f, &radial_window(w, h))?;
    fft2(&mut a, w, h, false, planner);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let sx = (x + w / 2) % w;
            let sy = (y + h / 2) % h;
            out[sy * w + sx] = a[y * w + x].norm().ln_1p();
        }
    }
    Ok(out)
}

/// Log-polar resampling of a centred spectrum: `RINGS` rows of `ANGLE_BINS`
/// angles over `[0, π)`, each row standardised.
fn polar_rings(spec: &[f64], w: usize, h: usize) -> Vec<Vec<f64>> {
    let (cu, cv) = ((w / 2) as f64, (h / 2) as f64);
    let side = w.min(h) as f64;
    let (rho_min, rho_max) = (2.0 / side, 0.25);
    let sample = |u: f64, v: f64| -> f64 {
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        let get = |x: f64, y: f64| {
            let xi = (x as isize).rem_euclid(w as isize) as usize;
            let yi = (y as isize).rem_euclid(h as isize) as usize;
            spec[yi * w + xi]
        };
        get(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + get(x0 + 1.0, y0) * fx * (1.0 - fy)
            + get(x0, y0 + 1.0) * (1.0 - fx) * fy
            + get(x0 + 1.0, y0 + 1.0) * fx * fy
    };
    (0..RINGS)
        .map(|k| {
            let rho = rho_min * (rho_max / rho_min).powf(k as f64 / (RINGS - 1) as f64);
            let mut ring: Vec<f64> = (0..ANGLE_BINS)
                .map(|j| {
                    let phi = PI * j as f64 / ANGLE_BINS as f64;
                    sample(cu + rho * phi.cos() * w as f64, cv + rho * phi.sin() * h as f64)
                })
                .collect();
            let mean = ring.iter().sum::<f64>() / ANGLE_BINS as f64;
            let sd = (ring.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ANGLE_BINS as f64).sqrt();
            for v in ring.iter_mut() {
                *v = if sd > 1e-12 { (*v - mean) / sd } else { 0.0 };
            }
            ring
        })
        .collect()
}

/// Rotation in degrees within `[0, 180)`, defined modulo 180.
fn estimate_rotation_mod_pi(reference: &Frame, moving: &Frame, planner: &mut FftPlanner<f64>) -> Result<f64> {
    let (w, h) = (reference.width(), reference.height());
    let ra = polar_rings(&log_magnitude(reference, planner)?, w, h);
    let rb = polar_rings(&log_magnitude(moving, planner)?, w, h);
    let fft = planner.plan_fft_forward(ANGLE_BINS);
    let ifft = planner.plan_fft_inverse(ANGLE_BINS);
    let mut cross = vec![Complex::new(0.0, 0.0); ANGLE_BINS];
    for (a, b) in ra.iter().zip(&rb) {
        let mut fa: Vec<Complex<f64>> = a.iter().map(|&v| Complex::new(v, 0.0)).collect();
        let mut fb: Vec<Complex<f64>> = b.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft.process(&mut fa);
        fft.process(&mut fb);
        for ((c, x), y) in cross.iter_mut().zip(&fb).zip(&fa) {
            *c += x * y.conj();
        }
    }
    whiten(&mut cross);
    ifft.process(&mut cross);
    let surface: Vec<f64> = cross.iter().map(|c| c.re).collect();
    let (best, peak) = surface.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
    );
    if !peak.is_finite() || peak <= 0.0 {
        return Err(Error::NoStructure);
    }
    let n = ANGLE_BINS;
    let off = parabolic(surface[(best + n - 1) % n], peak, surface[(best + 1) % n]);
    let bins = (best as f64 + off).rem_euclid(n as f64);
    Ok(bins * 180.0 / n as f64)
}

/// Translation for a fixed rotation: un-rotate, phase-correlate, rotate the
/// shift back. Returns the transform and the correlation peak.
fn translation_for(
    reference: &Frame,
    moving: &Frame,
    theta: f64,
    planner: &mut FftPlanner<f64>,
) -> Result<(RigidTransform, f64)> {
    let unrotated = warp_frame(moving, &RigidTransform::new(-theta, 0.0, 0.0));
    let (mut sx, mut sy, peak) = phase_correlate(reference, &unrotated, planner)?;
    // the fixed window pulls estimates towards zero; re-centre and re-measure
    for _ in 0..RECENTER_PASSES {
        let centred = warp_frame(&unrotated, &RigidTransform::new(0.0, -sx, -sy));
        match phase_correlate(reference, &centred, planner) {
            Ok((dx, dy, _)) if dx.abs() < 2.0 && dy.abs() < 2.0 => {
                sx += dx;
                sy += dy;
            }
            _ => break,
        }
    }
    // the un-rotated frame is the reference shifted by R(-θ) t
    let (s, c) = theta.to_radians().sin_cos();
    Ok((RigidTransform::new(theta, c * sx - s * sy, s * sx + c * sy), peak))
}

/// Normalised cross-correlation of the reference with the moving frame
/// mapped back through `t`, over pixels valid in both.
fn alignment_score(reference: &Frame, moving: &Frame, t: &RigidTransform) -> f64 {
    let back = warp_frame(moving, &t.inverse());
    let pairs: Vec<(f64, f64)> = reference
        .pixels()
        .iter()
        .zip(reference.valid())
        .zip(back.pixels().iter().zip(back.valid()))
        .filter(|((_, va), (_, vb))| **va && **vb)
        .map(|((a, _), (b, _))| (*a, *b))
        .collect();
    if pairs.len() < 16 {
        return f64::NEG_INFINITY;
    }
    let n = pairs.len() as f64;
    let (ma, mb) = pairs.iter().fold((0.0, 0.0), |acc, (a, b)| (acc.0 + a, acc.1 + b));
    let (ma, mb) = (ma / n, mb / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        sab += (a - ma) * (b - mb);
        saa += (a - ma) * (a - ma);
        sbb += (b - mb) * (b - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return f64::NEG_INFINITY;
    }
    sab / (saa * sbb).sqrt()
}

/// Estimates `t` with `moving ≈ warp_frame(reference, t)`.
pub fn estimate_rigid_transform(reference: &Frame, moving: &Frame) -> Result<RigidTransform> {
    estimate_rigid_transform_near(reference, moving, None)
}

/// [`estimate_rigid_transform`] with an optional guess (typically the
/// previous frame's transform). The guess competes with the spectral
/// estimate on the spatial alignment score, which helps on smooth scenes
/// whose magnitude spectra carry little angular structure.
pub fn estimate_rigid_transform_near(
    reference: &Frame,
    moving: &Frame,
    prior: Option<&RigidTransform>,
) -> Result<RigidTransform> {
    let (w, h) = (reference.width(), reference.height());
    if moving.width() != w || moving.height() != h {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            found: (moving.width(), moving.height()),
            path: "<moving frame>".into(),
        });
    }
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::invalid(format!(
            "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}"
        )));
    }
    let mut planner = FftPlanner::new();
    let base = estimate_rotation_mod_pi(reference, moving, &mut planner)?;
    let mut coarse: Option<(f64, RigidTransform)> = None;
    for theta in [base, base - 180.0] {
        let (t, peak) = match translation_for(reference, moving, theta, &mut planner) {
            Ok(v) => v,
            Err(Error::NoStructure) => continue,
            Err(e) => return Err(e),
        };
        if coarse.is_none_or(|(p, _)| peak > p) {
            coarse = Some((peak, t));
        }
    }
    let (_, mut coarse) = coarse.ok_or(Error::NoStructure)?;

    // golden-section refinement of the angle on the spatial alignment score
    let mut eval = |theta: f64| -> (f64, RigidTransform) {
        match translation_for(reference, moving, theta, &mut planner) {
            Ok((t, _)) => (alignment_score(reference, moving, &t), t),
            Err(_) => (f64::NEG_INFINITY, RigidTransform::new(theta, 0.0, 0.0)),
        }
    };
    if let Some(p) = prior {
        let (score, t) = eval(p.rotation);
        if score > alignment_score(reference, moving, &coarse) {
            coarse = t;
        }
    }
    let theta0 = coarse.rotation;
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (theta0 - REFINE_SPAN, theta0 + REFINE_SPAN);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let mut f1 = eval(x1);
    let mut f2 = eval(x2);
    while hi - lo > REFINE_TOL {
        if f1.0 >= f2.0 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = eval(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = eval(x2);
        }
    }
    let refined = if f1.0 >= f2.0 { f1 } else { f2 };
    let start = alignment_score(reference, moving, &coarse);
    Ok(if refined.0 >= start { refined.1 } else { coarse })
}

/// Per-frame result of [`register_sequence`].
#[derive(Debug, Clone)]
pub struct Registered {
    pub video: VideoMatrix,
    /// Estimated `t` of every frame relative to its chunk reference.
    pub transforms: Vec<RigidTransform>,
    pub references: Vec<usize>,
}

/// Registers every frame to the first frame of its chunk.
pub fn register_sequence(frames: &[Frame], chunk: usize) -> Result<Registered> {
    if chunk == 0 {
        return Err(Error::invalid("chunk must be at least 1"));
    }
    if frames.is_empty() {
        return Err(Error::invalid("no frames to register"));
    }
    let references: Vec<usize> = (0..frames.len()).step_by(chunk).collect();
    // chunks run in parallel; inside a chunk each frame seeds the next
    let results: Result<Vec<Vec<(Frame, RigidTransform)>>> = frames
        .par_chunks(chunk)
        .map(|block| {
            let reference = &block[0];
            let mut out = vec![(reference.clone(), RigidTransform::identity())];
            let mut prior = RigidTransform::identity();
            for f in &block[1..] {
                let t = estimate_rigid_transform_near(reference, f, Some(&prior))?;
                out.push((warp_frame(f, &t.inverse()), t));
                prior = t;
            }
            Ok(out)
        })
        .collect();
    let (out, transforms): (Vec<Frame>, Vec<RigidTransform>) = results?.into_iter().flatten().unzip();
    Ok(Registered {
        video: VideoMatrix::from_frames(&out)?,
        transforms,
        references,
    })
}

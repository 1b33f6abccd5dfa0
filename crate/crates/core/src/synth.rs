//! Seeded synthetic ViSAR-like scenes with planted ground truth.
//!
//! A frame is `clamp(background - shadows + noise)`: a smooth low-rank
//! background in `[0.3, 0.9]`, dark rectangles moving along straight tracks,
//! and Gaussian-mixture noise. An optional per-frame rotation is applied last.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DetectionBox;
use crate::registration::{warp_frame, RigidTransform};
use crate::videodata::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowTrack {
    /// Top-left corner at frame 0, pixels.
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Width and height, pixels.
    pub size: [usize; 2],
    /// Intensity removed from the background, in `(0, 1]`.
    pub depth: f64,
}

impl ShadowTrack {
    /// Integer top-left corner at frame `t`.
    pub fn corner(&self, t: usize) -> (i64, i64) {
        (
            (self.start[0] + self.velocity[0] * t as f64).round() as i64,
            (self.start[1] + self.velocity[1] * t as f64).round() as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    /// Standard deviations.
    pub sigmas: Vec<f64>,
}

impl MixtureSpec {
    /// `sum_k π_k σ_k²`.
    pub fn variance(&self) -> f64 {
        self.weights.iter().zip(&self.sigmas).map(|(p, s)| p * s * s).sum()
    }
}

/// Scene description; the JSON form uses these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub rank: usize,
    #[serde(default)]
    pub shadows: Vec<ShadowTrack>,
    pub mixture: MixtureSpec,
    /// Degrees added per frame; frame `t` is rotated by `t * rotation_per_frame`.
    #[serde(default)]
    pub rotation_per_frame: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 120,
            rank: 3,
            shadows: vec![
                ShadowTrack {
                    start: [10.0, 30.0],
                    velocity: [0.8, 0.1],
                    size: [12, 8],
                    depth: 0.35,
                },
                ShadowTrack {
                    start: [100.0, 90.0],
                    velocity: [-0.7, -0.3],
                    size: [12, 8],
                    depth: 0.35,
                },
            ],
            mixture: MixtureSpec {
                weights: vec![0.85, 0.15],
                sigmas: vec![0.01, 0.05],
            },
            rotation_per_frame: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::invalid("width, height and frames must be positive"));
        }
        if self.rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        let m = &self.mixture;
        if m.weights.is_empty() || m.weights.len() != m.sigmas.len() {
            return Err(Error::invalid(
                "mixture weights and sigmas must be non-empty and of equal length",
            ));
        }
        if m.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || m.sigmas.iter().any(|s| s.is_nan() || *s < 0.0) {
            return Err(Error::invalid("mixture weights and sigmas must be non-negative"));
        }
        if (m.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture weights must sum to 1"));
        }
        if !self.rotation_per_frame.is_finite() {
            return Err(Error::invalid("rotation_per_frame must be finite"));
        }
        for (k, s) in self.shadows.iter().enumerate() {
            if !(s.depth > 0.0 && s.depth <= 1.0) {
                return Err(Error::invalid(format!("shadow {k}: depth must lie in (0, 1]")));
            }
            if s.size[0] == 0 || s.size[1] == 0 {
                return Err(Error::invalid(format!("shadow {k}: size must be positive")));
            }
            for t in 0..self.frames {
                let (x, y) = s.corner(t);
                if x < 0 || y < 0 || x as usize + s.size[0] > self.width || y as usize + s.size[1] > self.height {
                    return Err(Error::invalid(format!("shadow {k} leaves the frame at t = {t}")));
                }
            }
        }
        Ok(())
    }

    fn rotation_at(&self, t: usize) -> f64 {
        self.rotation_per_frame * t as f64
    }

    fn rotates(&self) -> bool {
        self.rotation_per_frame != 0.0 && self.frames > 1
    }
}

/// Generated scene. The clean matrices are `d x n`, column-major frames in
/// the un-rotated geometry, with `pre_rotation = background - shadows + noise`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub frames: Vec<Frame>,
    pub boxes: Vec<DetectionBox>,
    pub background: DMatrix<f64>,
    pub shadows: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    pub pre_rotation: DMatrix<f64>,
}

/// Draws `count` samples from a zero-mean Gaussian mixture.
pub fn sample_mixture_noise(rng: &mut impl Rng, mixture: &MixtureSpec, count: usize) -> Vec<f64> {
    let normals: Vec<Normal<f64>> = mixture
        .sigmas
        .iter()
        .map(|s| Normal::new(0.0, *s).expect("sigma validated non-negative"))
        .collect();
    (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = normals.len() - 1;
            for (j, w) in mixture.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            normals[k].sample(rng)
        })
        .collect()
}

fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ t as u64);
    rng.set_stream(1);
    rng
}

/// Smooth spatial pattern: Gaussian blobs plus low-frequency cosines.
fn spatial_pattern(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<f64> {
    let side = width.min(height) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..12)
        .map(|_| {
            (
                rng.random_range(0.0..width as f64),
                rng.random_range(0.0..height as f64),
                rng.random_range(0.04..0.12) * side,
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::PI),
                rng.random_range(1.0..3.5) / side,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.2..0.6),
            )
        })
        .collect();
    (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            let mut v = 0.0;
            for (bx, by, s, a) in &blobs {
                v += a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp();
            }
            for (ang, freq, phase, a) in &waves {
                let proj = x * ang.cos() + y * ang.sin();
                v += a * (std::f64::consts::TAU * freq * proj + phase).cos();
            }
            v
        })
        .collect()
}

/// Rank-`r` background `U Vᵀ` with the first temporal factor constant, scaled
/// affinely into `[0.3, 0.9]` (the offset folds into the first spatial factor).
fn background(spec: &SceneSpec, width: usize, height: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let d = width * height;
    let n = spec.frames;
    let r = spec.rank;
    let mut u = DMatrix::zeros(d, r);
    for k in 0..r {
        let p = spatial_pattern(rng, width, height);
        u.set_column(k, &nalgebra::DVector::from_vec(p));
    }
    let mut v = DMatrix::zeros(n, r);
    for k in 0..r {
        let period = rng.random_range(0.5..2.0) * n.max(2) as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.1..0.3);
        for t in 0..n {
            v[(t, k)] = if k == 0 {
                1.0
            } else {
                amp * (std::f64::consts::TAU * t as f64 / period + phase).sin()
            };
        }
    }
    let mut bg = &u * v.transpose();
    let (lo, hi) = (bg.min(), bg.max());
    let (a, b) = if hi > lo {
        (0.6 / (hi - lo), 0.3 - 0.6 * lo / (hi - lo))
    } else {
        (0.0, 0.6)
    };
    bg.apply(|x| *x = a * *x + b);
    bg
}

/// Padded canvas side used when the scene rotates, so rotated frames have no
/// empty corners after cropping.
fn canvas(spec: &SceneSpec) -> (usize, usize, usize, usize) {
    if !spec.rotates() {
        return (spec.width, spec.height, 0, 0);
    }
    let diag = ((spec.width * spec.width + spec.height * spec.height) as f64)
        .sqrt()
        .ceil() as usize
        + 4;
    let pw = diag + (diag + spec.width) % 2;
    let ph = diag + (diag + spec.height) % 2;
    (pw, ph, (pw - spec.width) / 2, (ph - spec.height) / 2)
}

fn crop(src: &[f64], sw: usize, ox: usize, oy: usize, w: usize, h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        out.extend_from_slice(&src[(y + oy) * sw + ox..(y + oy) * sw + ox + w]);
    }
    out
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h, n) = (spec.width, spec.height, spec.frames);
    let (cw, ch, ox, oy) = canvas(spec);
    let mut layout = ChaCha8Rng::seed_from_u64(spec.seed);
    let bg_canvas = background(spec, cw, ch, &mut layout);
    let d = w * h;
    let mut background_m = DMatrix::zeros(d, n);
    let mut shadows_m = DMatrix::zeros(d, n);
    let mut noise_m = DMatrix::zeros(d, n);
    let mut pre_m = DMatrix::zeros(d, n);
    let mut frames = Vec::with_capacity(n);

    for t in 0..n {
        let bg = bg_canvas.column(t);
        let mut shadow = vec![0.0f64; cw * ch];
        for s in &spec.shadows {
            let (x0, y0) = s.corner(t);
            for y in 0..s.size[1] {
                for x in 0..s.size[0] {
                    let idx = (y0 as usize + y + oy) * cw + x0 as usize + x + ox;
                    shadow[idx] = shadow[idx].max(s.depth.min(bg[idx]));
                }
            }
        }
        let mut rng = frame_rng(spec.seed, t);
        let raw = sample_mixture_noise(&mut rng, &spec.mixture, cw * ch);
        let composite: Vec<f64> = (0..cw * ch)
            .map(|i| (bg[i] - shadow[i] + raw[i]).clamp(0.0, 1.0))
            .collect();

        let bg_c = crop(bg.as_slice(), cw, ox, oy, w, h);
        let sh_c = crop(&shadow, cw, ox, oy, w, h);
        let comp_c = crop(&composite, cw, ox, oy, w, h);
        for i in 0..d {
            background_m[(i, t)] = bg_c[i];
            shadows_m[(i, t)] = sh_c[i];
            noise_m[(i, t)] = comp_c[i] - (bg_c[i] - sh_c[i]);
            pre_m[(i, t)] = comp_c[i];
        }
        let frame = if spec.rotates() {
            let big = Frame::new(cw, ch, composite)?;
            let rotated = warp_frame(&big, &RigidTransform::new(spec.rotation_at(t), 0.0, 0.0));
            Frame::new(w, h, crop(rotated.pixels(), cw, ox, oy, w, h))?
        } else {
            Frame::new(w, h, comp_c)?
        };
        frames.push(frame);
    }
    Ok(Scene {
        frames,
        boxes: ground_truth_boxes(spec)?,
        background: background_m,
        shadows: shadows_m,
        noise: noise_m,
        pre_rotation: pre_m,
    })
}

/// One box per shadow per frame around the (rotated) rectangle footprint,
/// clipped to the frame.
pub fn ground_truth_boxes(spec: &SceneSpec) -> Result<Vec<DetectionBox>> {
    spec.validate()?;
    let (cx, cy) = ((spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0);
    let mut boxes = Vec::new();
    for t in 0..spec.frames {
        let (s, c) = spec.rotation_at(t).to_radians().sin_cos();
        for track in &spec.shadows {
            let (x0, y0) = track.corner(t);
            let (x0, y0) = (x0 as f64 - 0.5, y0 as f64 - 0.5);
            let (x1, y1) = (x0 + track.size[0] as f64, y0 + track.size[1] as f64);
            let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
            let mapped: Vec<(f64, f64)> = corners
                .iter()
                .map(|&(x, y)| (c * (x - cx) - s * (y - cy) + cx, s * (x - cx) + c * (y - cy) + cy))
                .collect();
            let lo_x = mapped
                .iter()
                .map(|p| p.0)
                .fold(f64::INFINITY, f64::min)
                .floor()
                .max(0.0) as usize;
            let hi_x = (mapped
                .iter()
                .map(|p| p.0)
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil()
                .max(0.0) as usize)
                .min(spec.width - 1);
            let lo_y = mapped
                .iter()
                .map(|p| p.1)
                .fold(f64::INFINITY, f64::min)
                .floor()
                .max(0.0) as usize;
            let hi_y = (mapped
                .iter()
                .map(|p| p.1)
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil()
                .max(0.0) as usize)
                .min(spec.height - 1);
            // pixels whose centre falls inside the rotated footprint
            let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
            for qy in lo_y..=hi_y {
                for qx in lo_x..=hi_x {
                    let (dx, dy) = (qx as f64 - cx, qy as f64 - cy);
                    let px = c * dx + s * dy + cx;
                    let py = -s * dx + c * dy + cy;
                    if px > x0 && px < x1 && py > y0 && py < y1 {
                        bx0 = bx0.min(qx);
                        by0 = by0.min(qy);
                        bx1 = bx1.max(qx);
                        by1 = by1.max(qy);
                    }
                }
            }
            if bx0 == usize::MAX {
                continue;
            }
            if bx1 < bx0 || by1 < by0 {
                continue;
            }
            boxes.push(DetectionBox {
                frame: t,
                x: bx0,
                y: by0,
                w: bx1 - bx0 + 1,
                h: by1 - by0 + 1,
                score: 1.0,
            });
        }
    }
    Ok(boxes)
}

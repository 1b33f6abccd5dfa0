//! Streaming driver: chunked PCA init, the per-frame online loop, the
//! foreground stack and its ADMM clean-up / rendering.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmOptions, AdmmReport};
use crate::error::{Error, Result};
use crate::gmd::{self, MixtureState, OnlineMixture, DEFAULT_FORGETTING};
use crate::linalg::{self, DEFAULT_RIDGE};
use crate::subspace::{self, SubspaceState};
use crate::videodata::VideoMatrix;

/// Percentile of the clamped shadow response mapped to full intensity.
pub const RENDER_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub chunk: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub eta: f64,
    /// `None` picks the rank of every chunk from its init window.
    pub rank: Option<usize>,
    pub forgetting: f64,
    pub inner_tol: f64,
    pub max_inner: usize,
    pub ridge: f64,
    /// Start each chunk from the previous chunk's basis and mixture instead of
    /// a fresh PCA init.
    pub carry_state: bool,
    pub swap_roles: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            chunk: 100,
            k: 5,
            eta: 0.98,
            rank: None,
            forgetting: DEFAULT_FORGETTING,
            inner_tol: 1e-6,
            max_inner: 20,
            ridge: DEFAULT_RIDGE,
            carry_state: false,
            swap_roles: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::invalid("chunk must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if let Some(r) = self.rank {
            if r == 0 {
                return Err(Error::invalid("rank must be at least 1"));
            }
            if self.chunk < r + 1 {
                return Err(Error::invalid(format!(
                    "chunk {} must be at least rank + 1 = {}",
                    self.chunk,
                    r + 1
                )));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::invalid(format!(
                "forgetting must lie in (0, 1], got {}",
                self.forgetting
            )));
        }
        if self.max_inner == 0 {
            return Err(Error::invalid("max_inner must be at least 1"));
        }
        Ok(())
    }

    fn admm_options(&self) -> AdmmOptions {
        AdmmOptions {
            swap_roles: self.swap_roles,
            ..AdmmOptions::default()
        }
    }
}

/// Residuals `x_t - U v_t` of every processed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundStack {
    pub width: usize,
    pub height: usize,
    pub residuals: DMatrix<f64>,
    pub mask: DMatrix<bool>,
    /// First frame index of every chunk.
    pub boundaries: Vec<usize>,
}

impl ForegroundStack {
    pub fn n(&self) -> usize {
        self.residuals.ncols()
    }

    /// `(start, end)` of every chunk.
    pub fn chunks(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        self.boundaries
            .iter()
            .enumerate()
            .map(|(c, &s)| (s, self.boundaries.get(c + 1).copied().unwrap_or(n)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub chunk: usize,
    pub rank: usize,
    pub log_likelihood: f64,
    pub inner_iterations: usize,
    pub converged: bool,
    pub ridged: bool,
    pub reseeded: Vec<usize>,
    pub mixture: MixtureState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub stack: ForegroundStack,
    pub diagnostics: Vec<FrameDiagnostics>,
}

struct FrameFit {
    v: DVector<f64>,
    weights: Vec<f64>,
    candidate: MixtureState,
    iterations: usize,
    converged: bool,
    ridged: bool,
}

/// Inner loop for one frame: E-step, candidate mixture, weighted solve.
fn fit_frame(
    x: &[f64],
    mask: &[bool],
    basis: &DMatrix<f64>,
    mixture: &OnlineMixture,
    cfg: &PipelineConfig,
) -> Result<FrameFit> {
    let plain: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let start = subspace::solve_coefficients_with_ridge(x, &plain, basis, cfg.ridge);
    let mut v = start.v;
    let mut ridged = start.ridged;
    let mut weights = plain;
    let mut candidate = mixture.state().clone();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_inner {
        iterations += 1;
        let residual = subspace::foreground_residual(x, mask, basis, &v);
        let gamma = gmd::estep_responsibilities(&residual, mask, &candidate);
        candidate = mixture.propose(&residual, mask, &gamma);
        weights = gmd::weight_matrix(&gamma, &candidate, mask);
        let next = subspace::solve_coefficients_with_ridge(x, &weights, basis, cfg.ridge);
        ridged |= next.ridged;
        let change = (&next.v - &v).norm() / (1.0 + next.v.norm());
        v = next.v;
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::Numerical("non-finite frame coefficients".into()));
        }
        if change < cfg.inner_tol {
            converged = true;
            break;
        }
    }
    Ok(FrameFit {
        v,
        weights,
        candidate,
        iterations,
        converged,
        ridged,
    })
}

/// Frames of `start..end` that have at least one valid pixel.
fn init_window(frames: &VideoMatrix, start: usize, end: usize) -> Result<VideoMatrix> {
    let keep: Vec<usize> = (start..end)
        .filter(|&j| frames.column_mask(j).iter().any(|&m| m))
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid(format!("frames {start}..{end} have no valid pixels")));
    }
    if keep.len() == end - start {
        return Ok(frames.columns(start, end));
    }
    VideoMatrix::new(
        frames.width(),
        frames.height(),
        frames.data().select_columns(&keep),
        frames.mask().select_columns(&keep),
    )
}

/// Runs the online loop over a registered sequence.
pub fn se_bsfv_stream(frames: &VideoMatrix, cfg: &PipelineConfig) -> Result<StreamOutput> {
    cfg.validate()?;
    let (d, n) = (frames.d(), frames.n());
    if n == 0 {
        return Err(Error::invalid("no frames to process"));
    }
    let mut residuals = DMatrix::zeros(d, n);
    let mut out_mask = frames.mask().clone();
    let boundaries: Vec<usize> = (0..n).step_by(cfg.chunk).collect();
    let mut diagnostics = Vec::with_capacity(n);
    let mut carried: Option<(SubspaceState, OnlineMixture)> = None;

    for (c, &start) in boundaries.iter().enumerate() {
        let end = (start + cfg.chunk).min(n);
        let (mut state, mut mixture) = match carried.take() {
            Some(pair) if cfg.carry_state => pair,
            _ => {
                let window = init_window(frames, start, end)?;
                let wanted = match cfg.rank {
                    Some(r) => r,
                    None => subspace::auto_rank(&window)?,
                };
                let rank = wanted.min(window.n()).min(d).max(1);
                if rank < wanted {
                    log::warn!(
                        "chunk {c}: rank reduced from {wanted} to {rank} for a {}-frame window",
                        window.n()
                    );
                }
                let init = subspace::init_pca(&window, rank, cfg.ridge, cfg.k)?;
                (init.state, OnlineMixture::new(init.mixture, cfg.forgetting))
            }
        };

        for j in start..end {
            let x = frames.column(j);
            let mask = frames.column_mask(j);
            let outcome = if mask.iter().any(|&m| m) {
                fit_frame(x, mask, state.basis(), &mixture, cfg)
            } else {
                Err(Error::invalid(format!("frame {j} has no valid pixels")))
            };
            match outcome {
                Ok(fit) => {
                    let residual = subspace::foreground_residual(x, mask, state.basis(), &fit.v);
                    let gamma = gmd::estep_responsibilities(&residual, mask, &fit.candidate);
                    let reseeded = mixture.commit(&residual, mask, &gamma);
                    let log_likelihood = gmd::log_likelihood(&residual, mask, mixture.state());
                    let v: Vec<f64> = fit.v.iter().copied().collect();
                    state.update_frame(x, &fit.weights, &v);
                    let updated = subspace::foreground_residual(x, mask, state.basis(), &fit.v);
                    residuals.column_mut(j).copy_from_slice(&updated);
                    diagnostics.push(FrameDiagnostics {
                        frame: j,
                        chunk: c,
                        rank: state.rank(),
                        log_likelihood,
                        inner_iterations: fit.iterations,
                        converged: fit.converged,
                        ridged: fit.ridged,
                        reseeded,
                        mixture: mixture.state().clone(),
                        error: None,
                    });
                }
                Err(e) => {
                    log::warn!("frame {j} skipped: {e}");
                    out_mask.column_mut(j).fill(false);
                    diagnostics.push(FrameDiagnostics {
                        frame: j,
                        chunk: c,
                        rank: state.rank(),
                        log_likelihood: f64::NAN,
                        inner_iterations: 0,
                        converged: false,
                        ridged: false,
                        reseeded: Vec::new(),
                        mixture: mixture.state().clone(),
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        carried = Some((state, mixture));
    }

    Ok(StreamOutput {
        stack: ForegroundStack {
            width: frames.width(),
            height: frames.height(),
            residuals,
            mask: out_mask,
            boundaries,
        },
        diagnostics,
    })
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    /// Rendered frames in `[0, 1]`; invalid pixels are 0 and masked.
    pub video: VideoMatrix,
    /// Shadow matrix `S` of every chunk, side by side.
    pub shadow: DMatrix<f64>,
    pub reports: Vec<AdmmReport>,
}

/// Negates, clamps at 0 and divides by the 99.5th percentile of the valid
/// pixels (capped at 1); invalid pixels and an all-zero response give 0.
pub fn render_shadow(signed: &[f64], mask: &[bool]) -> Vec<f64> {
    assert_eq!(signed.len(), mask.len());
    let mut response: Vec<f64> = signed.iter().map(|v| (-v).max(0.0)).collect();
    let mut valid: Vec<f64> = response.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect();
    let scale = if valid.is_empty() {
        0.0
    } else {
        linalg::percentile(&mut valid, RENDER_PERCENTILE)
    };
    for (v, &m) in response.iter_mut().zip(mask) {
        *v = if m && scale > 0.0 { (*v / scale).min(1.0) } else { 0.0 };
    }
    response
}

/// Per-chunk two-term decomposition of the stack and rendering of `S`.
pub fn finalize(stack: &ForegroundStack, cfg: &PipelineConfig) -> Result<Enhanced> {
    cfg.validate()?;
    let (d, n) = stack.residuals.shape();
    if n == 0 {
        return Err(Error::invalid("foreground stack is empty"));
    }
    let opts = cfg.admm_options();
    let mut shadow = DMatrix::zeros(d, n);
    let mut rendered = DMatrix::zeros(d, n);
    let mut reports = Vec::new();
    for (start, end) in stack.chunks() {
        let width = end - start;
        let mut f = stack.residuals.columns(start, width).into_owned();
        for (v, &valid) in f.iter_mut().zip(stack.mask.columns(start, width).iter()) {
            if !valid {
                *v = 0.0;
            }
        }
        let split = admm::rpca_two_term(&f, cfg.eta, &opts)?;
        let mask: Vec<bool> = stack.mask.columns(start, width).iter().copied().collect();
        let response = render_shadow(split.s.as_slice(), &mask);
        shadow.columns_mut(start, width).copy_from(&split.s);
        rendered.columns_mut(start, width).copy_from_slice(&response);
        reports.push(split.report);
    }
    Ok(Enhanced {
        video: VideoMatrix::new(stack.width, stack.height, rendered, stack.mask.clone())?,
        shadow,
        reports,
    })
}

/// [`se_bsfv_stream`] followed by [`finalize`].
pub fn enhance(frames: &VideoMatrix, cfg: &PipelineConfig) -> Result<(Enhanced, Vec<FrameDiagnostics>)> {
    let stream = se_bsfv_stream(frames, cfg)?;
    let enhanced = finalize(&stream.stack, cfg)?;
    Ok((enhanced, stream.diagnostics))
}

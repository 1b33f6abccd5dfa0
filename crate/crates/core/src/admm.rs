//! Proximal operators and inexact augmented-Lagrangian solvers for the
//! nuclear-norm / L1 decompositions.
//!
//! The two-term problem is `min ‖S‖_* + η‖O‖_1  s.t.  F = S + O` and the
//! three-term baseline is `min ‖B‖_* + ξ‖S‖_1 + γ‖N‖_F²  s.t.  X = B + S + N`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

/// `sign(x) max(|x| - tau, 0)`.
#[inline]
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

pub fn soft_threshold_matrix(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    m.map(|x| soft_threshold(x, tau))
}

/// Singular value thresholding `U soft(Σ, τ) Vᵀ`.
pub fn svt(m: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    svt_with_norm(m, tau).map(|(out, _)| out)
}

fn svt_with_norm(m: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, f64)> {
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!(
            "threshold must be finite and non-negative, got {tau}"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "singular value thresholding of a non-finite matrix".into(),
        ));
    }
    Ok(linalg::svt_gram(m, tau))
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    linalg::singular_values(m).iter().sum()
}

fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmOptions {
    pub max_iter: usize,
    /// Stop once `‖F - S - O‖_F / ‖F‖_F` falls to this value.
    pub tol: f64,
    /// Initial `μ` is `mu_scale / σ_max(F)`.
    pub mu_scale: f64,
    pub mu_growth: f64,
    pub mu_max: f64,
    /// Give `S` the L1 penalty and `O` the nuclear norm (two-term only).
    pub swap_roles: bool,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-7,
            mu_scale: 1.25,
            mu_growth: 1.6,
            mu_max: 1e7,
            swap_roles: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmmReport {
    pub iterations: usize,
    pub primal_residual: f64,
    pub converged: bool,
    pub objective: f64,
    /// Relative primal residual after every iteration.
    pub residual_history: Vec<f64>,
}

impl AdmmReport {
    fn trivial() -> Self {
        Self {
            iterations: 0,
            primal_residual: 0.0,
            converged: true,
            objective: 0.0,
            residual_history: Vec::new(),
        }
    }
}

/// Output of [`rpca_two_term`].
#[derive(Debug, Clone)]
pub struct TwoTerm {
    pub s: DMatrix<f64>,
    pub o: DMatrix<f64>,
    pub report: AdmmReport,
}

/// Two-term decomposition `F = S + O` with `S` nuclear-norm and `O` L1
/// penalised (roles exchanged when `opts.swap_roles`).
pub fn rpca_two_term(f: &DMatrix<f64>, eta: f64, opts: &AdmmOptions) -> Result<TwoTerm> {
    if eta <= 0.0 || !eta.is_finite() {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    let (low, sparse, report) = nuclear_l1_split(f, eta, opts)?;
    Ok(if opts.swap_roles {
        TwoTerm {
            s: sparse,
            o: low,
            report,
        }
    } else {
        TwoTerm {
            s: low,
            o: sparse,
            report,
        }
    })
}

/// `min ‖L‖_* + η‖P‖_1 s.t. F = L + P`; returns `(L, P, report)`.
fn nuclear_l1_split(
    f: &DMatrix<f64>,
    eta: f64,
    opts: &AdmmOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>, AdmmReport)> {
    let (d, n) = f.shape();
    let f_norm = f.norm();
    if f_norm == 0.0 {
        return Ok((DMatrix::zeros(d, n), DMatrix::zeros(d, n), AdmmReport::trivial()));
    }
    let mut mu = opts.mu_scale / linalg::spectral_norm(f);
    let mut y = DMatrix::zeros(d, n);
    let mut low = DMatrix::zeros(d, n);
    let mut sparse = DMatrix::zeros(d, n);
    let mut nuclear = 0.0;
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let inv_mu = 1.0 / mu;
        let target = f - &sparse + &y * inv_mu;
        let (l, nuc) = svt_with_norm(&target, inv_mu)?;
        low = l;
        nuclear = nuc;
        let target = f - &low + &y * inv_mu;
        sparse = soft_threshold_matrix(&target, eta * inv_mu);
        let z = f - &low - &sparse;
        let residual = z.norm() / f_norm;
        history.push(residual);
        y += z * mu;
        if residual <= opts.tol {
            converged = true;
            break;
        }
        mu = (mu * opts.mu_growth).min(opts.mu_max);
    }
    let report = AdmmReport {
        iterations: history.len(),
        primal_residual: history.last().copied().unwrap_or(0.0),
        converged,
        objective: nuclear + eta * l1(&sparse),
        residual_history: history,
    };
    if !converged {
        log::warn!(
            "two-term ADMM stopped at residual {:.3e} after {} iterations",
            report.primal_residual,
            report.iterations
        );
    }
    Ok((low, sparse, report))
}

/// Default `ξ = 1/√max(d, n)`.
pub fn default_xi(d: usize, n: usize) -> f64 {
    1.0 / (d.max(n).max(1) as f64).sqrt()
}

/// Default `γ = 100 ξ`.
pub fn default_gamma(d: usize, n: usize) -> f64 {
    100.0 * default_xi(d, n)
}

/// Output of [`rpca_three_term`].
#[derive(Debug, Clone)]
pub struct ThreeTerm {
    pub b: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub report: AdmmReport,
}

/// Three-block decomposition `X = B + S + N` with nuclear, L1 and squared
/// Frobenius penalties. `opts.swap_roles` is ignored.
pub fn rpca_three_term(x: &DMatrix<f64>, xi: f64, gamma: f64, opts: &AdmmOptions) -> Result<ThreeTerm> {
    if xi <= 0.0 || gamma <= 0.0 || !xi.is_finite() || !gamma.is_finite() {
        return Err(Error::invalid(format!(
            "xi and gamma must be positive, got {xi} and {gamma}"
        )));
    }
    let (d, n) = x.shape();
    let x_norm = x.norm();
    if x_norm == 0.0 {
        return Ok(ThreeTerm {
            b: DMatrix::zeros(d, n),
            s: DMatrix::zeros(d, n),
            n: DMatrix::zeros(d, n),
            report: AdmmReport::trivial(),
        });
    }
    let mut mu = opts.mu_scale / linalg::spectral_norm(x);
    let mut y = DMatrix::zeros(d, n);
    let mut b = DMatrix::zeros(d, n);
    let mut s = DMatrix::zeros(d, n);
    let mut noise = DMatrix::zeros(d, n);
    let mut nuclear = 0.0;
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iter {
        let inv_mu = 1.0 / mu;
        let (nb, nuc) = svt_with_norm(&(x - &s - &noise + &y * inv_mu), inv_mu)?;
        b = nb;
        nuclear = nuc;
        s = soft_threshold_matrix(&(x - &b - &noise + &y * inv_mu), xi * inv_mu);
        noise = (x - &b - &s + &y * inv_mu) * (mu / (2.0 * gamma + mu));
        let z = x - &b - &s - &noise;
        let residual = z.norm() / x_norm;
        history.push(residual);
        y += z * mu;
        if residual <= opts.tol {
            converged = true;
            break;
        }
        mu = (mu * opts.mu_growth).min(opts.mu_max);
    }
    let report = AdmmReport {
        iterations: history.len(),
        primal_residual: history.last().copied().unwrap_or(0.0),
        converged,
        objective: nuclear + xi * l1(&s) + gamma * noise.norm_squared(),
        residual_history: history,
    };
    if !converged {
        log::warn!(
            "three-term ADMM stopped at residual {:.3e} after {} iterations",
            report.primal_residual,
            report.iterations
        );
    }
    Ok(ThreeTerm { b, s, n: noise, report })
}

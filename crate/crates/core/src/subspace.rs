//! Low-rank background basis: initialisation, per-frame coefficient solves,
//! recursive per-pixel basis updates and the batch weighted ALS solver.
//!
//! Each pixel row `i` carries `A_i`, the inverse of the weighted Gram
//! accumulator `sum_j w_ij^2 v_j v_jᵀ (+ ridge)`, and `B_i = sum_j w_ij^2 x_ij v_j`.
//! The basis row is always `u_i = A_i B_i`. New frames enter `A_i` through a
//! Sherman-Morrison rank-one update, so no matrix is ever inverted online.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmd::{self, MixtureState, Responsibilities};
use crate::linalg::{self, DEFAULT_RIDGE};
use crate::videodata::VideoMatrix;

/// Largest rank chosen by [`auto_rank`].
pub const MAX_AUTO_RANK: usize = 10;
/// Singular-value mass that [`auto_rank`] must capture.
pub const AUTO_RANK_MASS: f64 = 0.95;
/// EM sweeps refining the initial variances on the init-window residual.
pub const INIT_EM_ITERS: usize = 30;
const INIT_EM_TOL: f64 = 1e-6;
/// Upper bound on residual entries used by the initial EM fit.
pub const INIT_EM_SAMPLES: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceState {
    rank: usize,
    basis: DMatrix<f64>,
    /// `d` blocks of `r x r`, each row-major (and symmetric).
    a: Vec<f64>,
    /// `d x r`, row-major.
    b: Vec<f64>,
}

impl SubspaceState {
    /// Builds the state from per-row statistics; the basis is `A_i B_i`.
    pub fn from_statistics(d: usize, rank: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != d * rank * rank || b.len() != d * rank {
            return Err(Error::invalid("statistics buffers do not match d and rank"));
        }
        let mut state = Self {
            rank,
            basis: DMatrix::zeros(d, rank),
            a,
            b,
        };
        for i in 0..d {
            let u = state.row_solution(i);
            for (c, val) in u.into_iter().enumerate() {
                state.basis[(i, c)] = val;
            }
        }
        Ok(state)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn d(&self) -> usize {
        self.basis.nrows()
    }

    /// The `d x r` basis `U`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn a_matrix(&self, i: usize) -> DMatrix<f64> {
        let r = self.rank;
        DMatrix::from_row_slice(r, r, &self.a[i * r * r..(i + 1) * r * r])
    }

    pub fn b_vector(&self, i: usize) -> DVector<f64> {
        let r = self.rank;
        DVector::from_column_slice(&self.b[i * r..(i + 1) * r])
    }

    fn row_solution(&self, i: usize) -> Vec<f64> {
        let r = self.rank;
        mat_vec(&self.a[i * r * r..(i + 1) * r * r], &self.b[i * r..(i + 1) * r], r)
    }

    /// Rank-one update of one pixel row with weight `w`, value `x` and the
    /// frame coefficients `v`. A zero weight leaves the row untouched.
    pub fn update_row(&mut self, i: usize, x: f64, w: f64, v: &[f64]) {
        let r = self.rank;
        let a = &mut self.a[i * r * r..(i + 1) * r * r];
        let b = &mut self.b[i * r..(i + 1) * r];
        if let Some(u) = sherman_morrison_step(a, b, x, w, v) {
            for (c, val) in u.into_iter().enumerate() {
                self.basis[(i, c)] = val;
            }
        }
    }

    /// Updates every pixel row for one frame; rows are independent and run
    /// in parallel.
    pub fn update_frame(&mut self, x: &[f64], w: &[f64], v: &[f64]) {
        let r = self.rank;
        assert_eq!(x.len(), self.d());
        assert_eq!(w.len(), self.d());
        assert_eq!(v.len(), r);
        let updates: Vec<Option<Vec<f64>>> = self
            .a
            .par_chunks_mut(r * r)
            .zip(self.b.par_chunks_mut(r))
            .zip(x.par_iter().zip(w.par_iter()))
            .map(|((a, b), (&xi, &wi))| sherman_morrison_step(a, b, xi, wi, v))
            .collect();
        for (i, u) in updates.into_iter().enumerate() {
            if let Some(u) = u {
                for (c, val) in u.into_iter().enumerate() {
                    self.basis[(i, c)] = val;
                }
            }
        }
    }
}

/// `A <- A - w² (A v)(A v)ᵀ / (1 + w² vᵀ A v)`, `B <- B + w² x v`, returns `A B`.
fn sherman_morrison_step(a: &mut [f64], b: &mut [f64], x: f64, w: f64, v: &[f64]) -> Option<Vec<f64>> {
    let w2 = w * w;
    if w2 == 0.0 || !w2.is_finite() || !x.is_finite() {
        return None;
    }
    let r = v.len();
    let av = mat_vec(a, v, r);
    let quad: f64 = v.iter().zip(&av).map(|(p, q)| p * q).sum();
    let scale = w2 / (1.0 + w2 * quad);
    for p in 0..r {
        for q in 0..r {
            a[p * r + q] -= scale * av[p] * av[q];
        }
    }
    for (bp, vp) in b.iter_mut().zip(v) {
        *bp += w2 * x * vp;
    }
    Some(mat_vec(a, b, r))
}

#[inline]
fn mat_vec(a: &[f64], v: &[f64], r: usize) -> Vec<f64> {
    (0..r)
        .map(|p| a[p * r..(p + 1) * r].iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

/// Result of one weighted least-squares coefficient solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSolve {
    pub v: DVector<f64>,
    /// True when the weighted Gram matrix was singular and a ridge was added.
    pub ridged: bool,
}

/// `v = [Uᵀ diag(w)² U]⁻¹ Uᵀ diag(w)² x`.
pub fn solve_coefficients(x: &[f64], w: &[f64], basis: &DMatrix<f64>) -> CoefficientSolve {
    solve_coefficients_with_ridge(x, w, basis, DEFAULT_RIDGE)
}

pub fn solve_coefficients_with_ridge(x: &[f64], w: &[f64], basis: &DMatrix<f64>, ridge: f64) -> CoefficientSolve {
    let d = basis.nrows();
    assert_eq!(x.len(), d);
    assert_eq!(w.len(), d);
    let mut weighted = basis.clone();
    for (i, wi) in w.iter().enumerate() {
        weighted.row_mut(i).scale_mut(*wi);
    }
    let gram = weighted.tr_mul(&weighted);
    let wx = DVector::from_iterator(d, x.iter().zip(w).map(|(xi, wi)| xi * wi));
    let rhs = weighted.tr_mul(&wx);
    let (v, ridged) = linalg::solve_spd(&gram, &rhs, ridge);
    CoefficientSolve { v, ridged }
}

/// `x - U v` on valid pixels, zero on invalid ones.
pub fn foreground_residual(x: &[f64], mask: &[bool], basis: &DMatrix<f64>, v: &DVector<f64>) -> Vec<f64> {
    let fitted = basis * v;
    x.iter()
        .zip(mask)
        .zip(fitted.iter())
        .map(|((xi, valid), fi)| if *valid { xi - fi } else { 0.0 })
        .collect()
}

/// Row-mean fill of invalid entries; errors if any column is fully invalid.
fn mean_filled(x: &VideoMatrix) -> Result<DMatrix<f64>> {
    let (d, n) = (x.d(), x.n());
    for j in 0..n {
        if !x.column_mask(j).iter().any(|v| *v) {
            return Err(Error::invalid(format!("frame {j} has no valid pixels")));
        }
    }
    let data = x.data();
    let mask = x.mask();
    let mut filled = data.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut row_means = vec![None; d];
    for i in 0..d {
        let (mut s, mut c) = (0.0, 0usize);
        for j in 0..n {
            if mask[(i, j)] {
                s += data[(i, j)];
                c += 1;
            }
        }
        total += s;
        count += c;
        if c > 0 {
            row_means[i] = Some(s / c as f64);
        }
    }
    let global = if count > 0 { total / count as f64 } else { 0.0 };
    for i in 0..d {
        let fill = row_means[i].unwrap_or(global);
        for j in 0..n {
            if !mask[(i, j)] {
                filled[(i, j)] = fill;
            }
        }
    }
    Ok(filled)
}

/// Smallest rank whose leading singular values hold at least 95% of the
/// singular-value mass of the (mean-filled) window, capped at 10 and at
/// `min(d, n) - 1` (at least 1).
pub fn auto_rank(x: &VideoMatrix) -> Result<usize> {
    let filled = mean_filled(x)?;
    let full = x.d().min(x.n());
    let svd = linalg::thin_svd(&filled, full);
    let s = svd.singular_values;
    let cap = MAX_AUTO_RANK.min(full.saturating_sub(1)).max(1);
    let total: f64 = s.iter().sum();
    if total <= 0.0 {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (j, sv) in s.iter().enumerate() {
        acc += sv;
        if acc / total >= AUTO_RANK_MASS || j + 1 >= cap {
            return Ok((j + 1).min(cap));
        }
    }
    Ok(cap)
}

/// Output of [`init_pca`].
#[derive(Debug, Clone)]
pub struct PcaInit {
    pub state: SubspaceState,
    /// `n0 x r` coefficients of the initial window.
    pub coefficients: DMatrix<f64>,
    pub mixture: MixtureState,
    /// Batch EM fit of the initial residual, before the weights are reset.
    pub fitted: MixtureState,
}

/// Truncated-SVD initialisation of basis, coefficients and mixture.
///
/// The basis is `U_r S_r` and the coefficients `V_r` of the mean-filled
/// window. The mixture starts with weights `1/K` and zero evidence; its
/// variances come from a short batch EM over at most [`INIT_EM_SAMPLES`]
/// strided entries of the initial residual, started from
/// responsibilities assigned by `|residual|` quantile bands (uniform
/// responsibilities would leave all components identical forever).
/// `A_i`, `B_i` use per-element weights from the fitted mixture's
/// responsibilities on that residual, and the basis is reset to `A_i B_i`.
pub fn init_pca(x0: &VideoMatrix, rank: usize, ridge: f64, k: usize) -> Result<PcaInit> {
    let (d, n0) = (x0.d(), x0.n());
    if rank == 0 || rank > d.min(n0) {
        return Err(Error::invalid(format!(
            "rank {rank} must lie in 1..=min(d, n0) = {}",
            d.min(n0)
        )));
    }
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let filled = mean_filled(x0)?;
    let svd = linalg::thin_svd(&filled, rank);
    let mut basis = svd.u.clone();
    for c in 0..rank {
        basis.column_mut(c).scale_mut(svd.singular_values[c]);
    }
    let coefficients = svd.v;

    let residual = &filled - &basis * coefficients.transpose();
    let mask = x0.mask().as_slice();
    let stride = residual.len().div_ceil(INIT_EM_SAMPLES).max(1);
    let sample: Vec<f64> = residual.as_slice().iter().step_by(stride).copied().collect();
    let sample_mask: Vec<bool> = mask.iter().step_by(stride).copied().collect();
    let bands = gmd::quantile_band_responsibilities(&sample, &sample_mask, k);
    let mut fitted = gmd::mstep_batch(&sample, &sample_mask, &bands);
    let mut ll = gmd::log_likelihood(&sample, &sample_mask, &fitted);
    for _ in 0..INIT_EM_ITERS {
        let gamma = gmd::estep_responsibilities(&sample, &sample_mask, &fitted);
        let next = gmd::mstep_batch(&sample, &sample_mask, &gamma);
        let next_ll = gmd::log_likelihood(&sample, &sample_mask, &next);
        fitted = next;
        let done = (next_ll - ll).abs() <= INIT_EM_TOL * ll.abs().max(1.0);
        ll = next_ll;
        if done {
            break;
        }
    }
    let mixture = MixtureState::uniform(fitted.variances().to_vec())?;
    let gamma = gmd::estep_responsibilities(residual.as_slice(), mask, &fitted);
    let weights = gmd::weight_matrix(&gamma, &fitted, mask);

    let data = x0.data();
    let mask = x0.mask();
    let r = rank;
    let mut a = vec![0.0; d * r * r];
    let mut b = vec![0.0; d * r];
    a.par_chunks_mut(r * r)
        .zip(b.par_chunks_mut(r))
        .enumerate()
        .try_for_each(|(i, (a_i, b_i))| -> Result<()> {
            let mut gram = DMatrix::zeros(r, r);
            for j in 0..n0 {
                if !mask[(i, j)] {
                    continue;
                }
                let v = coefficients.row(j);
                let w2 = weights[i + j * d] * weights[i + j * d];
                for p in 0..r {
                    b_i[p] += w2 * data[(i, j)] * v[p];
                    for q in 0..r {
                        gram[(p, q)] += w2 * v[p] * v[q];
                    }
                }
            }
            let inv = linalg::ridge_inverse(&gram, ridge)
                .ok_or_else(|| Error::Numerical(format!("Gram matrix of row {i} is not positive definite")))?;
            for p in 0..r {
                for q in 0..r {
                    a_i[p * r + q] = inv[(p, q)];
                }
            }
            Ok(())
        })?;
    let state = SubspaceState::from_statistics(d, rank, a, b)?;
    Ok(PcaInit {
        state,
        coefficients,
        mixture,
        fitted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    pub rank: usize,
    pub k: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
    pub ridge: f64,
}

impl BatchOptions {
    pub fn new(rank: usize, k: usize) -> Self {
        Self {
            rank,
            k,
            max_iter: 100,
            tol: 1e-8,
            ridge: DEFAULT_RIDGE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchFit {
    pub basis: DMatrix<f64>,
    /// `n x r`.
    pub coefficients: DMatrix<f64>,
    pub mixture: MixtureState,
    pub responsibilities: Responsibilities,
    /// Log-likelihood after initialisation and after every outer iteration.
    pub likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl BatchFit {
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.basis * self.coefficients.transpose()
    }
}

fn masked_residual(x: &VideoMatrix, basis: &DMatrix<f64>, coefficients: &DMatrix<f64>) -> Vec<f64> {
    let fit = basis * coefficients.transpose();
    x.data()
        .iter()
        .zip(fit.iter())
        .zip(x.mask().iter())
        .map(|((xi, fi), v)| if *v { xi - fi } else { 0.0 })
        .collect()
}

/// Batch mixture-weighted low-rank fit by EM with weighted ALS.
///
/// Each outer iteration runs the E-step, the mixture M-step, then solves
/// every coefficient row of `V` and every basis row of `U` as weighted least
/// squares. The likelihood is non-decreasing across iterations; iteration
/// stops when its relative change drops below `tol`.
pub fn batch_gmd_lrr(x: &VideoMatrix, opts: &BatchOptions) -> Result<BatchFit> {
    let (d, n) = (x.d(), x.n());
    let r = opts.rank;
    let init = init_pca(x, r, opts.ridge, opts.k)?;
    let mut basis = init.state.basis().clone();
    let mut coefficients = init.coefficients;
    let mut mixture = init.mixture;
    let mask = x.mask().as_slice();
    let data = x.data();

    let mut residual = masked_residual(x, &basis, &coefficients);
    let mut likelihood = vec![gmd::log_likelihood(&residual, mask, &mixture)];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        iterations += 1;
        let gamma = gmd::estep_responsibilities(&residual, mask, &mixture);
        mixture = gmd::mstep_batch(&residual, mask, &gamma);
        let w = gmd::weight_matrix(&gamma, &mixture, mask);

        // V: one weighted solve per frame
        let rows: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let xj = &data.as_slice()[j * d..(j + 1) * d];
                let wj = &w[j * d..(j + 1) * d];
                solve_coefficients_with_ridge(xj, wj, &basis, opts.ridge).v
            })
            .collect();
        for (j, v) in rows.iter().enumerate() {
            coefficients.set_row(j, &v.transpose());
        }

        // U: one weighted solve per pixel
        let rows: Vec<DVector<f64>> = (0..d)
            .into_par_iter()
            .map(|i| {
                let mut gram = DMatrix::zeros(r, r);
                let mut rhs = DVector::zeros(r);
                for j in 0..n {
                    let wij = w[j * d + i];
                    if wij == 0.0 {
                        continue;
                    }
                    let w2 = wij * wij;
                    let v = coefficients.row(j);
                    for p in 0..r {
                        rhs[p] += w2 * data[(i, j)] * v[p];
                        for q in 0..r {
                            gram[(p, q)] += w2 * v[p] * v[q];
                        }
                    }
                }
                linalg::solve_spd(&gram, &rhs, opts.ridge).0
            })
            .collect();
        for (i, u) in rows.iter().enumerate() {
            basis.set_row(i, &u.transpose());
        }

        residual = masked_residual(x, &basis, &coefficients);
        let current = gmd::log_likelihood(&residual, mask, &mixture);
        let previous = *likelihood.last().expect("seeded with the initial value");
        likelihood.push(current);
        if (current - previous).abs() <= opts.tol * previous.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("batch GMD-LRR stopped after {iterations} iterations without converging");
    }
    let responsibilities = gmd::estep_responsibilities(&residual, mask, &mixture);
    Ok(BatchFit {
        basis,
        coefficients,
        mixture,
        responsibilities,
        likelihood,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Brute-force weighted pseudo-inverse: (W U)⁺ (W x) via full SVD.
    fn pinv_oracle(x: &[f64], w: &[f64], u: &DMatrix<f64>) -> DVector<f64> {
        let mut wu = u.clone();
        for (i, wi) in w.iter().enumerate() {
            wu.row_mut(i).scale_mut(*wi);
        }
        let wx = DVector::from_iterator(x.len(), x.iter().zip(w).map(|(a, b)| a * b));
        wu.pseudo_inverse(1e-14).unwrap() * wx
    }

    #[test]
    fn unweighted_orthonormal_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_matrix(12, 3, &mut rng).qr().q();
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = solve_coefficients(&x, &[1.0; 12], &q);
        let expect = q.tr_mul(&DVector::from_vec(x));
        assert!((got.v - expect).norm() < 1e-12);
        assert!(!got.ridged);
    }

    #[test]
    fn in_span_solve_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_matrix(15, 3, &mut rng);
        let c = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let x = &u * &c;
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(0.5..2.0)).collect();
        let got = solve_coefficients(x.as_slice(), &w, &u);
        assert!((&got.v - &c).norm() < 1e-12);
        let res = foreground_residual(x.as_slice(), &[true; 15], &u, &got.v);
        assert!(res.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn weighted_solve_matches_pseudo_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_matrix(20, 3, &mut rng);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(0.1..3.0)).collect();
        let got = solve_coefficients(&x, &w, &u).v;
        let oracle = pinv_oracle(&x, &w, &u);
        assert!((&got - &oracle).norm() <= 1e-10 * oracle.norm());
    }

    #[test]
    fn singular_system_is_ridged() {
        let u = DMatrix::from_element(4, 2, 1.0);
        let got = solve_coefficients(&[1.0; 4], &[1.0; 4], &u);
        assert!(got.ridged);
        assert!(got.v.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn residual_cases() {
        let u = DMatrix::zeros(3, 2);
        let v = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(
            foreground_residual(&[0.1, 0.2, 0.3], &[true; 3], &u, &v),
            vec![0.1, 0.2, 0.3]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_matrix(5, 2, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask = [true, false, true, true, true];
        let got = foreground_residual(&x, &mask, &u, &v);
        for i in 0..5 {
            let fitted: f64 = (0..2).map(|c| u[(i, c)] * v[c]).sum();
            let expect = if mask[i] { x[i] - fitted } else { 0.0 };
            assert!((got[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_update_is_noop() {
        let mut s = SubspaceState::from_statistics(1, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let before = s.clone();
        s.update_row(0, 3.0, 0.0, &[1.0, 2.0]);
        assert_eq!(s, before);
    }

    #[test]
    fn scalar_update() {
        let mut s = SubspaceState::from_statistics(1, 1, vec![1.0], vec![0.0]).unwrap();
        s.update_row(0, 1.0, 1.0, &[2.0]);
        assert!((s.a_matrix(0)[(0, 0)] - 0.2).abs() < 1e-15);
        assert!((s.b_vector(0)[0] - 2.0).abs() < 1e-15);
        assert!((s.basis()[(0, 0)] - 0.4).abs() < 1e-15);
    }

    /// Direct weighted normal-equation solve of a stream for one pixel.
    fn direct_row(xs: &[f64], ws: &[f64], vs: &[Vec<f64>], ridge: f64) -> DVector<f64> {
        let r = vs[0].len();
        let mut g = DMatrix::identity(r, r) * ridge;
        let mut rhs = DVector::zeros(r);
        for ((x, w), v) in xs.iter().zip(ws).zip(vs) {
            let v = DVector::from_column_slice(v);
            g += (w * w) * &v * v.transpose();
            rhs += (w * w * x) * &v;
        }
        g.lu().solve(&rhs).unwrap()
    }

    #[test]
    fn recursion_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (r, t, ridge) = (3, 40, 1e-6);
        let mut s = SubspaceState::from_statistics(
            1,
            r,
            DMatrix::<f64>::identity(r, r).scale(1.0 / ridge).as_slice().to_vec(),
            vec![0.0; r],
        )
        .unwrap();
        let (mut xs, mut ws, mut vs) = (vec![], vec![], vec![]);
        for _ in 0..t {
            let v: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = rng.random_range(0.0..1.0);
            let w = rng.random_range(0.5..3.0);
            s.update_row(0, x, w, &v);
            xs.push(x);
            ws.push(w);
            vs.push(v);
        }
        let direct = direct_row(&xs, &ws, &vs, ridge);
        let got = s.basis().row(0).transpose();
        assert!((&got - &direct).norm() <= 1e-8 * direct.norm());
        let ab = s.a_matrix(0) * s.b_vector(0);
        assert!((ab - got).norm() < 1e-9);
    }

    #[test]
    fn parallel_frame_update_matches_row_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (d, r) = (30, 2);
        let a: Vec<f64> = (0..d).flat_map(|_| vec![2.0, 0.1, 0.1, 1.0]).collect();
        let b: Vec<f64> = (0..d * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s1 = SubspaceState::from_statistics(d, r, a, b).unwrap();
        let mut s2 = s1.clone();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let w: Vec<f64> = (0..d).map(|i| if i % 5 == 0 { 0.0 } else { 1.5 }).collect();
        let v = [0.3, -0.7];
        s1.update_frame(&x, &w, &v);
        for i in 0..d {
            s2.update_row(i, x[i], w[i], &v);
        }
        assert_eq!(s1, s2);
    }

    #[test]
    fn a_stays_positive_definite_over_many_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = 4;
        let mut s =
            SubspaceState::from_statistics(1, r, DMatrix::<f64>::identity(r, r).as_slice().to_vec(), vec![0.0; r])
                .unwrap();
        for _ in 0..10_000 {
            let v: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.update_row(0, rng.random_range(0.0..1.0), rng.random_range(0.0..2.0), &v);
        }
        let a = s.a_matrix(0);
        assert!((&a - a.transpose()).amax() < 1e-9);
        let eig = a.symmetric_eigen();
        assert!(eig.eigenvalues.min() > 0.0);
    }

    fn low_rank_video(d: usize, n: usize, r: usize, seed: u64) -> (VideoMatrix, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_matrix(d, r, &mut rng);
        let v = random_matrix(n, r, &mut rng);
        let clean = &u * v.transpose();
        (VideoMatrix::from_data(d, 1, clean.clone()).unwrap(), clean)
    }

    #[test]
    fn pca_init_is_exact_on_low_rank_data() {
        let (x, clean) = low_rank_video(40, 12, 3, 5);
        let init = init_pca(&x, 3, DEFAULT_RIDGE, 5).unwrap();
        let recon = init.state.basis() * init.coefficients.transpose();
        assert!((recon - &clean).norm() <= 1e-8 * clean.norm());
        assert_eq!(init.mixture.weights(), &[0.2; 5]);
        assert_eq!(init.mixture.evidence(), &[0.0; 5]);
    }

    #[test]
    fn pca_init_statistics_match_direct_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, clean) = low_rank_video(25, 10, 2, 6);
        let noisy = clean.map(|v| v + 0.05 * rng.random_range(-1.0..1.0));
        let x = VideoMatrix::from_data(x.width(), x.height(), noisy).unwrap();
        let init = init_pca(&x, 2, DEFAULT_RIDGE, 3).unwrap();
        let f = &init.fitted;
        let v = &init.coefficients;
        let data = x.data();
        let residual = data - data * v * v.transpose();
        let w2 = |e: f64| -> f64 {
            let dens: Vec<f64> = f
                .weights()
                .iter()
                .zip(f.variances())
                .map(|(p, s2)| p * (-e * e / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt())
                .collect();
            let total: f64 = dens.iter().sum();
            dens.iter()
                .zip(f.variances())
                .map(|(g, s2)| g / total / (2.0 * s2))
                .sum()
        };
        for i in 0..25 {
            let mut gram = DMatrix::identity(2, 2) * DEFAULT_RIDGE;
            let mut b = DVector::zeros(2);
            for j in 0..v.nrows() {
                let vj = v.row(j).transpose();
                let w = w2(residual[(i, j)]);
                gram += &vj * vj.transpose() * w;
                b += &vj * (w * data[(i, j)]);
            }
            let oracle = gram.try_inverse().unwrap();
            let got = init.state.a_matrix(i);
            assert!((&got - &oracle).amax() <= 1e-8 * oracle.amax());
            assert!((init.state.b_vector(i) - &b).norm() <= 1e-8 * b.norm().max(1.0));
        }
        assert_eq!(init.mixture.variances(), f.variances());
    }

    #[test]
    fn pca_init_errors() {
        let (x, _) = low_rank_video(6, 3, 1, 7);
        assert!(init_pca(&x, 4, DEFAULT_RIDGE, 2).is_err());
        assert!(init_pca(&x, 0, DEFAULT_RIDGE, 2).is_err());
        let mut mask = DMatrix::from_element(6, 3, true);
        mask.column_mut(1).fill(false);
        let bad = VideoMatrix::new(6, 1, x.data().clone(), mask).unwrap();
        assert!(init_pca(&bad, 1, DEFAULT_RIDGE, 2).is_err());
    }

    #[test]
    fn masked_entries_are_mean_filled() {
        let data = DMatrix::from_row_slice(2, 3, &[1.0, 9.0, 3.0, 4.0, 4.0, 4.0]);
        let mut mask = DMatrix::from_element(2, 3, true);
        mask[(0, 1)] = false;
        let x = VideoMatrix::new(2, 1, data, mask).unwrap();
        let filled = mean_filled(&x).unwrap();
        assert_eq!(filled[(0, 1)], 2.0);
    }

    #[test]
    fn batch_exact_low_rank() {
        let (x, clean) = low_rank_video(30, 16, 2, 12);
        let fit = batch_gmd_lrr(&x, &BatchOptions::new(2, 2)).unwrap();
        assert!((fit.reconstruction() - &clean).norm() <= 1e-6 * clean.norm());
    }

    #[test]
    fn batch_likelihood_is_monotone_with_missing_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (x, clean) = low_rank_video(40, 20, 2, 13);
        let noisy = clean.map(|v| v + if rng.random_bool(0.2) { 0.3 } else { 0.01 } * rng.random_range(-1.0..1.0));
        let mask = DMatrix::from_fn(40, 20, |_, _| rng.random_bool(0.95));
        let x = VideoMatrix::new(x.width(), x.height(), noisy, mask).unwrap();
        let fit = batch_gmd_lrr(&x, &BatchOptions::new(2, 3)).unwrap();
        for pair in fit.likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "{:?}", pair);
        }
    }

    #[test]
    fn auto_rank_on_exact_rank_two() {
        let (x, _) = low_rank_video(50, 20, 2, 14);
        let r = auto_rank(&x).unwrap();
        assert!(r <= 2, "rank {r}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn coefficient_solve_zeroes_finite_difference_gradient(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_matrix(12, 3, &mut rng);
            let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..2.0)).collect();
            let v = solve_coefficients(&x, &w, &u).v;
            let objective = |v: &DVector<f64>| -> f64 {
                (0..12).map(|i| {
                    let r = x[i] - (u.row(i) * v)[0];
                    w[i] * w[i] * r * r
                }).sum()
            };
            let h = 1e-6;
            for c in 0..3 {
                let mut plus = v.clone();
                plus[c] += h;
                let mut minus = v.clone();
                minus[c] -= h;
                let grad = (objective(&plus) - objective(&minus)) / (2.0 * h);
                prop_assert!(grad.abs() < 1e-5, "grad {}", grad);
            }
        }

        #[test]
        fn recursive_rows_equal_batch_normal_equations(seed in 0u64..1000, r in 1usize..=4, t in 1usize..=50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ridge = 1e-6;
            let mut s = SubspaceState::from_statistics(
                1, r, DMatrix::<f64>::identity(r, r).scale(1.0 / ridge).as_slice().to_vec(), vec![0.0; r]).unwrap();
            let (mut xs, mut ws, mut vs) = (vec![], vec![], vec![]);
            for _ in 0..t {
                let v: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
                let x = rng.random_range(0.0..1.0);
                let w = rng.random_range(0.2..3.0);
                s.update_row(0, x, w, &v);
                xs.push(x); ws.push(w); vs.push(v);
            }
            if t >= r + 2 {
                let direct = direct_row(&xs, &ws, &vs, ridge);
                let got = s.basis().row(0).transpose();
                prop_assert!((&got - &direct).norm() <= 1e-8 * direct.norm().max(1e-3));
            }
        }
    }
}

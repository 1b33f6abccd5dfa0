//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Default Tikhonov ridge added to Gram matrices that fail to factor.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Solves `g x = rhs` for symmetric positive (semi)definite `g`.
///
/// Plain Cholesky is tried first. When it fails the system is regularised
/// with `ridge * I`, and the ridge is grown by decades (scaled by the mean
/// diagonal) until the factorisation succeeds. The flag reports whether any
/// ridge was needed.
pub fn solve_spd(g: &DMatrix<f64>, rhs: &DVector<f64>, ridge: f64) -> (DVector<f64>, bool) {
    if let Some(chol) = g.clone().cholesky() {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return (x, false);
        }
    }
    let r = g.nrows();
    let scale = (g.trace() / r.max(1) as f64).abs().max(1.0);
    let mut delta = ridge.max(f64::MIN_POSITIVE);
    for _ in 0..32 {
        let mut reg = g.clone();
        for k in 0..r {
            reg[(k, k)] += delta;
        }
        if let Some(chol) = reg.cholesky() {
            let x = chol.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return (x, true);
            }
        }
        delta = if delta < ridge * scale {
            ridge * scale
        } else {
            delta * 10.0
        };
    }
    (DVector::zeros(r), true)
}

/// Inverse of an SPD matrix after adding `ridge * I`.
pub fn ridge_inverse(g: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    let mut reg = g.clone();
    for k in 0..reg.nrows() {
        reg[(k, k)] += ridge;
    }
    let inv = reg.cholesky()?.inverse();
    Some(symmetrize(inv))
}

pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

/// Thin SVD restricted to the leading `k` triplets, sorted by decreasing
/// singular value.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

/// Eigen-decomposition of the smaller Gram matrix, sorted descending.
fn gram_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, bool) {
    let tall = m.nrows() >= m.ncols();
    let gram = if tall { m.tr_mul(m) } else { m * m.transpose() };
    let eig = SymmetricEigen::new(symmetrize(gram));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));
    let mut vecs = DMatrix::zeros(eig.eigenvectors.nrows(), order.len());
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs, tall)
}

/// Leading `k` singular triplets via the Gram matrix of the short side.
///
/// Accurate for the dominant part of the spectrum, which is all the PCA
/// initialisation needs; tiny singular values lose relative precision.
pub fn thin_svd(m: &DMatrix<f64>, k: usize) -> ThinSvd {
    let (vals, vecs, tall) = gram_eigen(m);
    let k = k.min(vals.len());
    let s = DVector::from_iterator(k, vals.iter().take(k).map(|l| l.sqrt()));
    let basis = vecs.columns(0, k).into_owned();
    // recover the other side: tall => basis is V, u_j = M v_j / s_j
    let other = if tall { m * &basis } else { m.tr_mul(&basis) };
    let mut other = other;
    for j in 0..k {
        let sj = s[j];
        let mut col = other.column_mut(j);
        if sj > 0.0 {
            col /= sj;
        } else {
            col.fill(0.0);
        }
    }
    if tall {
        ThinSvd {
            u: other,
            singular_values: s,
            v: basis,
        }
    } else {
        ThinSvd {
            u: basis,
            singular_values: s,
            v: other,
        }
    }
}

/// Singular values in decreasing order (full Golub-Kahan SVD).
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Spectral norm via the Gram eigenvalues.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let (vals, _, _) = gram_eigen(m);
    vals.get(0).copied().unwrap_or(0.0).sqrt()
}

/// Singular value thresholding through the Gram eigenbasis:
/// `M V diag(max(s - tau, 0) / s) Vᵀ` (or the left-side analogue for wide `M`).
///
/// This equals `U soft(S, tau) Vᵀ` of the full SVD but only decomposes an
/// `min(d, n)`-square matrix. Returns the result and its nuclear norm.
pub fn svt_gram(m: &DMatrix<f64>, tau: f64) -> (DMatrix<f64>, f64) {
    if m.is_empty() {
        return (m.clone(), 0.0);
    }
    let (vals, vecs, tall) = gram_eigen(m);
    let k = vals.len();
    let mut shrink = vecs.clone();
    let mut kept = 0usize;
    let mut nuclear = 0.0;
    for j in 0..k {
        let s = vals[j].sqrt();
        let f = if s > tau { (s - tau) / s } else { 0.0 };
        if f > 0.0 {
            kept = j + 1;
            nuclear += s - tau;
        }
        shrink.column_mut(j).scale_mut(f);
    }
    if kept == 0 {
        return (DMatrix::zeros(m.nrows(), m.ncols()), 0.0);
    }
    let basis = vecs.columns(0, kept);
    let scaled = shrink.columns(0, kept);
    let projector = scaled * basis.transpose();
    let out = if tall { m * projector } else { projector * m };
    (out, nuclear)
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of a non-empty slice.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = (p / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] * (1.0 - frac) + values[hi] * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn thin_svd_matches_full_svd() {
        for (r, c) in [(30, 8), (8, 30)] {
            let m = random(r, c, 4);
            let t = thin_svd(&m, 8);
            let full = singular_values(&m);
            for j in 0..8 {
                assert!((t.singular_values[j] - full[j]).abs() < 1e-10);
            }
            let recon = &t.u * DMatrix::from_diagonal(&t.singular_values) * t.v.transpose();
            assert!((recon - &m).norm() < 1e-9 * m.norm());
        }
    }

    #[test]
    fn svt_gram_matches_svd_route() {
        for (r, c) in [(12, 5), (5, 12)] {
            let m = random(r, c, 9);
            let tau = 0.8;
            let (out, nuc) = svt_gram(&m, tau);
            let svd = m.clone().svd(true, true);
            let shrunk = svd.singular_values.map(|s| (s - tau).max(0.0));
            let oracle = svd.u.unwrap() * DMatrix::from_diagonal(&shrunk) * svd.v_t.unwrap();
            assert!((&out - oracle).norm() < 1e-10);
            assert!((nuc - shrunk.sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn ridge_fallback_on_singular_system() {
        let g = DMatrix::zeros(2, 2);
        let (x, ridged) = solve_spd(&g, &DVector::zeros(2), DEFAULT_RIDGE);
        assert!(ridged);
        assert_eq!(x, DVector::zeros(2));
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let (x, ridged) = solve_spd(&g, &DVector::from_vec(vec![2.0, 2.0]), DEFAULT_RIDGE);
        assert!(!ridged);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![3.0, 1.0, 2.0, 4.0];
        assert_eq!(percentile(&mut v, 0.0), 1.0);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
        assert!((percentile(&mut v, 50.0) - 2.5).abs() < 1e-15);
    }
}

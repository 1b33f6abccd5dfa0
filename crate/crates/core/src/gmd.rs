//! Zero-mean Gaussian mixture model of the background residual.
//!
//! Residual slices are paired with a validity mask; masked-out entries get
//! all-zero responsibilities, zero weight and never contribute to any sum.
//! Everything that evaluates densities works in log space with max
//! subtraction, so tiny variances do not underflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on every component variance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
/// Lower bound on mixing weights during online updates.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Default multiplicative decay applied to the evidence after each frame.
pub const DEFAULT_FORGETTING: f64 = 0.98;
/// Frames a component may sit at the weight floor before it is re-seeded.
pub const DEAD_PATIENCE: usize = 50;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mixing weights, variances and accumulated evidence of a K-component
/// zero-mean mixture.
///
/// Serialises as `{"K": .., "pi": [..], "sigma2": [..], "N": [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureJson", into = "MixtureJson")]
pub struct MixtureState {
    weights: Vec<f64>,
    variances: Vec<f64>,
    evidence: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MixtureJson {
    #[serde(rename = "K")]
    k: usize,
    pi: Vec<f64>,
    sigma2: Vec<f64>,
    #[serde(rename = "N")]
    n: Vec<f64>,
}

impl TryFrom<MixtureJson> for MixtureState {
    type Error = Error;

    fn try_from(j: MixtureJson) -> Result<Self> {
        if j.pi.len() != j.k {
            return Err(Error::invalid("K does not match the length of pi"));
        }
        MixtureState::new(j.pi, j.sigma2, j.n)
    }
}

impl From<MixtureState> for MixtureJson {
    fn from(m: MixtureState) -> Self {
        MixtureJson {
            k: m.k(),
            pi: m.weights,
            sigma2: m.variances,
            n: m.evidence,
        }
    }
}

impl MixtureState {
    /// Validates and builds a state; weights are renormalised and variances
    /// floored.
    pub fn new(weights: Vec<f64>, variances: Vec<f64>, evidence: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if variances.len() != k || evidence.len() != k {
            return Err(Error::invalid("weights, variances and evidence differ in length"));
        }
        if weights
            .iter()
            .chain(&variances)
            .chain(&evidence)
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::invalid("mixture parameters must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("mixture weights sum to zero"));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            variances: variances.iter().map(|v| v.max(VARIANCE_FLOOR)).collect(),
            evidence,
        })
    }

    /// Equal weights `1/K`, zero evidence.
    pub fn uniform(variances: Vec<f64>) -> Result<Self> {
        let k = variances.len();
        Self::new(vec![1.0 / k as f64; k], variances, vec![0.0; k])
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn evidence(&self) -> &[f64] {
        &self.evidence
    }

    pub fn total_evidence(&self) -> f64 {
        self.evidence.iter().sum()
    }

    /// Per-component `(ln pi_k - ln sqrt(2 pi sigma2_k), 1 / (2 sigma2_k))`;
    /// `None` for components with zero weight.
    fn log_terms(&self) -> Vec<Option<(f64, f64)>> {
        self.weights
            .iter()
            .zip(&self.variances)
            .map(|(&pi, &var)| (pi > 0.0).then(|| (pi.ln() - 0.5 * (LN_2PI + var.ln()), 0.5 / var)))
            .collect()
    }
}

/// Posterior component probabilities, one row of K entries per residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    rows: usize,
    k: usize,
    gamma: Vec<f64>,
}

impl Responsibilities {
    pub fn from_rows(rows: usize, k: usize, gamma: Vec<f64>) -> Result<Self> {
        if gamma.len() != rows * k {
            return Err(Error::invalid("responsibility buffer has wrong length"));
        }
        Ok(Self { rows, k, gamma })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.gamma[i * self.k..(i + 1) * self.k]
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.gamma[i * self.k + k]
    }

    /// `sum_i gamma_ik` per component.
    pub fn component_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.k];
        for row in self.gamma.chunks_exact(self.k) {
            for (m, g) in mass.iter_mut().zip(row) {
                *m += g;
            }
        }
        mass
    }
}

/// E-step: `gamma_k ∝ pi_k N(eps | 0, sigma2_k)`, normalised per entry.
pub fn estep_responsibilities(residuals: &[f64], mask: &[bool], m: &MixtureState) -> Responsibilities {
    assert_eq!(residuals.len(), mask.len(), "residual/mask length mismatch");
    let k = m.k();
    let terms = m.log_terms();
    let mut gamma = vec![0.0; residuals.len() * k];
    let mut logp = vec![f64::NEG_INFINITY; k];
    for (i, (&eps, &valid)) in residuals.iter().zip(mask).enumerate() {
        if !valid {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for (lp, term) in logp.iter_mut().zip(&terms) {
            *lp = match term {
                Some((c, inv2v)) => c - eps * eps * inv2v,
                None => f64::NEG_INFINITY,
            };
            best = best.max(*lp);
        }
        let row = &mut gamma[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (g, lp) in row.iter_mut().zip(&logp) {
            *g = (lp - best).exp();
            sum += *g;
        }
        for g in row.iter_mut() {
            *g /= sum;
        }
    }
    Responsibilities {
        rows: residuals.len(),
        k,
        gamma,
    }
}

/// Per-component `(sum_i gamma_ik, sum_i gamma_ik eps_i^2)` over valid entries.
fn sufficient_stats(residuals: &[f64], mask: &[bool], gamma: &Responsibilities) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(residuals.len(), gamma.rows(), "responsibilities do not match residuals");
    let k = gamma.k();
    let mut mass = vec![0.0; k];
    let mut sq = vec![0.0; k];
    for (i, (&eps, &valid)) in residuals.iter().zip(mask).enumerate() {
        if !valid {
            continue;
        }
        let e2 = eps * eps;
        for (c, &g) in gamma.row(i).iter().enumerate() {
            mass[c] += g;
            sq[c] += g * e2;
        }
    }
    (mass, sq)
}

/// Batch M-step: `pi_k = N_k / sum N`, `sigma2_k = sum gamma eps^2 / N_k`.
///
/// A component with no mass keeps weight 0 and the floor variance. The
/// returned evidence is `N_k`.
pub fn mstep_batch(residuals: &[f64], mask: &[bool], gamma: &Responsibilities) -> MixtureState {
    let (mass, sq) = sufficient_stats(residuals, mask, gamma);
    let total: f64 = mass.iter().sum();
    let k = mass.len();
    let weights = if total > 0.0 {
        mass.iter().map(|m| m / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    };
    let variances = mass
        .iter()
        .zip(&sq)
        .map(|(&m, &s)| {
            if m > 0.0 {
                (s / m).max(VARIANCE_FLOOR)
            } else {
                VARIANCE_FLOOR
            }
        })
        .collect();
    MixtureState {
        weights,
        variances,
        evidence: mass,
    }
}

/// Online M-step for one frame against accumulated evidence.
///
/// `sigma2_k = (N_k' sigma2_k' + sum z eps^2) / (N_k' + sum z)` and
/// `pi_k ∝ N_k' + sum z`, where primes denote the prior. The new evidence
/// `N_k' + sum z` is then multiplied by `forgetting` (1.0 disables decay).
pub fn mstep_online(
    residuals: &[f64],
    mask: &[bool],
    gamma: &Responsibilities,
    prior: &MixtureState,
    forgetting: f64,
) -> MixtureState {
    assert_eq!(gamma.k(), prior.k(), "component count mismatch");
    let (mass, sq) = sufficient_stats(residuals, mask, gamma);
    let updated: Vec<f64> = prior.evidence.iter().zip(&mass).map(|(n, m)| n + m).collect();
    // lambda in the Lagrangian is exactly this normaliser
    let lambda: f64 = updated.iter().sum();
    let weights = if lambda > 0.0 {
        updated.iter().map(|n| n / lambda).collect()
    } else {
        prior.weights.clone()
    };
    let variances = (0..prior.k())
        .map(|c| {
            if updated[c] > 0.0 {
                ((prior.evidence[c] * prior.variances[c] + sq[c]) / updated[c]).max(VARIANCE_FLOOR)
            } else {
                prior.variances[c]
            }
        })
        .collect();
    MixtureState {
        weights,
        variances,
        evidence: updated.iter().map(|n| n * forgetting).collect(),
    }
}

/// `w = sqrt(sum_k gamma_k / (2 sigma2_k))` on valid entries, 0 elsewhere.
pub fn weight_matrix(gamma: &Responsibilities, m: &MixtureState, mask: &[bool]) -> Vec<f64> {
    assert_eq!(gamma.rows(), mask.len(), "responsibilities do not match mask");
    let inv: Vec<f64> = m.variances.iter().map(|v| 0.5 / v).collect();
    mask.iter()
        .enumerate()
        .map(|(i, &valid)| {
            if !valid {
                return 0.0;
            }
            gamma.row(i).iter().zip(&inv).map(|(g, s)| g * s).sum::<f64>().sqrt()
        })
        .collect()
}

/// `sum over valid entries of ln sum_k pi_k N(eps | 0, sigma2_k)`.
pub fn log_likelihood(residuals: &[f64], mask: &[bool], m: &MixtureState) -> f64 {
    let terms = m.log_terms();
    let mut total = 0.0;
    for (&eps, &valid) in residuals.iter().zip(mask) {
        if valid {
            total += entry_log_density(eps, &terms);
        }
    }
    total
}

fn entry_log_density(eps: f64, terms: &[Option<(f64, f64)>]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for (c, inv2v) in terms.iter().flatten() {
        best = best.max(c - eps * eps * inv2v);
    }
    let sum: f64 = terms
        .iter()
        .flatten()
        .map(|(c, inv2v)| (c - eps * eps * inv2v - best).exp())
        .sum();
    best + sum.ln()
}

/// Initial responsibilities that break the symmetry of a uniform mixture:
/// valid entries are sorted by `|eps|` and split into K equal-count bands,
/// band `k` assigned wholly to component `k`.
pub fn quantile_band_responsibilities(residuals: &[f64], mask: &[bool], k: usize) -> Responsibilities {
    let mut idx: Vec<usize> = (0..residuals.len()).filter(|&i| mask[i]).collect();
    idx.sort_by(|&a, &b| residuals[a].abs().total_cmp(&residuals[b].abs()).then(a.cmp(&b)));
    let mut gamma = vec![0.0; residuals.len() * k];
    let n = idx.len();
    for (rank, &i) in idx.iter().enumerate() {
        let band = (rank * k / n.max(1)).min(k - 1);
        gamma[i * k + band] = 1.0;
    }
    Responsibilities {
        rows: residuals.len(),
        k,
        gamma,
    }
}

/// Mixture state carried along a stream, with the floors, evidence decay and
/// dead-component re-seeding applied on every committed frame.
#[derive(Debug, Clone)]
pub struct OnlineMixture {
    state: MixtureState,
    forgetting: f64,
    weight_floor: f64,
    dead_patience: usize,
    dead_frames: Vec<usize>,
}

impl OnlineMixture {
    pub fn new(state: MixtureState, forgetting: f64) -> Self {
        let k = state.k();
        Self {
            state,
            forgetting,
            weight_floor: WEIGHT_FLOOR,
            dead_patience: DEAD_PATIENCE,
            dead_frames: vec![0; k],
        }
    }

    pub fn with_dead_patience(mut self, frames: usize) -> Self {
        self.dead_patience = frames;
        self
    }

    pub fn state(&self) -> &MixtureState {
        &self.state
    }

    /// Candidate state for the inner loop; does not touch the carried state.
    pub fn propose(&self, residuals: &[f64], mask: &[bool], gamma: &Responsibilities) -> MixtureState {
        mstep_online(residuals, mask, gamma, &self.state, 1.0)
    }

    /// Commits a frame. Returns the indices of re-seeded components.
    pub fn commit(&mut self, residuals: &[f64], mask: &[bool], gamma: &Responsibilities) -> Vec<usize> {
        let mut next = mstep_online(residuals, mask, gamma, &self.state, self.forgetting);
        let k = next.k();
        let floor = self.weight_floor;
        let mut reseeded = Vec::new();
        for c in 0..k {
            if next.weights[c] <= floor * (1.0 + 1e-9) {
                self.dead_frames[c] += 1;
            } else {
                self.dead_frames[c] = 0;
            }
            if self.dead_frames[c] >= self.dead_patience {
                if let Some(var) = tail_variance(residuals, mask) {
                    next.variances[c] = var.max(VARIANCE_FLOOR);
                    next.weights[c] = 1.0 / (10.0 * k as f64);
                    reseeded.push(c);
                }
                self.dead_frames[c] = 0;
            }
        }
        for w in next.weights.iter_mut() {
            *w = w.max(floor);
        }
        let total: f64 = next.weights.iter().sum();
        for w in next.weights.iter_mut() {
            *w /= total;
        }
        // keep the evidence split consistent with the (possibly adjusted) weights
        let n_total = next.total_evidence();
        if !reseeded.is_empty() && n_total > 0.0 {
            for (n, w) in next.evidence.iter_mut().zip(&next.weights) {
                *n = w * n_total;
            }
        }
        self.state = next;
        reseeded
    }
}

/// Mean squared residual over the largest 1% of |residual| (at least one entry).
fn tail_variance(residuals: &[f64], mask: &[bool]) -> Option<f64> {
    let mut sq: Vec<f64> = residuals
        .iter()
        .zip(mask)
        .filter(|(_, v)| **v)
        .map(|(e, _)| e * e)
        .collect();
    if sq.is_empty() {
        return None;
    }
    sq.sort_by(|a, b| b.total_cmp(a));
    let take = (sq.len() / 100).max(1);
    Some(sq[..take].iter().sum::<f64>() / take as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_valid(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    fn normal_pdf(x: f64, var: f64) -> f64 {
        (-(x * x) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    #[test]
    fn single_component_takes_everything() {
        let m = MixtureState::uniform(vec![0.3]).unwrap();
        let g = estep_responsibilities(&[0.1, -2.0, 5.0], &all_valid(3), &m);
        assert!((0..3).all(|i| g.get(i, 0) == 1.0));
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let m = MixtureState::uniform(vec![0.7, 0.7]).unwrap();
        let g = estep_responsibilities(&[0.0, 1.3, -40.0], &all_valid(3), &m);
        for i in 0..3 {
            assert_eq!(g.row(i), &[0.5, 0.5]);
        }
    }

    #[test]
    fn unequal_variances_at_zero() {
        let m = MixtureState::uniform(vec![1.0, 4.0]).unwrap();
        let g = estep_responsibilities(&[0.0], &all_valid(1), &m);
        assert!((g.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn masked_rows_are_zero() {
        let m = MixtureState::uniform(vec![1.0, 4.0]).unwrap();
        let g = estep_responsibilities(&[0.0, 1.0], &[false, true], &m);
        assert_eq!(g.row(0), &[0.0, 0.0]);
        assert!((g.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extreme_residuals_stay_finite() {
        let m = MixtureState::uniform(vec![1e-8, 1.0]).unwrap();
        let g = estep_responsibilities(&[1e3, 0.0], &all_valid(2), &m);
        assert!(g.gamma.iter().all(|v| v.is_finite()));
        assert!((g.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_mstep_cases() {
        let g = Responsibilities::from_rows(3, 3, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let m = mstep_batch(&[0.1, 0.2, 0.3], &all_valid(3), &g);
        assert_eq!(m.weights(), &[1.0, 0.0, 0.0]);
        assert_eq!(m.variances()[1], VARIANCE_FLOOR);

        let g = Responsibilities::from_rows(4, 1, vec![1.0; 4]).unwrap();
        let c: f64 = 0.37;
        let m = mstep_batch(&[c; 4], &all_valid(4), &g);
        assert!((m.variances()[0] - c * c).abs() < 1e-15);
    }

    #[test]
    fn batch_mstep_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, n, k) = (10, 3, 2);
        // column-major d x n residuals
        let res: Vec<f64> = (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let prior = MixtureState::new(vec![0.6, 0.4], vec![0.05, 0.5], vec![0.0; 2]).unwrap();
        let mask = all_valid(d * n);
        let g = estep_responsibilities(&res, &mask, &prior);
        let m = mstep_batch(&res, &mask, &g);
        for c in 0..k {
            let (mut nk, mut s) = (0.0, 0.0);
            for j in 0..n {
                for i in 0..d {
                    let idx = j * d + i;
                    nk += g.get(idx, c);
                    s += g.get(idx, c) * res[idx] * res[idx];
                }
            }
            let total: f64 = (0..d * n).map(|idx| g.row(idx).iter().sum::<f64>()).sum();
            assert!((m.weights()[c] - nk / total).abs() < 1e-12);
            assert!((m.variances()[c] - s / nk).abs() < 1e-12);
        }
    }

    #[test]
    fn online_mstep_zero_evidence_keeps_prior() {
        let prior = MixtureState::new(vec![0.25, 0.75], vec![0.5, 2.0], vec![10.0, 30.0]).unwrap();
        let g = Responsibilities::from_rows(2, 2, vec![0.0; 4]).unwrap();
        let m = mstep_online(&[1.0, 2.0], &[false, false], &g, &prior, 1.0);
        assert!((m.weights()[0] - 0.25).abs() < 1e-15);
        assert_eq!(m.variances(), prior.variances());
    }

    #[test]
    fn online_mstep_hand_evaluation() {
        let prior = MixtureState::new(vec![1.0], vec![2.0], vec![1.0]).unwrap();
        let g = Responsibilities::from_rows(1, 1, vec![1.0]).unwrap();
        let m = mstep_online(&[2.0], &[true], &g, &prior, 1.0);
        assert!((m.variances()[0] - 3.0).abs() < 1e-15);
        assert_eq!(m.evidence(), &[2.0]);
        let decayed = mstep_online(&[2.0], &[true], &g, &prior, 0.5);
        assert_eq!(decayed.evidence(), &[1.0]);
    }

    #[test]
    fn weight_matrix_cases() {
        let m = MixtureState::uniform(vec![0.5]).unwrap();
        let g = Responsibilities::from_rows(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(weight_matrix(&g, &m, &[true, false]), vec![1.0, 0.0]);

        let m = MixtureState::uniform(vec![1.0, 4.0]).unwrap();
        let g = Responsibilities::from_rows(1, 2, vec![0.5, 0.5]).unwrap();
        let w = weight_matrix(&g, &m, &[true]);
        assert!((w[0] - 0.559_016_994_374_947_4).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_cases() {
        let m = MixtureState::uniform(vec![1.0]).unwrap();
        assert!((log_likelihood(&[0.0], &[true], &m) + 0.918_938_533_204_672_7).abs() < 1e-15);
        assert_eq!(log_likelihood(&[0.3, 0.2], &[false, false], &m), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MixtureState::new(vec![0.2, 0.5, 0.3], vec![0.01, 0.1, 1.0], vec![0.0; 3]).unwrap();
        let res: Vec<f64> = (0..200).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mask: Vec<bool> = (0..200).map(|i| i % 7 != 0).collect();
        let naive: f64 = res
            .iter()
            .zip(&mask)
            .filter(|(_, v)| **v)
            .map(|(e, _)| {
                (0..3)
                    .map(|c| m.weights()[c] * normal_pdf(*e, m.variances()[c]))
                    .sum::<f64>()
                    .ln()
            })
            .sum();
        assert!((log_likelihood(&res, &mask, &m) - naive).abs() < 1e-10);
    }

    #[test]
    fn json_schema() {
        let m = MixtureState::new(vec![0.5, 0.5], vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["K"], 2);
        assert_eq!(v["pi"][0], 0.5);
        assert_eq!(v["sigma2"][1], 2.0);
        assert_eq!(v["N"][1], 4.0);
        let back: MixtureState = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
        let bad = serde_json::json!({"K": 3, "pi": [1.0], "sigma2": [1.0], "N": [0.0]});
        assert!(serde_json::from_value::<MixtureState>(bad).is_err());
    }

    #[test]
    fn quantile_bands_split_mass_evenly() {
        let res: Vec<f64> = (0..10)
            .map(|i| i as f64 * if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let g = quantile_band_responsibilities(&res, &all_valid(10), 5);
        assert_eq!(g.component_mass(), vec![2.0; 5]);
        assert_eq!(g.row(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.row(9), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dead_component_is_reseeded() {
        // equal variances keep gamma_1 = pi_1 on every pixel, so component 1 never recovers
        let res: Vec<f64> = (0..200).map(|i| if i < 2 { 0.1 } else { 0.01 }).collect();
        let mean_sq = res.iter().map(|e| e * e).sum::<f64>() / 200.0;
        let start = MixtureState::new(vec![1.0, 0.0], vec![mean_sq, mean_sq], vec![0.0, 0.0]).unwrap();
        let mut online = OnlineMixture::new(start, 1.0).with_dead_patience(3);
        let mask = all_valid(200);
        let mut reseeded = Vec::new();
        for _ in 0..3 {
            let g = estep_responsibilities(&res, &mask, online.state());
            reseeded = online.commit(&res, &mask, &g);
        }
        assert_eq!(reseeded, vec![1]);
        let st = online.state();
        assert!(st.weights()[1] > WEIGHT_FLOOR);
        assert!((st.variances()[1] - 0.01).abs() < 1e-15);
        assert!((st.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn residual_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (5usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(-3.0f64..3.0, n),
                proptest::collection::vec(proptest::bool::weighted(0.85), n),
            )
        })
    }

    proptest! {
        #[test]
        fn valid_rows_sum_to_one((res, mask) in residual_strategy(), v1 in 1e-4f64..2.0, v2 in 1e-4f64..2.0, p in 0.05f64..0.95) {
            let m = MixtureState::new(vec![p, 1.0 - p], vec![v1, v2], vec![0.0; 2]).unwrap();
            let g = estep_responsibilities(&res, &mask, &m);
            for i in 0..res.len() {
                let s: f64 = g.row(i).iter().sum();
                if mask[i] {
                    prop_assert!((s - 1.0).abs() < 1e-10);
                    prop_assert!(g.row(i).iter().all(|x| (0.0..=1.0).contains(x)));
                } else {
                    prop_assert_eq!(s, 0.0);
                }
            }
        }

        #[test]
        fn em_iteration_never_decreases_likelihood((res, mask) in residual_strategy(), v1 in 1e-3f64..1.0, v2 in 1e-3f64..1.0) {
            let mut m = MixtureState::uniform(vec![v1, v2, 0.5 * (v1 + v2)]).unwrap();
            let mut prev = log_likelihood(&res, &mask, &m);
            for _ in 0..5 {
                let g = estep_responsibilities(&res, &mask, &m);
                m = mstep_batch(&res, &mask, &g);
                let next = log_likelihood(&res, &mask, &m);
                prop_assert!(next >= prev - 1e-9, "{} -> {}", prev, next);
                prev = next;
            }
        }

        #[test]
        fn online_with_empty_prior_equals_batch((res, mask) in residual_strategy(), v1 in 1e-3f64..1.0, v2 in 1e-3f64..1.0) {
            let prior = MixtureState::new(vec![0.3, 0.7], vec![v1, v2], vec![0.0, 0.0]).unwrap();
            let g = estep_responsibilities(&res, &mask, &prior);
            let online = mstep_online(&res, &mask, &g, &prior, 1.0);
            let batch = mstep_batch(&res, &mask, &g);
            if mask.iter().any(|v| *v) {
                for c in 0..2 {
                    prop_assert!((online.weights()[c] - batch.weights()[c]).abs() <= 1e-12);
                    prop_assert!((online.evidence()[c] - batch.evidence()[c]).abs() <= 1e-12);
                    if batch.evidence()[c] > 0.0 {
                        prop_assert!((online.variances()[c] - batch.variances()[c]).abs() <= 1e-12);
                    }
                }
            }
        }

        #[test]
        fn weights_monotone_in_variance(g0 in 0.0f64..1.0, v1 in 1e-3f64..2.0, v2 in 1e-3f64..2.0, bump in 0.0f64..3.0, which in 0usize..2) {
            let gamma = Responsibilities::from_rows(1, 2, vec![g0, 1.0 - g0]).unwrap();
            let base = MixtureState::uniform(vec![v1, v2]).unwrap();
            let mut vars = vec![v1, v2];
            vars[which] += bump;
            let bigger = MixtureState::uniform(vars).unwrap();
            let w0 = weight_matrix(&gamma, &base, &[true])[0];
            let w1 = weight_matrix(&gamma, &bigger, &[true])[0];
            prop_assert!(w1 <= w0 + 1e-15);
        }
    }
}

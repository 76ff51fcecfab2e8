//! Ensemble statistics and low-rank Gaussian evaluations.
//!
//! Every density here is evaluated in log domain. Observation-space covariances
//! of the form `R + Y Yᵀ` are never formed: the determinant lemma and the
//! Woodbury identity reduce them to `N x N` problems in ensemble space.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{CmeError, Result};

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Ensemble of `N` members stored as the columns of an `M x N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble(pub DMatrix<f64>);

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(CmeError::invalid("an ensemble needs at least two members"));
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(CmeError::invalid("ensemble members must be finite"));
        }
        Ok(Self(members))
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn members_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.0
    }

    pub fn state_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_members(&self) -> usize {
        self.0.ncols()
    }

    pub fn belief(&self) -> Result<GaussianBelief> {
        mean_and_anomalies(&self.0)
    }

    /// Rebuilds members `x̄ + √(N-1) X` from a belief.
    pub fn from_belief(belief: &GaussianBelief) -> Self {
        let n = belief.anomalies.ncols();
        let scale = ((n - 1) as f64).sqrt();
        let mut e = &belief.anomalies * scale;
        for mut col in e.column_iter_mut() {
            col += &belief.mean;
        }
        Self(e)
    }
}

/// Gaussian `N(mean, X Xᵀ)` carried by its anomaly factor `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub anomalies: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, anomalies: DMatrix<f64>) -> Result<Self> {
        if mean.len() != anomalies.nrows() {
            return Err(CmeError::invalid("belief mean and anomalies disagree in dimension"));
        }
        Ok(Self { mean, anomalies })
    }

    pub fn state_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.anomalies.ncols()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.anomalies * self.anomalies.transpose()
    }
}

/// Mean and normalized anomalies `(E - x̄ 1ᵀ) / √(N-1)` of an ensemble matrix.
pub fn mean_and_anomalies(e: &DMatrix<f64>) -> Result<GaussianBelief> {
    let n = e.ncols();
    if n < 2 {
        return Err(CmeError::invalid(format!(
            "anomalies need at least two members, got {n}"
        )));
    }
    let mean = e.column_sum() / n as f64;
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let mut x = e.clone();
    for mut col in x.column_iter_mut() {
        col -= &mean;
        col *= scale;
    }
    Ok(GaussianBelief { mean, anomalies: x })
}

/// Scalar-diagonal observation error covariance `R = σ² I_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsErrorSpec {
    pub variance: f64,
    pub dim: usize,
}

impl ObsErrorSpec {
    pub fn new(variance: f64, dim: usize) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(CmeError::invalid("observation error variance must be positive"));
        }
        if dim == 0 {
            return Err(CmeError::invalid("observation dimension must be positive"));
        }
        Ok(Self { variance, dim })
    }

    pub fn from_sigma(sigma: f64, dim: usize) -> Result<Self> {
        Self::new(sigma * sigma, dim)
    }

    pub fn log_det(&self) -> f64 {
        self.dim as f64 * self.variance.ln()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal_element(self.dim, self.dim, self.variance)
    }

    /// `log N(innov; 0, R)`.
    pub fn loglik(&self, innov: &[f64]) -> f64 {
        let sq: f64 = innov.iter().map(|v| v * v).sum();
        -0.5 * sq / self.variance - 0.5 * self.dim as f64 * LN_2PI - 0.5 * self.log_det()
    }
}

/// Observation operator `H: R^M -> R^d`.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsOperator {
    Identity { dim: usize },
    Linear(DMatrix<f64>),
    /// Observes the listed state components.
    Subset { indices: Vec<usize>, state_dim: usize },
}

impl ObsOperator {
    pub fn identity(dim: usize) -> Self {
        ObsOperator::Identity { dim }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ObsOperator::Identity { dim } if *dim == 0 => {
                Err(CmeError::invalid("identity operator needs a positive dimension"))
            }
            ObsOperator::Linear(h) if h.nrows() == 0 || h.nrows() > h.ncols() => Err(
                CmeError::invalid("linear observation operator must satisfy 0 < d <= M"),
            ),
            ObsOperator::Subset { indices, state_dim }
                if indices.is_empty()
                    || indices.len() > *state_dim
                    || indices.iter().any(|&i| i >= *state_dim) =>
            {
                Err(CmeError::invalid("subset observation indices out of range"))
            }
            _ => Ok(()),
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            ObsOperator::Identity { dim } => *dim,
            ObsOperator::Linear(h) => h.nrows(),
            ObsOperator::Subset { indices, .. } => indices.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ObsOperator::Identity { dim } => *dim,
            ObsOperator::Linear(h) => h.ncols(),
            ObsOperator::Subset { state_dim, .. } => *state_dim,
        }
    }

    pub fn apply(&self, x: &[f64]) -> DVector<f64> {
        match self {
            ObsOperator::Identity { .. } => DVector::from_column_slice(x),
            ObsOperator::Linear(h) => h * DVector::from_column_slice(x),
            ObsOperator::Subset { indices, .. } => {
                DVector::from_iterator(indices.len(), indices.iter().map(|&i| x[i]))
            }
        }
    }

    /// Applies `H` column by column.
    pub fn apply_members(&self, e: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            ObsOperator::Identity { .. } => e.clone(),
            ObsOperator::Linear(h) => h * e,
            ObsOperator::Subset { indices, .. } => e.select_rows(indices.iter()),
        }
    }

    /// Dense matrix form.
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            ObsOperator::Identity { dim } => DMatrix::identity(*dim, *dim),
            ObsOperator::Linear(h) => h.clone(),
            ObsOperator::Subset { indices, state_dim } => {
                let mut h = DMatrix::zeros(indices.len(), *state_dim);
                for (r, &c) in indices.iter().enumerate() {
                    h[(r, c)] = 1.0;
                }
                h
            }
        }
    }
}

/// Ensemble-space precision `I_N + Yᵀ R⁻¹ Y`.
pub(crate) fn ensemble_precision(y: &DMatrix<f64>, r: &ObsErrorSpec) -> DMatrix<f64> {
    let n = y.ncols();
    let mut s = y.tr_mul(y) / r.variance;
    for i in 0..n {
        s[(i, i)] += 1.0;
    }
    s
}

/// `log N(innov; 0, R + Y Yᵀ)` through the determinant lemma and Woodbury.
pub fn innovation_loglik(innov: &DVector<f64>, r: &ObsErrorSpec, y: &DMatrix<f64>) -> Result<f64> {
    let d = innov.len();
    if r.dim != d || y.nrows() != d {
        return Err(CmeError::invalid(format!(
            "innovation length {d}, R dimension {}, Y rows {} disagree",
            r.dim,
            y.nrows()
        )));
    }
    let s = ensemble_precision(y, r);
    let chol = Cholesky::new(s)
        .ok_or_else(|| CmeError::ill("I + Yᵀ R⁻¹ Y is not positive definite"))?;
    let log_det_s: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let b = y.tr_mul(innov) / r.variance;
    let quad = innov.norm_squared() / r.variance - b.dot(&chol.solve(&b));
    let value = -0.5 * quad - 0.5 * d as f64 * LN_2PI - 0.5 * (r.log_det() + log_det_s);
    if !value.is_finite() {
        return Err(CmeError::ill("innovation log-likelihood is not finite"));
    }
    Ok(value)
}

/// `log Σ exp(v_i)` by max shift, reduced in index order.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(CmeError::invalid("log_sum_exp of an empty sequence"));
    }
    if values.len() == 1 {
        return Ok(values[0]);
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `log((1/n) Σ exp(v_i))`.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    Ok(log_sum_exp(values)? - (values.len() as f64).ln())
}

/// Full singular value decomposition `X = U S Vᵀ` of an anomaly matrix.
#[derive(Debug, Clone)]
pub struct AnomalySvd {
    /// `M x M` orthogonal.
    pub u: DMatrix<f64>,
    /// `M` singular values, descending; zero beyond the rank of `X`.
    pub singular_values: DVector<f64>,
    /// `N x M`; only the first `min(M, N)` columns are meaningful.
    pub v: DMatrix<f64>,
}

pub fn svd_anomalies(x: &DMatrix<f64>) -> AnomalySvd {
    let (m, n) = x.shape();
    let p = n.max(m);
    // Zero-padding the columns makes the thin SVD return a square U.
    let mut padded = DMatrix::zeros(m, p);
    padded.columns_mut(0, n).copy_from(x);
    let svd = SVD::new(padded, true, true);
    let u = svd.u.expect("U requested");
    let v_t = svd.v_t.expect("Vᵀ requested");
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut u_sorted = DMatrix::zeros(m, m);
    let mut v_sorted = DMatrix::zeros(n, m);
    let mut s_sorted = DVector::zeros(m);
    for (dst, &src) in order.iter().enumerate() {
        u_sorted.set_column(dst, &u.column(src));
        s_sorted[dst] = s[src].max(0.0);
        for row in 0..n {
            v_sorted[(row, dst)] = v_t[(src, row)];
        }
    }
    AnomalySvd {
        u: u_sorted,
        singular_values: s_sorted,
        v: v_sorted,
    }
}

/// Symmetric square root of the inverse of an SPD ensemble-space precision,
/// together with the inverse itself.
pub(crate) fn inverse_and_inverse_sqrt(s: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max.max(1.0)) || !min.is_finite() {
        return Err(CmeError::ill(format!(
            "ensemble transform is not SPD (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    let q = &eig.eigenvectors;
    let inv = DVector::from_iterator(s.nrows(), eig.eigenvalues.iter().map(|l| 1.0 / l));
    let inv_sqrt = inv.map(f64::sqrt);
    let a = q * DMatrix::from_diagonal(&inv) * q.transpose();
    let t = q * DMatrix::from_diagonal(&inv_sqrt) * q.transpose();
    Ok((0.5 * (&a + a.transpose()), 0.5 * (&t + t.transpose())))
}

pub(crate) fn log_pi() -> f64 {
    PI.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-2.0..2.0))
    }

    /// Dense oracle: log N(innov; 0, C) via a full Cholesky of C.
    fn dense_logpdf(innov: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let d = innov.len() as f64;
        let chol = Cholesky::new(cov.clone()).unwrap();
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * innov.dot(&chol.solve(innov)) - 0.5 * d * (2.0 * PI).ln() - 0.5 * logdet
    }

    #[test]
    fn two_member_anomalies() {
        let e = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let b = mean_and_anomalies(&e).unwrap();
        assert_eq!(b.mean[0], 0.0);
        assert_eq!(b.anomalies.as_slice(), &[-1.0, 1.0]);
        assert_eq!(b.covariance()[(0, 0)], 2.0);
        assert!(mean_and_anomalies(&DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn equal_columns_have_zero_anomalies() {
        let e = DMatrix::from_fn(3, 5, |i, _| i as f64 + 0.5);
        assert!(mean_and_anomalies(&e).unwrap().anomalies.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn anomalies_reproduce_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_matrix(&mut rng, 3, 4);
        let b = mean_and_anomalies(&e).unwrap();
        let mut cov = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                let mi = e.row(i).mean();
                let mj = e.row(j).mean();
                cov[(i, j)] = (0..4).map(|k| (e[(i, k)] - mi) * (e[(j, k)] - mj)).sum::<f64>() / 3.0;
            }
        }
        assert!((b.covariance() - cov).amax() < 1e-12);
        assert!(b.anomalies.column_sum().amax() < 1e-12);
    }

    #[test]
    fn scalar_innovation_loglik() {
        let r = ObsErrorSpec::new(2.0, 1).unwrap();
        let y = DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]);
        let v = innovation_loglik(&DVector::from_element(1, 2.0), &r, &y).unwrap();
        let expected = -0.5 * 4.0 / 4.0 - 0.5 * (2.0 * PI * 4.0).ln();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-13);
        assert_abs_diff_eq!(v, -2.112085713764618, epsilon = 1e-12);
    }

    #[test]
    fn standard_normal_at_mode() {
        let d = 5;
        let r = ObsErrorSpec::new(1.0, d).unwrap();
        let v = innovation_loglik(&DVector::zeros(d), &r, &DMatrix::zeros(d, 3)).unwrap();
        assert_abs_diff_eq!(v, -(d as f64) / 2.0 * (2.0 * PI).ln(), epsilon = 1e-13);
    }

    #[test]
    fn low_rank_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = random_matrix(&mut rng, 5, 3);
        let innov = DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0));
        let r = ObsErrorSpec::new(0.7, 5).unwrap();
        let dense = dense_logpdf(&innov, &(r.matrix() + &y * y.transpose()));
        assert_abs_diff_eq!(innovation_loglik(&innov, &r, &y).unwrap(), dense, epsilon = 1e-10);
    }

    #[test]
    fn innovation_density_integrates_to_one() {
        let r = ObsErrorSpec::new(0.5, 1).unwrap();
        let y = DMatrix::from_row_slice(1, 3, &[0.3, -0.1, -0.2]);
        let yy: f64 = y.iter().map(|v| v * v).sum();
        let sigma = (0.5 + yy).sqrt();
        let n = 200_000;
        let (lo, hi) = (-40.0 * sigma, 40.0 * sigma);
        let h = (hi - lo) / n as f64;
        let f = |x: f64| innovation_loglik(&DVector::from_element(1, x), &r, &y).unwrap().exp();
        let mut total = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            total += f(lo + i as f64 * h);
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let r = ObsErrorSpec::new(1.0, 2).unwrap();
        assert!(innovation_loglik(&DVector::zeros(3), &r, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn log_sum_exp_cases() {
        assert_eq!(log_sum_exp(&[3.25]).unwrap(), 3.25);
        assert_abs_diff_eq!(log_sum_exp(&[2f64.ln(), 2f64.ln()]).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let v = log_sum_exp(&[-1000.0, -1001.0]).unwrap();
        assert_abs_diff_eq!(v, -1000.0 + (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, -999.6867383124818, epsilon = 1e-10);
        assert!(log_sum_exp(&[]).is_err());
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn svd_of_identity_zero_and_random() {
        let s = svd_anomalies(&DMatrix::identity(3, 3));
        assert!((s.singular_values.clone() - DVector::from_element(3, 1.0)).amax() < 1e-14);
        let s = svd_anomalies(&DMatrix::zeros(3, 4));
        assert!(s.singular_values.iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, n) in [(3, 4), (4, 2), (3, 3)] {
            let x = random_matrix(&mut rng, m, n);
            let s = svd_anomalies(&x);
            assert_eq!(s.u.shape(), (m, m));
            let recon = &s.u * DMatrix::from_diagonal(&s.singular_values) * s.v.transpose();
            assert!((recon - &x).amax() < 1e-12);
            assert!(s.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
            assert!((s.u.transpose() * &s.u - DMatrix::identity(m, m)).amax() < 1e-12);
        }
    }

    #[test]
    fn observation_operators_agree_with_their_matrices() {
        let x = [1.0, -2.0, 3.5, 0.25];
        let ops = [
            ObsOperator::identity(4),
            ObsOperator::Linear(DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, -1.0])),
            ObsOperator::Subset { indices: vec![3, 1], state_dim: 4 },
        ];
        for op in &ops {
            op.validate().unwrap();
            let dense = op.matrix() * DVector::from_column_slice(&x);
            assert_eq!(op.apply(&x), dense);
        }
        assert!(ObsOperator::Subset { indices: vec![4], state_dim: 4 }.validate().is_err());
    }

    proptest! {
        #[test]
        fn low_rank_equals_dense_everywhere(seed in 0u64..10_000, d in 1usize..=10, n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_matrix(&mut rng, d, n);
            let innov = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let r = ObsErrorSpec::new(rng.random_range(0.2..3.0), d).unwrap();
            let dense = dense_logpdf(&innov, &(r.matrix() + &y * y.transpose()));
            let fast = innovation_loglik(&innov, &r, &y).unwrap();
            prop_assert!((fast - dense).abs() < 1e-10, "{fast} vs {dense}");
        }

        #[test]
        fn log_sum_exp_shift_and_permutation(v in proptest::collection::vec(-700.0f64..700.0, 1..20), c in -100.0f64..100.0) {
            let base = log_sum_exp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            prop_assert!((log_sum_exp(&shifted).unwrap() - (base + c)).abs() < 1e-12 * (1.0 + base.abs()));
            let mut rev = v.clone();
            rev.reverse();
            prop_assert!((log_sum_exp(&rev).unwrap() - base).abs() < 1e-12 * (1.0 + base.abs()));
        }

        #[test]
        fn anomalies_are_translation_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_matrix(&mut rng, 3, 5);
            let a = mean_and_anomalies(&e).unwrap();
            let b = mean_and_anomalies(&e.add_scalar(shift)).unwrap();
            prop_assert!((&b.mean - a.mean.add_scalar(shift)).amax() < 1e-12);
            prop_assert!((&b.anomalies - &a.anomalies).amax() < 1e-12);
        }
    }
}

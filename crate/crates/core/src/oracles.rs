//! High-accuracy evidence references: tensor-product Gauss-Hermite
//! quadrature over the prior's principal axes, and brute-force Monte Carlo
//! with power-law extrapolation of its convergence sequence.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::ForwardModel;
use crate::error::{CmeError, Result};
use crate::evidence::{window_loglik, CmeMethod, CmeResult, Diagnostics, EvidencingWindow};
use crate::gaussian::{log_pi, log_sum_exp, svd_anomalies, GaussianBelief, ObsErrorSpec, ObsOperator};

/// Largest tensor-product grid `gh_cme` will evaluate.
pub const MAX_QUADRATURE_POINTS: usize = 10_000_000;
pub const MAX_QUADRATURE_DIM: usize = 6;

/// Evaluation chunk; fixes the reduction tree independently of threads.
const CHUNK: usize = 4096;

/// Gauss-Hermite rule for the weight `e^{-x²}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub degree: usize,
    /// Ascending.
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Nodes are found by Newton iteration on the orthonormal Hermite
/// recurrence; weights are `1 / (m p̃_{m-1}(x)²)` in that normalization,
/// which is the classical `2^{m-1} m! √π / (m² H_{m-1}(x)²)`.
pub fn hermite_rule(m: usize) -> Result<QuadratureRule> {
    if !(1..=64).contains(&m) {
        return Err(CmeError::invalid(format!("Hermite degree {m} outside 1..=64")));
    }
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let half = m.div_ceil(2);
    let mf = m as f64;
    let mut z = 0.0;
    for i in 0..half {
        // Asymptotic starting guesses, largest root first.
        z = match i {
            0 => (2.0 * mf + 1.0).sqrt() - 1.85575 * (2.0 * mf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * mf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * nodes[0],
            3 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 2],
        };
        for _ in 0..100 {
            let (p1, p2) = orthonormal_hermite(m, z, pim4);
            let dz = p1 / ((2.0 * mf).sqrt() * p2);
            z -= dz;
            if dz.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, p2) = orthonormal_hermite(m, z, pim4);
        nodes[i] = z;
        nodes[m - 1 - i] = -z;
        let w = 1.0 / (mf * p2 * p2);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    nodes.reverse();
    weights.reverse();
    Ok(QuadratureRule {
        degree: m,
        nodes,
        weights,
    })
}

/// `(p̃_m(x), p̃_{m-1}(x))` for the orthonormal Hermite functions without
/// the Gaussian factor.
fn orthonormal_hermite(m: usize, x: f64, p0: f64) -> (f64, f64) {
    let (mut p1, mut p2) = (p0, 0.0);
    for j in 1..=m {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = x * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}

/// `E[f(X)]` for `X ~ N(mean, sigma²)`.
pub fn gh_integrate_1d<F: Fn(f64) -> f64>(f: F, mean: f64, sigma: f64, m: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(CmeError::invalid("sigma must be positive"));
    }
    let rule = hermite_rule(m)?;
    let s: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(x, w)| w * f(std::f64::consts::SQRT_2 * sigma * x + mean))
        .sum();
    Ok(s / std::f64::consts::PI.sqrt())
}

/// `log E[exp(log_f(x))]` for `x ~ N(x̄, X Xᵀ)` by tensor-product quadrature
/// on the principal axes: points `x̄ + √2 U S χ`.
pub fn gh_log_expectation<L>(prior: &GaussianBelief, m: usize, log_f: L) -> Result<f64>
where
    L: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = prior.state_dim();
    if dim == 0 || dim > MAX_QUADRATURE_DIM {
        return Err(CmeError::invalid(format!(
            "quadrature is limited to 1..={MAX_QUADRATURE_DIM} dimensions (got {dim})"
        )));
    }
    if prior.rank() < dim + 1 {
        return Err(CmeError::invalid("quadrature needs N >= M + 1 members"));
    }
    let rule = hermite_rule(m)?;
    let n_points = m
        .checked_pow(dim as u32)
        .filter(|&p| p <= MAX_QUADRATURE_POINTS)
        .ok_or_else(|| CmeError::invalid(format!("{m}^{dim} quadrature points exceed the budget")))?;
    let svd = svd_anomalies(&prior.anomalies);
    let scaled = &svd.u * DMatrix::from_diagonal(&svd.singular_values) * std::f64::consts::SQRT_2;
    let log_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();
    let log_norm = -0.5 * dim as f64 * log_pi();

    let n_chunks = n_points.div_ceil(CHUNK);
    let chunk_lse = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut terms = Vec::with_capacity(CHUNK);
            let mut chi = DVector::zeros(dim);
            let mut x = DVector::zeros(dim);
            for p in c * CHUNK..((c + 1) * CHUNK).min(n_points) {
                let mut idx = p;
                let mut lw = log_norm;
                for a in 0..dim {
                    let j = idx % m;
                    idx /= m;
                    chi[a] = rule.nodes[j];
                    lw += log_w[j];
                }
                x.copy_from(&prior.mean);
                x.gemv(1.0, &scaled, &chi, 1.0);
                terms.push(lw + log_f(x.as_slice())?);
            }
            log_sum_exp(&terms)
        })
        .collect::<Result<Vec<_>>>()?;
    log_sum_exp(&chunk_lse)
}

/// Gauss-Hermite quadrature evidence of a window.
pub fn gh_cme<F: ForwardModel + ?Sized>(
    prior: &GaussianBelief,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    m: usize,
) -> Result<CmeResult> {
    if model.state_dim() != prior.state_dim() {
        return Err(CmeError::invalid("model and prior dimensions disagree"));
    }
    let log_cme = gh_log_expectation(prior, m, |x| window_loglik(model, x, h, r, win))?;
    Ok(direct(CmeMethod::Ghq, log_cme))
}

fn direct(method: CmeMethod, log_cme: f64) -> CmeResult {
    CmeResult {
        log_cme,
        per_step_terms: Vec::new(),
        method,
        diagnostics: Diagnostics {
            converged: true,
            ..Diagnostics::default()
        },
    }
}

/// Window log-likelihoods of `n` samples `x̄ + X z`, `z ~ N(0, I_N)`, in
/// draw order. Draws are sequential; evaluation is parallel.
pub fn mc_logliks<F, R>(
    prior: &GaussianBelief,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: ForwardModel + ?Sized,
    R: Rng + ?Sized,
{
    if n == 0 {
        return Err(CmeError::invalid("Monte Carlo needs at least one sample"));
    }
    if model.state_dim() != prior.state_dim() {
        return Err(CmeError::invalid("model and prior dimensions disagree"));
    }
    let rank = prior.rank();
    let mut out = Vec::with_capacity(n);
    let mut done = 0;
    while done < n {
        let len = CHUNK.min(n - done);
        let z = DMatrix::from_fn(rank, len, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &prior.anomalies * z;
        for mut col in x.column_iter_mut() {
            col += &prior.mean;
        }
        let ll = (0..len)
            .into_par_iter()
            .map(|j| window_loglik(model, x.column(j).as_slice(), h, r, win))
            .collect::<Result<Vec<_>>>()?;
        out.extend(ll);
        done += len;
    }
    Ok(out)
}

/// Monte Carlo evidence from `n_samples` prior draws.
#[allow(clippy::too_many_arguments)]
pub fn mc_cme<F, R>(
    prior: &GaussianBelief,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    n_samples: usize,
    rng: &mut R,
) -> Result<CmeResult>
where
    F: ForwardModel + ?Sized,
    R: Rng + ?Sized,
{
    let ll = mc_logliks(prior, model, h, r, win, n_samples, rng)?;
    Ok(direct(CmeMethod::Mc, mean_exp_prefix(&ll, n_samples)?))
}

fn mean_exp_prefix(ll: &[f64], n: usize) -> Result<f64> {
    let chunks = ll[..n]
        .chunks(CHUNK)
        .map(log_sum_exp)
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&chunks)? - (n as f64).ln())
}

/// Monte Carlo estimates for each sample size of `ladder`, computed on
/// nested prefixes of one draw of the largest size.
#[allow(clippy::too_many_arguments)]
pub fn mc_ladder<F, R>(
    prior: &GaussianBelief,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    ladder: &[usize],
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: ForwardModel + ?Sized,
    R: Rng + ?Sized,
{
    let n_max = ladder.iter().copied().max().unwrap_or(0);
    if ladder.contains(&0) {
        return Err(CmeError::invalid("ladder sizes must be positive"));
    }
    let ll = mc_logliks(prior, model, h, r, win, n_max, rng)?;
    ladder.iter().map(|&n| mean_exp_prefix(&ll, n)).collect()
}

/// `y(x) = a + b x^c` least-squares fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rmse: f64,
    pub converged: bool,
}

impl PowerLawFit {
    /// The `x -> ∞` limit, defined for decaying fits.
    pub fn asymptote(&self) -> Option<f64> {
        (self.c < 0.0).then_some(self.a)
    }
}

fn powerlaw_residuals(points: &[(f64, f64)], p: &[f64; 3]) -> Vec<f64> {
    points.iter().map(|&(x, y)| p[0] + p[1] * x.powf(p[2]) - y).collect()
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|r| r * r).sum()
}

/// Levenberg-Marquardt fit of `a + b x^c`, started from `a` = last value,
/// `c = -1/2` and `b` through the first point.
pub fn powerlaw_extrapolate(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 4 {
        return Err(CmeError::invalid("power-law fit needs at least 4 points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0) || !x.is_finite() || !y.is_finite()) {
        return Err(CmeError::invalid("power-law points must be finite with x > 0"));
    }
    for (i, p) in points.iter().enumerate() {
        if points[..i].iter().any(|q| q.0 == p.0) {
            return Err(CmeError::invalid("power-law abscissae must be distinct"));
        }
    }
    let (x0, y0) = points[0];
    let a0 = points[points.len() - 1].1;
    let c0 = -0.5;
    let mut p = [a0, (y0 - a0) / x0.powf(c0), c0];
    let mut res = powerlaw_residuals(points, &p);
    let mut cost = sum_sq(&res);
    let scale: f64 = points.iter().map(|q| q.1.abs()).fold(1.0, f64::max);
    let mut lambda = 1e-3;
    let mut converged = cost <= (1e-15 * scale).powi(2);
    let mut iter = 0;
    while !converged && iter < 1000 {
        iter += 1;
        let mut jac = DMatrix::zeros(points.len(), 3);
        for (i, &(x, _)) in points.iter().enumerate() {
            let xc = x.powf(p[2]);
            jac[(i, 0)] = 1.0;
            jac[(i, 1)] = xc;
            jac[(i, 2)] = p[1] * xc * x.ln();
        }
        let jtj = jac.tr_mul(&jac);
        let g = jac.tr_mul(&DVector::from_column_slice(&res));
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..3 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            let trial_res = powerlaw_residuals(points, &trial);
            let trial_cost = sum_sq(&trial_res);
            if trial_cost.is_finite() && trial_cost <= cost {
                let rel = step.iter().zip(&trial).map(|(s, t)| s.abs() / t.abs().max(1e-8)).fold(0.0, f64::max);
                let small_gain = cost - trial_cost <= 1e-15 * cost.max(f64::MIN_POSITIVE);
                p = trial;
                res = trial_res;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                converged = rel < 1e-12 || small_gain || cost <= (1e-15 * scale).powi(2);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No descent direction left: a stationary point.
            converged = g.norm() <= 1e-8 * (1.0 + cost.sqrt());
            break;
        }
    }
    Ok(PowerLawFit {
        a: p[0],
        b: p[1],
        c: p[2],
        rmse: (cost / points.len() as f64).sqrt(),
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearMap;
    use crate::etkf::ObservationRecord;
    use crate::gaussian::Ensemble;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// `∫ x^k e^{-x²} dx`.
    fn gaussian_moment(k: usize) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        // Γ((k+1)/2) for half-integer argument.
        let mut g = PI.sqrt();
        let mut a = 0.5;
        while a < (k as f64 + 1.0) / 2.0 - 0.25 {
            g *= a;
            a += 1.0;
        }
        g
    }

    fn physicists_hermite(n: usize, x: f64) -> f64 {
        let (mut h0, mut h1) = (1.0, 2.0 * x);
        if n == 0 {
            return h0;
        }
        for k in 1..n {
            let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
            h0 = h1;
            h1 = h2;
        }
        h1
    }

    #[test]
    fn low_degree_rules() {
        let r1 = hermite_rule(1).unwrap();
        assert_eq!(r1.nodes, vec![0.0]);
        assert_abs_diff_eq!(r1.weights[0], PI.sqrt(), epsilon = 1e-14);
        let r2 = hermite_rule(2).unwrap();
        assert_abs_diff_eq!(r2.nodes[1], 0.5_f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(r2.nodes[0], -(0.5_f64.sqrt()), epsilon = 1e-14);
        for w in r2.weights {
            assert_abs_diff_eq!(w, PI.sqrt() / 2.0, epsilon = 1e-14);
        }
        assert!(hermite_rule(0).is_err() && hermite_rule(65).is_err());
    }

    #[test]
    fn rules_are_symmetric_positive_and_normalized() {
        for m in 1..=64 {
            let r = hermite_rule(m).unwrap();
            let sum: f64 = r.weights.iter().sum();
            assert!((sum - PI.sqrt()).abs() < 1e-10, "m={m}: Σw={sum}");
            for i in 0..m {
                assert!(r.weights[i] > 0.0);
                assert!((r.nodes[i] + r.nodes[m - 1 - i]).abs() < 1e-12);
            }
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]), "m={m} nodes not distinct");
        }
    }

    #[test]
    fn weights_match_the_factorial_formula() {
        for m in [3, 7, 12, 20, 31] {
            let r = hermite_rule(m).unwrap();
            let mut log_fact = 0.0;
            for k in 1..=m {
                log_fact += (k as f64).ln();
            }
            for (x, w) in r.nodes.iter().zip(&r.weights) {
                let hm1 = physicists_hermite(m - 1, *x);
                let log_w = (m as f64 - 1.0) * 2f64.ln() + log_fact + 0.5 * PI.ln()
                    - 2.0 * (m as f64).ln()
                    - 2.0 * hm1.abs().ln();
                assert!((w.ln() - log_w).abs() < 1e-9, "m={m}");
            }
        }
    }

    #[test]
    fn matches_golub_welsch() {
        for m in [5, 16, 40, 64] {
            let jac = DMatrix::from_fn(m, m, |i, j| {
                if i + 1 == j || j + 1 == i {
                    (i.max(j) as f64 / 2.0).sqrt()
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(jac);
            let mut pairs: Vec<(f64, f64)> = (0..m)
                .map(|k| (eig.eigenvalues[k], PI.sqrt() * eig.eigenvectors[(0, k)].powi(2)))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let r = hermite_rule(m).unwrap();
            for (k, (x, w)) in pairs.iter().enumerate() {
                assert!((r.nodes[k] - x).abs() < 1e-9 * x.abs().max(1.0), "m={m} node {k}");
                assert!((r.weights[k] - w).abs() < 1e-8 * w + 1e-14, "m={m} weight {k}");
            }
        }
    }

    #[test]
    fn rules_integrate_monomials_exactly() {
        for m in [2, 8, 16, 32] {
            let r = hermite_rule(m).unwrap();
            for k in 0..2 * m {
                let q: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                let scale: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.abs().powi(k as i32)).sum();
                let exact = gaussian_moment(k);
                assert!((q - exact).abs() <= 1e-9 * scale, "m={m} k={k}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn one_dimensional_gaussian_expectations() {
        assert_abs_diff_eq!(gh_integrate_1d(|_| 1.0, 0.3, 2.0, 5).unwrap(), 1.0, epsilon = 1e-14);
        for m in 2..6 {
            assert_abs_diff_eq!(gh_integrate_1d(|x| x * x, 0.0, 1.0, m).unwrap(), 1.0, epsilon = 1e-13);
        }
        assert_abs_diff_eq!(gh_integrate_1d(f64::exp, 0.0, 1.0, 16).unwrap(), 0.5_f64.exp(), epsilon = 1e-8);
        assert!(gh_integrate_1d(|x| x, 0.0, 0.0, 4).is_err());
    }

    fn standard_prior(dim: usize, n: usize) -> GaussianBelief {
        // Anomalies with X Xᵀ = I: orthonormal rows orthogonal to 1.
        let mut rng = ChaCha8Rng::seed_from_u64(dim as u64);
        let raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut basis = vec![DVector::from_element(n, 1.0 / (n as f64).sqrt())];
        for c in raw.column_iter() {
            let mut v = c.into_owned();
            for b in &basis {
                v -= b * b.dot(&v);
            }
            if v.norm() > 1e-6 && basis.len() <= dim {
                basis.push(v.normalize());
            }
        }
        let x = DMatrix::from_fn(dim, n, |i, j| basis[i + 1][j]);
        GaussianBelief::new(DVector::zeros(dim), x).unwrap()
    }

    #[test]
    fn gaussian_convolution_is_exact() {
        let prior = standard_prior(1, 4);
        assert!((prior.covariance()[(0, 0)] - 1.0).abs() < 1e-12);
        let win = EvidencingWindow::new(vec![ObservationRecord::new(1, DVector::zeros(1))]).unwrap();
        let r = ObsErrorSpec::new(1.0, 1).unwrap();
        let exact = -0.5 * (4.0 * PI).ln();
        let err = |m| {
            let v = gh_cme(&prior, &LinearMap::identity(1), &ObsOperator::identity(1), &r, &win, m).unwrap();
            (v.log_cme - exact).abs()
        };
        // Not exact for small m (the integrand is not polynomial), but the
        // error falls geometrically and is at round-off by m = 32.
        assert!(err(2) > 0.1);
        assert!(err(16) < 1e-7 && err(16) < err(8));
        assert!(err(32) < 1e-12);
    }

    #[test]
    fn constant_and_exponential_integrands() {
        let prior = standard_prior(2, 5);
        for m in [1, 4, 9] {
            let v = gh_log_expectation(&prior, m, |_| Ok(-3.5)).unwrap();
            assert_abs_diff_eq!(v, -3.5, epsilon = 1e-12);
        }
        let v = gh_log_expectation(&prior, 8, |x| Ok(0.1 * x[0] + 0.2 * x[1])).unwrap();
        assert_abs_diff_eq!(v, 0.025, epsilon = 1e-8);
    }

    #[test]
    fn quadrature_preconditions() {
        let prior = standard_prior(2, 3);
        assert!(gh_log_expectation(&prior, 4, |_| Ok(0.0)).is_ok());
        let thin = GaussianBelief::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, -0.5])).unwrap();
        assert!(gh_log_expectation(&thin, 4, |_| Ok(0.0)).is_err());
        let big = standard_prior(6, 8);
        assert!(gh_log_expectation(&big, 20, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn quadrature_matches_kalman_filter_on_linear_model() {
        let prior = standard_prior(2, 4);
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 1.0]);
        let model = LinearMap::new(a).unwrap();
        let hm = DMatrix::identity(2, 2);
        let r = ObsErrorSpec::new(2.0, 2).unwrap();
        let win = EvidencingWindow::new(vec![
            ObservationRecord::new(1, DVector::from_vec(vec![0.4, -0.3])),
            ObservationRecord::new(3, DVector::from_vec(vec![1.0, 0.2])),
        ])
        .unwrap();
        let kf = crate::evidence::kf_evidence(&model, &prior.mean, &prior.covariance(), &hm, &r, &win).unwrap();
        let gh = gh_cme(&prior, &model, &ObsOperator::identity(2), &r, &win, 32).unwrap();
        assert_abs_diff_eq!(gh.log_cme, kf.log_cme, epsilon = 1e-10);
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let prior = standard_prior(1, 3);
        let win = EvidencingWindow::new(vec![ObservationRecord::new(1, DVector::zeros(1))]).unwrap();
        let r = ObsErrorSpec::new(1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let v = mc_cme(&prior, &LinearMap::identity(1), &ObsOperator::identity(1), &r, &win, 1_000_000, &mut rng).unwrap();
        assert!((v.log_cme + 0.5 * (4.0 * PI).ln()).abs() < 0.01);
    }

    #[test]
    fn monte_carlo_single_degenerate_sample() {
        let e = Ensemble(DMatrix::from_element(2, 3, 0.5));
        let b = e.belief().unwrap();
        let model = LinearMap::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0])).unwrap();
        let r = ObsErrorSpec::new(0.4, 2).unwrap();
        let h = ObsOperator::identity(2);
        let win = EvidencingWindow::new(vec![ObservationRecord::new(2, DVector::from_vec(vec![1.0, 0.0]))]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = mc_cme(&b, &model, &h, &r, &win, 1, &mut rng).unwrap();
        let exact = window_loglik(&model, &[0.5, 0.5], &h, &r, &win).unwrap();
        assert_eq!(v.log_cme, exact);
    }

    #[test]
    fn ladder_uses_nested_prefixes() {
        let prior = standard_prior(1, 3);
        let win = EvidencingWindow::new(vec![ObservationRecord::new(1, DVector::from_element(1, 0.7))]).unwrap();
        let r = ObsErrorSpec::new(1.0, 1).unwrap();
        let (model, h) = (LinearMap::identity(1), ObsOperator::identity(1));
        let ladder = [10, 100, 5000];
        let values = mc_ladder(&prior, &model, &h, &r, &win, &ladder, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (n, v) in ladder.iter().zip(&values) {
            let direct = mc_cme(&prior, &model, &h, &r, &win, *n, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            assert_abs_diff_eq!(direct.log_cme, *v, epsilon = 1e-12);
        }
    }

    #[test]
    fn monte_carlo_error_shrinks_like_inverse_root() {
        let prior = standard_prior(1, 3);
        let win = EvidencingWindow::new(vec![ObservationRecord::new(1, DVector::from_element(1, 0.5))]).unwrap();
        let r = ObsErrorSpec::new(1.0, 1).unwrap();
        let (model, h) = (LinearMap::identity(1), ObsOperator::identity(1));
        let spread = |n: usize| {
            let v: Vec<f64> = (0..200)
                .map(|s| mc_cme(&prior, &model, &h, &r, &win, n, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().log_cme)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let (s1, s4) = (spread(250), spread(1000));
        let slope = (s4 / s1).ln() / 4f64.ln();
        assert!(slope > -1.0 && slope < -0.25, "slope {slope}");
    }

    #[test]
    fn powerlaw_recovers_synthetic_parameters() {
        let pts: Vec<(f64, f64)> = [1e2, 1e3, 1e4, 1e5, 1e6]
            .iter()
            .map(|&x: &f64| (x, -65.44 + 120.0 * x.powf(-0.4)))
            .collect();
        let fit = powerlaw_extrapolate(&pts).unwrap();
        assert!(fit.converged);
        assert!((fit.a + 65.44).abs() < 1e-6, "{fit:?}");
        assert!((fit.b - 120.0).abs() < 1e-6, "{fit:?}");
        assert!((fit.c + 0.4).abs() < 1e-6, "{fit:?}");
        assert_eq!(fit.asymptote(), Some(fit.a));
    }

    #[test]
    fn powerlaw_constant_data() {
        let pts: Vec<(f64, f64)> = [1e2, 1e3, 1e4, 1e5].iter().map(|&x| (x, -12.5)).collect();
        let fit = powerlaw_extrapolate(&pts).unwrap();
        assert_abs_diff_eq!(fit.a, -12.5, epsilon = 1e-12);
        assert!(fit.b.abs() < 1e-9);
        assert!(fit.rmse < 1e-12);
    }

    #[test]
    fn powerlaw_preconditions() {
        assert!(powerlaw_extrapolate(&[(1.0, 1.0), (2.0, 1.0), (3.0, 1.0)]).is_err());
        assert!(powerlaw_extrapolate(&[(1.0, 1.0), (2.0, 1.0), (2.0, 1.0), (3.0, 0.0)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn quadrature_invariant_under_anomaly_rotation(seed in 0u64..1000, angle in 0.0f64..6.3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = Ensemble(DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0)));
            let b = e.belief().unwrap();
            // Q must fix the all-ones vector so the anomalies stay centred.
            let q = rotation_about_ones(4, angle);
            let rotated = GaussianBelief { mean: b.mean.clone(), anomalies: &b.anomalies * q };
            let f = |x: &[f64]| Ok(-0.5 * (x[0] - 0.3).powi(2) - 0.2 * (x[1] + x[0]).powi(2));
            let a = gh_log_expectation(&b, 10, f).unwrap();
            let c = gh_log_expectation(&rotated, 10, f).unwrap();
            prop_assert!((a - c).abs() < 1e-8);
        }
    }

    /// An orthogonal `n x n` matrix fixing the all-ones vector.
    fn rotation_about_ones(n: usize, angle: f64) -> DMatrix<f64> {
        let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut u = DVector::from_fn(n, |i, _| if i == 0 { 1.0 } else { 0.0 });
        u -= &ones * ones.dot(&u);
        let u = u.normalize();
        let mut v = DVector::from_fn(n, |i, _| if i == 1 { 1.0 } else { 0.0 });
        v -= &ones * ones.dot(&v);
        v -= &u * u.dot(&v);
        let v = v.normalize();
        let (c, s) = (angle.cos(), angle.sin());
        DMatrix::identity(n, n) + (&u * u.transpose() + &v * v.transpose()) * (c - 1.0)
            + (&v * u.transpose() - &u * v.transpose()) * s
    }
}

//! Contextual model evidence estimators over an evidencing window.
//!
//! All estimators take the prior at the window start `t₀` and the `K`
//! observations that follow it; observation times are relative to `t₀`
//! and counted in observation intervals of the forward model.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate_members, ForwardModel, LinearMap};
use crate::error::{CmeError, Result};
use crate::etkf::{analysis_from, check_increasing, inflate, obs_space_forecast, EtkfConfig, ObservationRecord};
use crate::gaussian::{
    innovation_loglik, inverse_and_inverse_sqrt, log_mean_exp, Ensemble,
    GaussianBelief, ObsErrorSpec, ObsOperator, LN_2PI,
};

/// `K >= 1` observations at strictly increasing times after `t₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidencingWindow {
    observations: Vec<ObservationRecord>,
}

impl EvidencingWindow {
    pub fn new(observations: Vec<ObservationRecord>) -> Result<Self> {
        if observations.is_empty() {
            return Err(CmeError::invalid("an evidencing window needs K >= 1 observations"));
        }
        check_increasing(&observations, 0)?;
        Ok(Self { observations })
    }

    pub fn k(&self) -> usize {
        self.observations.len()
    }

    pub fn observations(&self) -> &[ObservationRecord] {
        &self.observations
    }

    /// The first `k` observations as a shorter window.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        Self::new(self.observations[..k.min(self.k())].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmeMethod {
    Is,
    Enkf,
    En4dvar,
    Ienks,
    Kf,
    Ghq,
    Mc,
}

impl CmeMethod {
    /// The four ensemble estimators, in reporting order.
    pub const ESTIMATORS: [CmeMethod; 4] = [Self::Is, Self::Enkf, Self::En4dvar, Self::Ienks];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Is => "is",
            Self::Enkf => "enkf",
            Self::En4dvar => "en4dvar",
            Self::Ienks => "ienks",
            Self::Kf => "kf",
            Self::Ghq => "ghq",
            Self::Mc => "mc",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        [Self::Is, Self::Enkf, Self::En4dvar, Self::Ienks, Self::Kf, Self::Ghq, Self::Mc]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| CmeError::invalid(format!("unknown method {name:?}")))
    }

    /// Whether the estimate is a sum of per-observation terms.
    pub fn is_factorized(&self) -> bool {
        matches!(self, Self::Enkf | Self::Ienks | Self::Kf)
    }
}

impl std::fmt::Display for CmeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Total Gauss-Newton iterations (0 for non-variational methods).
    pub iterations: usize,
    pub converged: bool,
    /// Largest condition number of the ensemble-space Hessians met.
    pub condition: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmeResult {
    pub log_cme: f64,
    /// One term per observation for factorized methods, otherwise empty.
    pub per_step_terms: Vec<f64>,
    pub method: CmeMethod,
    pub diagnostics: Diagnostics,
}

impl CmeResult {
    fn direct(method: CmeMethod, log_cme: f64) -> Self {
        Self {
            log_cme,
            per_step_terms: Vec::new(),
            method,
            diagnostics: Diagnostics {
                converged: true,
                ..Diagnostics::default()
            },
        }
    }

    fn factorized(method: CmeMethod, terms: Vec<f64>, diagnostics: Diagnostics) -> Self {
        Self {
            log_cme: terms.iter().sum(),
            per_step_terms: terms,
            method,
            diagnostics,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussNewtonSpec {
    /// Finite-difference bundle scaling of the anomalies.
    pub bundle_epsilon: f64,
    pub max_iterations: usize,
    /// Convergence threshold on `‖Δw‖`.
    pub step_tol: f64,
}

impl Default for GaussNewtonSpec {
    fn default() -> Self {
        Self {
            bundle_epsilon: 1e-4,
            max_iterations: 20,
            step_tol: 1e-6,
        }
    }
}

impl GaussNewtonSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.bundle_epsilon > 0.0 && self.max_iterations > 0 && self.step_tol > 0.0;
        if !ok || !self.bundle_epsilon.is_finite() || !self.step_tol.is_finite() {
            return Err(CmeError::invalid("Gauss-Newton settings must be positive"));
        }
        Ok(())
    }
}

fn check_setup<F: ForwardModel + ?Sized>(
    model: &F,
    state_dim: usize,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
) -> Result<()> {
    h.validate()?;
    if model.state_dim() != state_dim || h.state_dim() != state_dim {
        return Err(CmeError::invalid("model, prior and observation operator dimensions disagree"));
    }
    if r.dim != h.obs_dim() || win.observations.iter().any(|o| o.values.len() != r.dim) {
        return Err(CmeError::invalid("observation dimensions disagree"));
    }
    Ok(())
}

/// Observed states `H(M_{t_k:0}(x0))` at every window time.
fn observed_path<F: ForwardModel + ?Sized>(
    model: &F,
    x0: &[f64],
    h: &ObsOperator,
    obs: &[ObservationRecord],
) -> Result<Vec<DVector<f64>>> {
    let mut x = x0.to_vec();
    let mut t = 0;
    let mut out = Vec::with_capacity(obs.len());
    for o in obs {
        model.advance(&mut x, o.time_index - t)?;
        t = o.time_index;
        out.push(h.apply(&x));
    }
    Ok(out)
}

/// `Σ_k log N(y_k - H(M_{t_k:0}(x0)); 0, R)`: the window likelihood of a
/// single initial state under the deterministic model.
pub fn window_loglik<F: ForwardModel + ?Sized>(
    model: &F,
    x0: &[f64],
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
) -> Result<f64> {
    let mut x = x0.to_vec();
    let mut t = 0;
    let mut sq = 0.0;
    for o in &win.observations {
        model.advance(&mut x, o.time_index - t)?;
        t = o.time_index;
        sq += match h {
            ObsOperator::Identity { .. } => o.values.iter().zip(&x).map(|(y, v)| (y - v) * (y - v)).sum(),
            _ => (&o.values - h.apply(&x)).norm_squared(),
        };
    }
    let k = win.k() as f64;
    Ok(-0.5 * sq / r.variance - k * (0.5 * r.dim as f64 * LN_2PI + 0.5 * r.log_det()))
}

/// Importance sampling with the prior members as the sample.
pub fn cme_is<F: ForwardModel + ?Sized>(
    prior: &Ensemble,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
) -> Result<CmeResult> {
    check_setup(model, prior.state_dim(), h, r, win)?;
    let ll = prior
        .members()
        .column_iter()
        .map(|c| window_loglik(model, c.as_slice(), h, r, win))
        .collect::<Result<Vec<_>>>()?;
    Ok(CmeResult::direct(CmeMethod::Is, log_mean_exp(&ll)?))
}

/// Exact evidence of a linear-Gaussian model by the Kalman filter.
pub fn kf_evidence(
    model: &LinearMap,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
) -> Result<CmeResult> {
    let m = model.matrix.nrows();
    if mean.len() != m || cov.shape() != (m, m) || h.ncols() != m {
        return Err(CmeError::invalid("Kalman filter dimensions disagree"));
    }
    if h.nrows() != r.dim || win.observations.iter().any(|o| o.values.len() != r.dim) {
        return Err(CmeError::invalid("observation dimensions disagree"));
    }
    let d = r.dim as f64;
    let a = &model.matrix;
    let (mut x, mut p) = (mean.clone(), cov.clone());
    let mut t = 0;
    let mut terms = Vec::with_capacity(win.k());
    for o in &win.observations {
        for _ in t..o.time_index {
            x = a * x;
            p = a * &p * a.transpose();
        }
        t = o.time_index;
        let s = h * &p * h.transpose() + r.matrix();
        let chol = Cholesky::new(s.clone())
            .ok_or_else(|| CmeError::ill("R + H P Hᵀ is not positive definite"))?;
        let innov = &o.values - h * &x;
        let sol = chol.solve(&innov);
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        terms.push(-0.5 * innov.dot(&sol) - 0.5 * d * LN_2PI - 0.5 * log_det);
        let k = &p * h.transpose() * chol.inverse();
        x += &k * innov;
        p = &p - &k * h * &p;
        p = 0.5 * (&p + p.transpose());
    }
    Ok(CmeResult::factorized(
        CmeMethod::Kf,
        terms,
        Diagnostics {
            converged: true,
            ..Diagnostics::default()
        },
    ))
}

/// EnKF evidence: the ETKF run through the window with the candidate model,
/// summing the Gaussian predictive density of each innovation.
pub fn cme_enkf<F: ForwardModel + ?Sized>(
    prior: &Ensemble,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    cfg: &EtkfConfig,
) -> Result<CmeResult> {
    cfg.validate()?;
    check_setup(model, prior.state_dim(), h, r, win)?;
    let mut e = prior.clone();
    let mut t = 0;
    let mut terms = Vec::with_capacity(win.k());
    for o in &win.observations {
        propagate_members(model, e.members_mut(), o.time_index - t)?;
        t = o.time_index;
        let inflated = inflate(&e, cfg.inflation);
        let fc = obs_space_forecast(&inflated, &o.values, h, r)?;
        terms.push(innovation_loglik(&fc.innovation, r, &fc.obs_anomalies)?);
        e = analysis_from(&fc, r)?;
    }
    Ok(CmeResult::factorized(
        CmeMethod::Enkf,
        terms,
        Diagnostics {
            converged: true,
            ..Diagnostics::default()
        },
    ))
}

/// Minimizer of the ensemble-space cost over a set of observations.
#[derive(Debug, Clone)]
pub struct GaussNewtonSolution {
    pub w: DVector<f64>,
    /// `x̄₀ + X₀ w`.
    pub x0: DVector<f64>,
    /// Sensitivities `Y★_k` per observation.
    pub obs_anomalies: Vec<DMatrix<f64>>,
    /// `y_k - H(M_{t_k:0}(x★))` per observation.
    pub residuals: Vec<DVector<f64>>,
    /// `I_N + Σ Y★ᵀ R⁻¹ Y★`.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Linearization {
    obs_anomalies: Vec<DMatrix<f64>>,
    residuals: Vec<DVector<f64>>,
}

fn linearize<F: ForwardModel + ?Sized>(
    model: &F,
    x0: &DVector<f64>,
    anomalies: &DMatrix<f64>,
    h: &ObsOperator,
    obs: &[ObservationRecord],
    eps: f64,
) -> Result<Linearization> {
    let base = observed_path(model, x0.as_slice(), h, obs)?;
    let n = anomalies.ncols();
    let mut obs_anomalies: Vec<DMatrix<f64>> =
        base.iter().map(|b| DMatrix::zeros(b.len(), n)).collect();
    for j in 0..n {
        let xj = x0 + anomalies.column(j) * eps;
        let path = observed_path(model, xj.as_slice(), h, obs)?;
        for (k, hx) in path.iter().enumerate() {
            obs_anomalies[k].set_column(j, &((hx - &base[k]) / eps));
        }
    }
    let residuals = obs.iter().zip(&base).map(|(o, b)| &o.values - b).collect();
    Ok(Linearization {
        obs_anomalies,
        residuals,
    })
}

/// Gauss-Newton minimization, in ensemble space, of
/// `J(w) = ½ Σ ‖y_k - H∘M(x̄ + X w)‖²_R + ½ ‖w‖²` starting from `w = 0`.
///
/// Stops when `‖Δw‖` falls below the tolerance, keeping the current iterate;
/// otherwise returns the last iterate with `converged = false`.
pub fn gauss_newton_ensemble<F: ForwardModel + ?Sized>(
    prior: &GaussianBelief,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    obs: &[ObservationRecord],
    spec: &GaussNewtonSpec,
) -> Result<GaussNewtonSolution> {
    spec.validate()?;
    if obs.is_empty() {
        return Err(CmeError::invalid("Gauss-Newton needs at least one observation"));
    }
    check_increasing(obs, 0)?;
    let n = prior.anomalies.ncols();
    let mut w = DVector::zeros(n);
    let mut converged = false;
    let mut iterations = 0;
    let mut current = None;
    while iterations < spec.max_iterations {
        iterations += 1;
        let x0 = &prior.mean + &prior.anomalies * &w;
        let lin = linearize(model, &x0, &prior.anomalies, h, obs, spec.bundle_epsilon)?;
        let (grad, hessian) = gradient_and_hessian(&w, &lin, r);
        let chol = Cholesky::new(hessian.clone())
            .ok_or_else(|| CmeError::ill("Gauss-Newton Hessian is not positive definite"))?;
        let dw = -chol.solve(&grad);
        if !dw.iter().all(|v| v.is_finite()) {
            return Err(CmeError::ill("Gauss-Newton step is not finite"));
        }
        if dw.norm() < spec.step_tol {
            converged = true;
            current = Some((x0, lin, hessian));
            break;
        }
        w += dw;
    }
    let (x0, lin, hessian) = match current {
        Some(c) => c,
        None => {
            let x0 = &prior.mean + &prior.anomalies * &w;
            let lin = linearize(model, &x0, &prior.anomalies, h, obs, spec.bundle_epsilon)?;
            let (_, hessian) = gradient_and_hessian(&w, &lin, r);
            (x0, lin, hessian)
        }
    };
    Ok(GaussNewtonSolution {
        w,
        x0,
        obs_anomalies: lin.obs_anomalies,
        residuals: lin.residuals,
        hessian,
        iterations,
        converged,
    })
}

fn gradient_and_hessian(
    w: &DVector<f64>,
    lin: &Linearization,
    r: &ObsErrorSpec,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = w.len();
    let mut grad = w.clone();
    let mut hessian = DMatrix::identity(n, n);
    for (y, res) in lin.obs_anomalies.iter().zip(&lin.residuals) {
        grad -= y.tr_mul(res) / r.variance;
        hessian += y.tr_mul(y) / r.variance;
    }
    (grad, 0.5 * (&hessian + hessian.transpose()))
}

/// `(ln|A|, cond(A))` of a symmetric positive-definite matrix.
fn spd_log_det(a: &DMatrix<f64>) -> Result<(f64, f64)> {
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if !(min > 0.0) || !max.is_finite() {
        return Err(CmeError::ill("Hessian is not positive definite"));
    }
    Ok((eig.eigenvalues.iter().map(|l| l.ln()).sum(), max / min))
}

/// Laplace evidence of the observations a solution was computed for.
fn laplace_log_evidence(sol: &GaussNewtonSolution, r: &ObsErrorSpec) -> Result<(f64, f64)> {
    let misfit: f64 = sol.residuals.iter().map(|v| v.norm_squared()).sum::<f64>() / r.variance;
    let n_obs = sol.residuals.len() as f64;
    let d = r.dim as f64;
    let (log_det_h, cond) = spd_log_det(&sol.hessian)?;
    let value = -0.5 * misfit - 0.5 * sol.w.norm_squared() - 0.5 * n_obs * d * LN_2PI
        - 0.5 * n_obs * r.log_det()
        - 0.5 * log_det_h;
    if !value.is_finite() {
        return Err(CmeError::ill("Laplace evidence is not finite"));
    }
    Ok((value, cond))
}

/// Ensemble 4D-Var evidence: one Laplace approximation over the whole window.
pub fn cme_en4dvar<F: ForwardModel + ?Sized>(
    prior: &Ensemble,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    spec: &GaussNewtonSpec,
) -> Result<CmeResult> {
    check_setup(model, prior.state_dim(), h, r, win)?;
    let belief = prior.belief()?;
    let sol = gauss_newton_ensemble(&belief, model, h, r, &win.observations, spec)?;
    let (log_cme, cond) = laplace_log_evidence(&sol, r)?;
    Ok(CmeResult {
        log_cme,
        per_step_terms: Vec::new(),
        method: CmeMethod::En4dvar,
        diagnostics: Diagnostics {
            iterations: sol.iterations,
            converged: sol.converged,
            condition: Some(cond),
        },
    })
}

/// Quasi-static IEnKS evidence.
///
/// Observations are assimilated one at a time, each anchored at the
/// previous solution at `t₀`; the per-step term is the Laplace evidence of
/// `y_k` given the anchor, and the anchor anomalies contract by the
/// symmetric root of the inverse Hessian.
pub fn cme_ienks<F: ForwardModel + ?Sized>(
    prior: &Ensemble,
    model: &F,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    spec: &GaussNewtonSpec,
) -> Result<CmeResult> {
    check_setup(model, prior.state_dim(), h, r, win)?;
    let mut anchor = prior.belief()?;
    let mut terms = Vec::with_capacity(win.k());
    let mut diag = Diagnostics {
        converged: true,
        condition: Some(1.0),
        ..Diagnostics::default()
    };
    for o in &win.observations {
        let sol = gauss_newton_ensemble(&anchor, model, h, r, std::slice::from_ref(o), spec)?;
        let (term, cond) = laplace_log_evidence(&sol, r)?;
        terms.push(term);
        diag.iterations += sol.iterations;
        diag.converged &= sol.converged;
        diag.condition = diag.condition.map(|c| c.max(cond));
        let (_, t) = inverse_and_inverse_sqrt(&sol.hessian)?;
        anchor = GaussianBelief {
            mean: sol.x0,
            anomalies: &anchor.anomalies * t,
        };
    }
    Ok(CmeResult::factorized(CmeMethod::Ienks, terms, diag))
}

/// `log p₁ - log p₀`.
pub fn discriminating_power(logp1: f64, logp0: f64) -> f64 {
    logp1 - logp0
}

/// Closed-form ensemble-space minimizer `Yᵀ (R + Y Yᵀ)⁻¹ d` of a single
/// linear observation with innovation `d`.
pub fn linear_increment(
    y_anomalies: &DMatrix<f64>,
    innovation: &DVector<f64>,
    r: &ObsErrorSpec,
) -> Result<DVector<f64>> {
    let s = r.matrix() + y_anomalies * y_anomalies.transpose();
    let chol = Cholesky::new(s).ok_or_else(|| CmeError::ill("R + Y Yᵀ is singular"))?;
    Ok(y_anomalies.tr_mul(&chol.solve(innovation)))
}

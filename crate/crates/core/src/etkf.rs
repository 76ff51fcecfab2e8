//! Ensemble transform Kalman filter.
//!
//! Deterministic square-root update with the symmetric transform
//! `T = (I + Yᵀ R⁻¹ Y)^(-1/2)`, and multiplicative inflation of the forecast
//! anomalies before every analysis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{propagate_members, ForwardModel};
use crate::error::{CmeError, Result};
use crate::gaussian::{
    ensemble_precision, inverse_and_inverse_sqrt, mean_and_anomalies, Ensemble, ObsErrorSpec,
    ObsOperator,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtkfConfig {
    pub n_members: usize,
    /// Multiplicative anomaly inflation `α` (`Pᶠ -> α² Pᶠ`).
    pub inflation: f64,
}

impl EtkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members < 2 {
            return Err(CmeError::invalid("the ETKF needs at least two members"));
        }
        if !(self.inflation >= 1.0 && self.inflation.is_finite()) {
            return Err(CmeError::invalid("inflation must be >= 1"));
        }
        Ok(())
    }
}

/// An observation vector at an integer observation-time index.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub time_index: usize,
    pub values: DVector<f64>,
}

impl ObservationRecord {
    pub fn new(time_index: usize, values: DVector<f64>) -> Self {
        Self { time_index, values }
    }
}

/// Checks that observation times are strictly increasing and all `> after`.
pub(crate) fn check_increasing(obs: &[ObservationRecord], after: usize) -> Result<()> {
    let mut last = after;
    for (i, o) in obs.iter().enumerate() {
        if o.time_index <= last {
            return Err(CmeError::invalid(format!(
                "observation times must be strictly increasing (index {} at position {i})",
                o.time_index
            )));
        }
        last = o.time_index;
    }
    Ok(())
}

/// Scales anomalies about the mean by `alpha`.
pub fn inflate(e: &Ensemble, alpha: f64) -> Ensemble {
    if alpha == 1.0 {
        return e.clone();
    }
    let members = e.members();
    let n = members.ncols() as f64;
    let mean = members.column_sum() / n;
    let mut out = members.clone();
    for mut col in out.column_iter_mut() {
        for (v, m) in col.iter_mut().zip(mean.iter()) {
            *v = m + alpha * (*v - m);
        }
    }
    Ensemble(out)
}

/// Observation-space forecast statistics shared by the analysis and the
/// EnKF evidence.
pub(crate) struct ObsSpaceForecast {
    /// `y - H(x̄)`.
    pub innovation: DVector<f64>,
    /// Normalized anomalies of `H` applied to the members.
    pub obs_anomalies: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub anomalies: DMatrix<f64>,
}

pub(crate) fn obs_space_forecast(
    forecast: &Ensemble,
    y: &DVector<f64>,
    h: &ObsOperator,
    r: &ObsErrorSpec,
) -> Result<ObsSpaceForecast> {
    if forecast.state_dim() != h.state_dim() {
        return Err(CmeError::invalid("observation operator does not match the state dimension"));
    }
    if y.len() != h.obs_dim() || r.dim != y.len() {
        return Err(CmeError::invalid("observation vector does not match H and R"));
    }
    let belief = forecast.belief()?;
    let hx = h.apply_members(forecast.members());
    let y_anom = mean_and_anomalies(&hx)?.anomalies;
    let innovation = y - h.apply(belief.mean.as_slice());
    Ok(ObsSpaceForecast {
        innovation,
        obs_anomalies: y_anom,
        mean: belief.mean,
        anomalies: belief.anomalies,
    })
}

/// ETKF analysis of a (possibly inflated) forecast ensemble.
pub fn etkf_analysis(
    forecast: &Ensemble,
    y: &DVector<f64>,
    h: &ObsOperator,
    r: &ObsErrorSpec,
) -> Result<Ensemble> {
    let fc = obs_space_forecast(forecast, y, h, r)?;
    analysis_from(&fc, r)
}

pub(crate) fn analysis_from(fc: &ObsSpaceForecast, r: &ObsErrorSpec) -> Result<Ensemble> {
    let n = fc.anomalies.ncols();
    let s = ensemble_precision(&fc.obs_anomalies, r);
    let (s_inv, t) = inverse_and_inverse_sqrt(&s)?;
    let w = &s_inv * (fc.obs_anomalies.tr_mul(&fc.innovation) / r.variance);
    let mean = &fc.mean + &fc.anomalies * &w;
    let scale = ((n - 1) as f64).sqrt();
    let mut members = &fc.anomalies * &t * scale;
    for mut col in members.column_iter_mut() {
        col += &mean;
    }
    Ok(Ensemble(members))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationCycleState {
    /// Analysis ensemble, or the forecast when no observation was available.
    pub ensemble: Ensemble,
    pub time_index: usize,
    /// Analysis-mean RMSE against truth, when truth was supplied.
    pub rmse: Option<f64>,
}

/// RMSE of `estimate - truth` over state components.
pub fn rmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    ((estimate - truth).norm_squared() / estimate.len() as f64).sqrt()
}

/// One forecast step followed, if `y` is given, by inflation and analysis.
pub fn cycle<F: ForwardModel + ?Sized>(
    model: &F,
    ensemble: &mut Ensemble,
    y: Option<&DVector<f64>>,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    cfg: &EtkfConfig,
) -> Result<()> {
    propagate_members(model, ensemble.members_mut(), 1)?;
    if let Some(y) = y {
        let inflated = inflate(ensemble, cfg.inflation);
        *ensemble = etkf_analysis(&inflated, y, h, r)?;
    }
    Ok(())
}

/// Forecast-assimilation cycles `1..=n_cycles`.
///
/// Cycles without an observation record are pure forecasts. `truth`, when
/// given, is indexed by time (`truth[0]` is the initial time).
#[allow(clippy::too_many_arguments)]
pub fn run_cycles<F: ForwardModel + ?Sized>(
    model: &F,
    initial: &Ensemble,
    obs: &[ObservationRecord],
    n_cycles: usize,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    cfg: &EtkfConfig,
    truth: Option<&[DVector<f64>]>,
) -> Result<Vec<AssimilationCycleState>> {
    cfg.validate()?;
    check_increasing(obs, 0)?;
    if obs.iter().any(|o| o.time_index > n_cycles) {
        return Err(CmeError::invalid("observation beyond the last cycle"));
    }
    if let Some(t) = truth {
        if t.len() <= n_cycles {
            return Err(CmeError::invalid("truth is shorter than the cycle horizon"));
        }
    }
    let mut ensemble = initial.clone();
    let mut next = obs.iter().peekable();
    let mut out = Vec::with_capacity(n_cycles);
    for t in 1..=n_cycles {
        let y = match next.peek() {
            Some(o) if o.time_index == t => next.next().map(|o| &o.values),
            _ => None,
        };
        cycle(model, &mut ensemble, y, h, r, cfg).map_err(|e| with_cycle(e, t))?;
        let rmse = truth.map(|tr| {
            let mean = ensemble.members().column_sum() / ensemble.n_members() as f64;
            rmse(&mean, &tr[t])
        });
        out.push(AssimilationCycleState {
            ensemble: ensemble.clone(),
            time_index: t,
            rmse,
        });
    }
    Ok(out)
}

fn with_cycle(e: CmeError, t: usize) -> CmeError {
    match e {
        CmeError::NumericalOverflow { step, context } => CmeError::NumericalOverflow {
            step,
            context: format!("cycle {t}: {context}"),
        },
        CmeError::IllConditioned(m) => CmeError::IllConditioned(format!("cycle {t}: {m}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearMap;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense Kalman update oracle.
    fn kf_update(
        mean: &DVector<f64>,
        p: &DMatrix<f64>,
        y: &DVector<f64>,
        h: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let s = h * p * h.transpose() + r;
        let k = p * h.transpose() * s.try_inverse().unwrap();
        let mean_a = mean + &k * (y - h * mean);
        let n = mean.len();
        let p_a = (DMatrix::identity(n, n) - &k * h) * p;
        (mean_a, p_a)
    }

    fn random_ensemble(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Ensemble {
        Ensemble(DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0)))
    }

    #[test]
    fn scalar_update_matches_kalman() {
        let e = Ensemble(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]));
        let r = ObsErrorSpec::new(2.0, 1).unwrap();
        let a = etkf_analysis(&e, &DVector::from_element(1, 2.0), &ObsOperator::identity(1), &r).unwrap();
        let b = a.belief().unwrap();
        assert_abs_diff_eq!(b.mean[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(b.covariance()[(0, 0)], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_spread_zero_innovation_is_identity() {
        let e = Ensemble(DMatrix::from_element(2, 3, 1.5));
        let r = ObsErrorSpec::new(1.0, 2).unwrap();
        let y = DVector::from_element(2, 1.5);
        let a = etkf_analysis(&e, &y, &ObsOperator::identity(2), &r).unwrap();
        assert_eq!(a, e);
    }

    #[test]
    fn linear_update_matches_dense_kf() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = random_ensemble(&mut rng, 3, 4);
        let h = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, -1.0, 2.0]);
        let r = ObsErrorSpec::new(0.6, 2).unwrap();
        let y = DVector::from_vec(vec![0.3, -1.2]);
        let a = etkf_analysis(&e, &y, &ObsOperator::Linear(h.clone()), &r).unwrap();
        let prior = e.belief().unwrap();
        let (mean, p) = kf_update(&prior.mean, &prior.covariance(), &y, &h, &r.matrix());
        let post = a.belief().unwrap();
        assert!((&post.mean - mean).amax() < 1e-10);
        assert!((post.covariance() - p).amax() < 1e-10);
    }

    #[test]
    fn analysis_contracts_in_observation_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let e = random_ensemble(&mut rng, 4, 6);
            let h = ObsOperator::Subset { indices: vec![0, 2], state_dim: 4 };
            let r = ObsErrorSpec::new(rng.random_range(0.1..2.0), 2).unwrap();
            let y = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let a = etkf_analysis(&e, &y, &h, &r).unwrap();
            let yf = mean_and_anomalies(&h.apply_members(e.members())).unwrap().anomalies;
            let ya = mean_and_anomalies(&h.apply_members(a.members())).unwrap().anomalies;
            assert!((&ya * ya.transpose()).trace() <= (&yf * yf.transpose()).trace() + 1e-12);
        }
    }

    #[test]
    fn inflation_scales_about_the_mean() {
        let e = Ensemble(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]));
        assert_eq!(inflate(&e, 1.0), e);
        let i = inflate(&e, 1.03);
        assert_abs_diff_eq!(i.members()[(0, 0)], -1.03, epsilon = 1e-15);
        assert_abs_diff_eq!(i.members()[(0, 1)], 1.03, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = random_ensemble(&mut rng, 5, 7);
        let i = inflate(&e, 1.2);
        let (a, b) = (e.belief().unwrap(), i.belief().unwrap());
        assert!((&a.mean - &b.mean).amax() < 1e-12);
        assert!((a.covariance() * 1.44 - b.covariance()).amax() < 1e-12);
    }

    #[test]
    fn zero_observations_is_a_pure_forecast() {
        let model = LinearMap::new(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 1.0])).unwrap();
        let e0 = Ensemble(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, -1.0]));
        let h = ObsOperator::identity(2);
        let r = ObsErrorSpec::new(1.0, 2).unwrap();
        let cfg = EtkfConfig { n_members: 2, inflation: 1.5 };
        let states = run_cycles(&model, &e0, &[], 3, &h, &r, &cfg, None).unwrap();
        let mut e = e0.members().clone();
        for s in &states {
            e = &model.matrix * e;
            assert!((s.ensemble.members() - &e).amax() < 1e-14);
        }
    }

    #[test]
    fn two_cycles_match_kalman_recursion() {
        let model = LinearMap::identity(1);
        let e0 = Ensemble(DMatrix::from_row_slice(1, 3, &[-1.0, 0.5, 0.5]));
        let h = ObsOperator::identity(1);
        let r = ObsErrorSpec::new(0.8, 1).unwrap();
        let cfg = EtkfConfig { n_members: 3, inflation: 1.0 };
        let obs = vec![
            ObservationRecord::new(1, DVector::from_element(1, 0.7)),
            ObservationRecord::new(2, DVector::from_element(1, -0.2)),
        ];
        let states = run_cycles(&model, &e0, &obs, 2, &h, &r, &cfg, None).unwrap();
        let prior = e0.belief().unwrap();
        let (mut m, mut p) = (prior.mean.clone(), prior.covariance());
        for (s, o) in states.iter().zip(&obs) {
            (m, p) = kf_update(&m, &p, &o.values, &DMatrix::identity(1, 1), &r.matrix());
            let b = s.ensemble.belief().unwrap();
            assert_abs_diff_eq!(b.mean[0], m[0], epsilon = 1e-12);
            assert_abs_diff_eq!(b.covariance()[(0, 0)], p[(0, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn linear_gaussian_cycles_match_dense_kf() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = DMatrix::from_row_slice(3, 3, &[0.95, 0.2, 0.0, -0.2, 0.95, 0.1, 0.0, 0.0, 1.01]);
        let model = LinearMap::new(a.clone()).unwrap();
        let e0 = random_ensemble(&mut rng, 3, 5);
        let hm = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let h = ObsOperator::Linear(hm.clone());
        let r = ObsErrorSpec::new(0.5, 2).unwrap();
        let cfg = EtkfConfig { n_members: 5, inflation: 1.0 };
        let obs: Vec<_> = (1..=8)
            .map(|t| ObservationRecord::new(t, DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0))))
            .collect();
        let states = run_cycles(&model, &e0, &obs, 8, &h, &r, &cfg, None).unwrap();
        let prior = e0.belief().unwrap();
        let (mut m, mut p) = (prior.mean.clone(), prior.covariance());
        for (s, o) in states.iter().zip(&obs) {
            let (mf, pf) = (&a * &m, &a * &p * a.transpose());
            (m, p) = kf_update(&mf, &pf, &o.values, &hm, &r.matrix());
            let b = s.ensemble.belief().unwrap();
            assert!((&b.mean - &m).amax() < 1e-8);
            assert!((b.covariance() - &p).amax() < 1e-8);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let e = random_ensemble(&mut rng, 4, 5);
        let h = ObsOperator::identity(4);
        let r = ObsErrorSpec::new(0.3, 4).unwrap();
        let y = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let a = etkf_analysis(&e, &y, &h, &r).unwrap();
        let b = etkf_analysis(&e, &y, &h, &r).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unordered_observations_are_rejected() {
        let model = LinearMap::identity(1);
        let e0 = Ensemble(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]));
        let obs = vec![
            ObservationRecord::new(2, DVector::from_element(1, 0.0)),
            ObservationRecord::new(2, DVector::from_element(1, 0.0)),
        ];
        let r = ObsErrorSpec::new(1.0, 1).unwrap();
        let cfg = EtkfConfig { n_members: 2, inflation: 1.0 };
        assert!(run_cycles(&model, &e0, &obs, 3, &ObsOperator::identity(1), &r, &cfg, None).is_err());
    }
}

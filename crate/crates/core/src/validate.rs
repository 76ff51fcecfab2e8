//! Fast self-checks of the numerical invariants, run by `evidence-da validate`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{propagate, IntegratorSpec, L95Params, LinearMap, Tendency};
use crate::error::Result;
use crate::etkf::{etkf_analysis, EtkfConfig, ObservationRecord};
use crate::evidence::{cme_en4dvar, cme_enkf, cme_ienks, kf_evidence, EvidencingWindow, GaussNewtonSpec};
use crate::gaussian::{log_sum_exp, Ensemble, ObsErrorSpec, ObsOperator};
use crate::oracles::{gh_log_expectation, hermite_rule, powerlaw_extrapolate};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

pub fn run_invariant_suite() -> Vec<Check> {
    vec![
        check("etkf_scalar_kalman", || {
            let e = Ensemble(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]));
            let r = ObsErrorSpec::new(2.0, 1)?;
            let a = etkf_analysis(&e, &DVector::from_element(1, 2.0), &ObsOperator::identity(1), &r)?.belief()?;
            let err = (a.mean[0] - 1.0).abs().max((a.covariance()[(0, 0)] - 1.0).abs());
            Ok((err < 1e-12, format!("max error {err:.3e}")))
        }),
        check("linear_gaussian_collapse", || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let (c, s) = (0.4_f64.cos(), 0.4_f64.sin());
            let model = LinearMap::new(DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 0.95]))?;
            let prior = Ensemble(DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0)));
            let hm = DMatrix::<f64>::identity(3, 3);
            let h = ObsOperator::identity(3);
            let r = ObsErrorSpec::new(0.5, 3)?;
            let cfg = EtkfConfig { n_members: 5, inflation: 1.0 };
            let gn = GaussNewtonSpec::default();
            let b = prior.belief()?;
            let mut worst: f64 = 0.0;
            for k in [1, 2, 5] {
                let obs = (1..=k)
                    .map(|t| ObservationRecord::new(t, DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))))
                    .collect();
                let win = EvidencingWindow::new(obs)?;
                let kf = kf_evidence(&model, &b.mean, &b.covariance(), &hm, &r, &win)?.log_cme;
                for v in [
                    cme_enkf(&prior, &model, &h, &r, &win, &cfg)?.log_cme,
                    cme_en4dvar(&prior, &model, &h, &r, &win, &gn)?.log_cme,
                    cme_ienks(&prior, &model, &h, &r, &win, &gn)?.log_cme,
                ] {
                    worst = worst.max((v - kf).abs());
                }
            }
            Ok((worst < 1e-6, format!("max |estimator - kf| {worst:.3e}")))
        }),
        check("hermite_exactness", || {
            let mut worst: f64 = 0.0;
            for m in [2, 8, 16, 32] {
                let rule = hermite_rule(m)?;
                let mut moment = std::f64::consts::PI.sqrt();
                for k in (0..2 * m).step_by(2) {
                    let q: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(k as i32)).sum();
                    worst = worst.max((q / moment - 1.0).abs());
                    moment *= (k + 1) as f64 / 2.0;
                }
            }
            Ok((worst < 1e-9, format!("max relative moment error {worst:.3e}")))
        }),
        check("quadrature_gaussian_mgf", || {
            let x = DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 1.0]);
            let b = Ensemble(x).belief()?;
            // Var = 1, so log E[e^{0.3x}] = 0.045.
            let v = gh_log_expectation(&b, 16, |x| Ok(0.3 * x[0]))?;
            Ok(((v - 0.045).abs() < 1e-10, format!("{v:.12}")))
        }),
        check("log_sum_exp_shift", || {
            let v = [-1000.0, -1001.5, -999.2];
            let shifted: Vec<f64> = v.iter().map(|x| x + 700.0).collect();
            let d = (log_sum_exp(&shifted)? - log_sum_exp(&v)? - 700.0).abs();
            Ok((d < 1e-12, format!("{d:.3e}")))
        }),
        check("l95_fixed_point", || {
            let p = L95Params { forcing: 8.0, dim: 40 };
            let x = vec![8.0; 40];
            let mut dx = vec![1.0; 40];
            p.eval(&x, &mut dx);
            let traj = propagate(&p, &x, 50, IntegratorSpec::rk4(0.05))?;
            let drift = traj.iter().map(|s| (s.amax() - 8.0).abs()).fold(0.0, f64::max);
            let ok = dx.iter().all(|v| *v == 0.0) && drift == 0.0;
            Ok((ok, format!("max drift {drift:.3e}")))
        }),
        check("rk4_fourth_order", || {
            struct Decay;
            impl Tendency for Decay {
                fn dim(&self) -> usize {
                    1
                }
                fn eval(&self, x: &[f64], dx: &mut [f64]) {
                    dx[0] = -x[0];
                }
            }
            let err = |dt: f64| -> Result<f64> {
                let n = (1.0 / dt).round() as usize;
                let t = propagate(&Decay, &[1.0], n, IntegratorSpec::rk4(dt))?;
                Ok((t[n][0] - (-1.0f64).exp()).abs())
            };
            let ratio = err(0.02)? / err(0.01)?;
            Ok(((8.0..32.0).contains(&ratio), format!("error ratio {ratio:.2}")))
        }),
        check("powerlaw_recovery", || {
            let pts: Vec<(f64, f64)> = [1e2, 1e3, 1e4, 1e5, 1e6].iter().map(|&x: &f64| (x, -65.44 + 120.0 * x.powf(-0.4))).collect();
            let f = powerlaw_extrapolate(&pts)?;
            let err = (f.a + 65.44).abs().max((f.b - 120.0).abs()).max((f.c + 0.4).abs());
            Ok((err < 1e-6, format!("max parameter error {err:.3e}")))
        }),
    ]
}

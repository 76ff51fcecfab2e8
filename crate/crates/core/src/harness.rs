//! Identical-twin experiments: a factual truth run observed with noise, an
//! ETKF cycle with the factual model supplying window priors, and CME
//! evaluations of factual and counterfactual candidate models.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ForwardModel, IntegratorSpec, ModelSpec, StateVector, Trajectory};
use crate::error::{CmeError, Result};
use crate::etkf::{cycle, rmse, EtkfConfig, ObservationRecord};
use crate::evidence::{
    cme_en4dvar, cme_enkf, cme_ienks, cme_is, discriminating_power, CmeMethod, CmeResult,
    EvidencingWindow, GaussNewtonSpec,
};
use crate::gaussian::{Ensemble, ObsErrorSpec, ObsOperator};
use crate::oracles::{gh_cme, mc_cme, mc_ladder, powerlaw_extrapolate, PowerLawFit, MAX_QUADRATURE_DIM};
use crate::rng::{RngStreams, Stream};

pub const SCHEMA_VERSION: u32 = 1;

/// Profile drop defining the 95% likelihood-ratio interval (χ²₁(0.95)/2).
pub const CI_DROP: f64 = 1.92;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    pub ghq_degree: usize,
    pub mc_samples: usize,
    /// Sample sizes for the power-law convergence study.
    pub mc_ladder: Vec<usize>,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            ghq_degree: 32,
            mc_samples: 100_000,
            mc_ladder: vec![100, 1_000, 10_000, 100_000],
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_burn_in() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinConfig {
    pub schema_version: u32,
    /// Generates the truth and drives the assimilation cycle (`M₁`).
    pub factual: ModelSpec,
    /// Alternative candidate model (`M₀`).
    pub counterfactual: ModelSpec,
    pub etkf: EtkfConfig,
    pub obs_sigma: f64,
    pub obs_interval: f64,
    /// Internal RK4 step.
    pub dt: f64,
    pub window_k: usize,
    pub n_windows: usize,
    pub spinup_steps: usize,
    /// Analysis cycles between consecutive window starts.
    #[serde(default = "default_stride")]
    pub window_stride: usize,
    /// Observation intervals the truth runs before `t = 0`.
    #[serde(default = "default_burn_in")]
    pub truth_burn_in: usize,
    pub seed: u64,
    pub methods: Vec<CmeMethod>,
    #[serde(default)]
    pub gauss_newton: GaussNewtonSpec,
    #[serde(default)]
    pub oracles: OracleSettings,
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CmeError::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.factual.validate()?;
        self.counterfactual.validate()?;
        if self.factual.state_dim() != self.counterfactual.state_dim() {
            return Err(CmeError::invalid("factual and counterfactual models differ in dimension"));
        }
        self.etkf.validate()?;
        self.gauss_newton.validate()?;
        if !(self.obs_sigma > 0.0 && self.obs_sigma.is_finite()) {
            return Err(CmeError::invalid("obs_sigma must be positive"));
        }
        IntegratorSpec::rk4(self.dt).steps_per_interval(self.obs_interval)?;
        if self.window_k == 0 || self.n_windows == 0 || self.window_stride == 0 {
            return Err(CmeError::invalid("window_k, n_windows and window_stride must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(CmeError::invalid("no methods requested"));
        }
        for m in &self.methods {
            self.check_method(*m)?;
        }
        let o = &self.oracles;
        if o.ghq_degree == 0 || o.mc_samples == 0 || o.mc_ladder.contains(&0) {
            return Err(CmeError::invalid("oracle settings must be positive"));
        }
        Ok(())
    }

    fn check_method(&self, m: CmeMethod) -> Result<()> {
        match m {
            CmeMethod::Kf => Err(CmeError::invalid("the Kalman filter evidence needs a linear model")),
            CmeMethod::Ghq if self.factual.state_dim() > MAX_QUADRATURE_DIM => Err(CmeError::invalid(
                format!("GHQ is limited to {MAX_QUADRATURE_DIM} state dimensions"),
            )),
            _ => Ok(()),
        }
    }

    pub fn integrator(&self) -> IntegratorSpec {
        IntegratorSpec::rk4(self.dt)
    }

    pub fn flow(&self, model: &ModelSpec) -> Result<Box<dyn ForwardModel>> {
        model.flow(self.integrator(), self.obs_interval)
    }

    pub fn obs_operator(&self) -> ObsOperator {
        ObsOperator::identity(self.factual.state_dim())
    }

    pub fn obs_error(&self) -> Result<ObsErrorSpec> {
        ObsErrorSpec::from_sigma(self.obs_sigma, self.factual.state_dim())
    }

    /// Time indices of the window starts.
    pub fn window_starts(&self) -> Vec<usize> {
        (0..self.n_windows).map(|i| self.spinup_steps + i * self.window_stride).collect()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| CmeError::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Truth trajectory `x_0..x_n` from `x0` and observations
/// `y_t = x_t + σ ε_t` for `t = 1..=n`. `sigma = 0` gives exact observations.
pub fn simulate_twin<F: ForwardModel + ?Sized, R: Rng + ?Sized>(
    model: &F,
    x0: &StateVector,
    n: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<(Trajectory, Vec<ObservationRecord>)> {
    if !(sigma >= 0.0) {
        return Err(CmeError::invalid("observation noise must be non-negative"));
    }
    let mut truth = Vec::with_capacity(n + 1);
    let mut obs = Vec::with_capacity(n);
    let mut x = x0.clone();
    truth.push(x.clone());
    for t in 1..=n {
        model.advance(x.as_mut_slice(), 1)?;
        let noise = DVector::from_fn(x.len(), |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        obs.push(ObservationRecord::new(t, &x + noise));
        truth.push(x.clone());
    }
    Ok((truth, obs))
}

/// Truth at time 0: a perturbed reference state run onto the attractor.
fn initial_truth(cfg: &TwinConfig, model: &dyn ForwardModel, streams: &RngStreams) -> Result<StateVector> {
    let mut rng = streams.stream(Stream::Truth);
    let dim = cfg.factual.state_dim();
    let base = match cfg.factual {
        ModelSpec::L63(_) => DVector::from_vec(vec![1.0, 1.0, 25.0]),
        ModelSpec::L95(p) => DVector::from_element(dim, p.forcing),
    };
    let mut x = base + DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    model.advance(x.as_mut_slice(), cfg.truth_burn_in)?;
    Ok(x)
}

/// Truth and observations over `n` observation times.
pub fn generate_truth_and_obs(cfg: &TwinConfig, n: usize) -> Result<(Trajectory, Vec<ObservationRecord>)> {
    let streams = RngStreams::new(cfg.seed);
    let model = cfg.flow(&cfg.factual)?;
    let x0 = initial_truth(cfg, model.as_ref(), &streams)?;
    simulate_twin(model.as_ref(), &x0, n, cfg.obs_sigma, &mut streams.stream(Stream::Observations))
}

/// Analysis ensemble at a window start.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPrior {
    pub start_index: usize,
    pub ensemble: Ensemble,
}

impl WindowPrior {
    /// FNV-1a over the member bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.ensemble.members().iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Everything the factual assimilation cycle provides to the windows.
#[derive(Debug, Clone)]
pub struct TwinContext {
    pub truth: Trajectory,
    pub observations: Vec<ObservationRecord>,
    pub priors: Vec<WindowPrior>,
    /// Analysis RMSE for cycles `1..=` last window start.
    pub analysis_rmse: Vec<f64>,
}

impl TwinContext {
    /// The `k` observations following `start`, re-indexed from 1.
    pub fn window(&self, start: usize, k: usize) -> Result<EvidencingWindow> {
        let obs = self
            .observations
            .get(start..start + k)
            .ok_or_else(|| CmeError::invalid("window extends past the simulated observations"))?;
        EvidencingWindow::new(
            obs.iter()
                .map(|o| ObservationRecord::new(o.time_index - start, o.values.clone()))
                .collect(),
        )
    }

    /// Time-mean analysis RMSE over the cycles after spin-up.
    pub fn post_spinup_rmse(&self, spinup: usize) -> Option<f64> {
        let tail = self.analysis_rmse.get(spinup..)?;
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Runs the truth, observations and factual ETKF far enough for windows of
/// up to `max_k` observations at every configured start.
pub fn prepare(cfg: &TwinConfig, max_k: usize) -> Result<TwinContext> {
    cfg.validate()?;
    let starts = cfg.window_starts();
    let last_start = *starts.last().expect("n_windows >= 1");
    let (truth, observations) = generate_truth_and_obs(cfg, last_start + max_k.max(1))?;
    let model = cfg.flow(&cfg.factual)?;
    let h = cfg.obs_operator();
    let r = cfg.obs_error()?;
    let streams = RngStreams::new(cfg.seed);
    let mut rng = streams.stream(Stream::Ensemble);
    let dim = cfg.factual.state_dim();
    let n = cfg.etkf.n_members;
    let members = DMatrix::from_fn(dim, n, |i, _| truth[0][i]);
    let noise = DMatrix::from_fn(dim, n, |_, _| cfg.obs_sigma * rng.sample::<f64, _>(StandardNormal));
    let mut ensemble = Ensemble::new(members + noise)?;

    let mut priors = Vec::with_capacity(starts.len());
    let mut next = starts.iter().peekable();
    if next.peek() == Some(&&0) {
        priors.push(WindowPrior { start_index: 0, ensemble: ensemble.clone() });
        next.next();
    }
    let mut analysis_rmse = Vec::with_capacity(last_start);
    for t in 1..=last_start {
        cycle(model.as_ref(), &mut ensemble, Some(&observations[t - 1].values), &h, &r, &cfg.etkf)
            .map_err(|e| annotate(e, &format!("assimilation cycle {t}")))?;
        let mean = ensemble.members().column_sum() / n as f64;
        analysis_rmse.push(rmse(&mean, &truth[t]));
        if next.peek() == Some(&&t) {
            priors.push(WindowPrior { start_index: t, ensemble: ensemble.clone() });
            next.next();
        }
    }
    Ok(TwinContext {
        truth,
        observations,
        priors,
        analysis_rmse,
    })
}

fn annotate(e: CmeError, what: &str) -> CmeError {
    match e {
        CmeError::NumericalOverflow { step, context } => CmeError::NumericalOverflow {
            step,
            context: format!("{what}: {context}"),
        },
        CmeError::IllConditioned(m) => CmeError::IllConditioned(format!("{what}: {m}")),
        CmeError::InvalidInput(m) => CmeError::InvalidInput(format!("{what}: {m}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Factual,
    Counterfactual,
}

impl Branch {
    pub fn name(&self) -> &'static str {
        match self {
            Branch::Factual => "factual",
            Branch::Counterfactual => "counterfactual",
        }
    }
}

/// One CME evaluation; `log_cme` is `None` for a failed window.
#[derive(Debug, Clone, PartialEq)]
pub struct CmeRecord {
    pub window_start: usize,
    pub method: CmeMethod,
    pub branch: Branch,
    pub log_cme: Option<f64>,
    pub converged: bool,
    pub note: String,
    pub prior_fingerprint: u64,
}

/// Evaluates one estimator on one window.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_method(
    cfg: &TwinConfig,
    method: CmeMethod,
    prior: &Ensemble,
    model: &dyn ForwardModel,
    h: &ObsOperator,
    r: &ObsErrorSpec,
    win: &EvidencingWindow,
    mc_stream: u64,
) -> Result<CmeResult> {
    match method {
        CmeMethod::Is => cme_is(prior, model, h, r, win),
        CmeMethod::Enkf => cme_enkf(prior, model, h, r, win, &cfg.etkf),
        CmeMethod::En4dvar => cme_en4dvar(prior, model, h, r, win, &cfg.gauss_newton),
        CmeMethod::Ienks => cme_ienks(prior, model, h, r, win, &cfg.gauss_newton),
        CmeMethod::Ghq => gh_cme(&prior.belief()?, model, h, r, win, cfg.oracles.ghq_degree),
        CmeMethod::Mc => {
            let mut rng = RngStreams::new(cfg.seed).substream(Stream::MonteCarlo, mc_stream);
            mc_cme(&prior.belief()?, model, h, r, win, cfg.oracles.mc_samples, &mut rng)
        }
        CmeMethod::Kf => Err(CmeError::invalid("kf needs a linear model")),
    }
}

/// CME of `candidate` on every window of `ctx`, windows in parallel.
pub fn evaluate_candidate(
    ctx: &TwinContext,
    cfg: &TwinConfig,
    candidate: &ModelSpec,
    branch: Branch,
    k: usize,
    methods: &[CmeMethod],
) -> Result<Vec<CmeRecord>> {
    let model = cfg.flow(candidate)?;
    let h = cfg.obs_operator();
    let r = cfg.obs_error()?;
    let per_window = ctx
        .priors
        .par_iter()
        .map(|p| {
            let fingerprint = p.fingerprint();
            let win = ctx.window(p.start_index, k);
            methods
                .iter()
                .map(|&method| {
                    let res = win.as_ref().map_err(Clone::clone).and_then(|w| {
                        evaluate_method(cfg, method, &p.ensemble, model.as_ref(), &h, &r, w, p.start_index as u64)
                    });
                    let (log_cme, converged, note) = match res {
                        Ok(v) if v.log_cme.is_finite() => (
                            Some(v.log_cme),
                            v.diagnostics.converged,
                            if v.diagnostics.converged { String::new() } else { "not converged".into() },
                        ),
                        Ok(_) => (None, false, "non-finite evidence".into()),
                        Err(e) => (None, false, e.to_string()),
                    };
                    CmeRecord {
                        window_start: p.start_index,
                        method,
                        branch,
                        log_cme,
                        converged,
                        note,
                        prior_fingerprint: fingerprint,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    Ok(per_window.into_iter().flatten().collect())
}

/// Fixed-bin histogram layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub count: usize,
    pub failures: usize,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    /// Counts per bin; values outside `[lo, hi)` go to the end bins.
    pub histogram: Vec<usize>,
}

pub fn summarize(values: &[Option<f64>], hist: &HistogramSpec) -> SeriesSummary {
    let ok: Vec<f64> = values.iter().flatten().copied().collect();
    let count = ok.len();
    let mean = (count > 0).then(|| ok.iter().sum::<f64>() / count as f64);
    let variance = mean
        .filter(|_| count > 1)
        .map(|m| ok.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (count - 1) as f64);
    let mut histogram = vec![0; hist.bins];
    if hist.bins > 0 && hist.hi > hist.lo {
        let width = (hist.hi - hist.lo) / hist.bins as f64;
        for v in &ok {
            let b = ((v - hist.lo) / width).floor().clamp(0.0, (hist.bins - 1) as f64);
            histogram[b as usize] += 1;
        }
    }
    SeriesSummary {
        count,
        failures: values.len() - count,
        mean,
        variance,
        histogram,
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize, usize) {
    let (mut sum, mut n, mut failed) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => failed += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), n, failed)
}

/// Per-window CME of both candidate models.
#[derive(Debug, Clone, PartialEq)]
pub struct CmeSeries {
    pub start_indices: Vec<usize>,
    pub methods: Vec<CmeMethod>,
    /// Ordered by window, then branch, then method.
    pub records: Vec<CmeRecord>,
}

impl CmeSeries {
    pub fn values(&self, method: CmeMethod, branch: Branch) -> Vec<Option<f64>> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.branch == branch)
            .map(|r| r.log_cme)
            .collect()
    }

    pub fn mean(&self, method: CmeMethod, branch: Branch) -> Option<f64> {
        mean_of(self.values(method, branch).into_iter()).0
    }

    pub fn summary(&self, method: CmeMethod, branch: Branch, hist: &HistogramSpec) -> SeriesSummary {
        summarize(&self.values(method, branch), hist)
    }

    /// Per-window `log p₁ - log p₀`.
    pub fn discriminating_power(&self, method: CmeMethod) -> Vec<Option<f64>> {
        let f = self.values(method, Branch::Factual);
        let c = self.values(method, Branch::Counterfactual);
        f.iter()
            .zip(&c)
            .map(|(a, b)| Some(discriminating_power((*a)?, (*b)?)))
            .collect()
    }
}

fn interleave(starts: &[usize], methods: usize, parts: [Vec<CmeRecord>; 2]) -> Vec<CmeRecord> {
    let [f, c] = parts;
    let mut out = Vec::with_capacity(f.len() + c.len());
    for w in 0..starts.len() {
        out.extend_from_slice(&f[w * methods..(w + 1) * methods]);
        out.extend_from_slice(&c[w * methods..(w + 1) * methods]);
    }
    out
}

/// The full twin experiment for the configured methods.
pub fn run_twin(cfg: &TwinConfig) -> Result<CmeSeries> {
    let ctx = prepare(cfg, cfg.window_k)?;
    run_twin_with(&ctx, cfg)
}

/// [`run_twin`] on an already prepared context.
pub fn run_twin_with(ctx: &TwinContext, cfg: &TwinConfig) -> Result<CmeSeries> {
    let f = evaluate_candidate(ctx, cfg, &cfg.factual, Branch::Factual, cfg.window_k, &cfg.methods)?;
    let c = evaluate_candidate(ctx, cfg, &cfg.counterfactual, Branch::Counterfactual, cfg.window_k, &cfg.methods)?;
    let start_indices: Vec<usize> = ctx.priors.iter().map(|p| p.start_index).collect();
    Ok(CmeSeries {
        records: interleave(&start_indices, cfg.methods.len(), [f, c]),
        start_indices,
        methods: cfg.methods.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Candidate forcing = factual forcing + Δ.
    ForcingDelta,
    /// Window length K, counterfactual model fixed.
    WindowLength,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::ForcingDelta => "forcing_delta",
            SweepAxis::WindowLength => "window_length",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub methods: Vec<CmeMethod>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.methods.is_empty() {
            return Err(CmeError::invalid("sweep grid and methods must be nonempty"));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(CmeError::invalid("sweep grid values must be finite"));
        }
        if self.axis == SweepAxis::WindowLength
            && self.grid.iter().any(|&k| k < 1.0 || k.fract() != 0.0)
        {
            return Err(CmeError::invalid("window lengths must be positive integers"));
        }
        Ok(())
    }
}

/// Means over windows at one grid point for one method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub method: CmeMethod,
    /// Mean CME of the factual model.
    pub mean_factual: Option<f64>,
    /// Mean CME of the candidate at this grid point.
    pub mean_candidate: Option<f64>,
    /// Mean of per-window `log p_factual - log p_candidate`.
    pub mean_power: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

fn sweep_rows(value: f64, methods: &[CmeMethod], f: &[CmeRecord], c: &[CmeRecord]) -> Vec<SweepRow> {
    methods
        .iter()
        .map(|&m| {
            let fv: Vec<_> = f.iter().filter(|r| r.method == m).map(|r| r.log_cme).collect();
            let cv: Vec<_> = c.iter().filter(|r| r.method == m).map(|r| r.log_cme).collect();
            let (mean_power, n_ok, n_failed) =
                mean_of(fv.iter().zip(&cv).map(|(a, b)| Some(discriminating_power((*a)?, (*b)?))));
            SweepRow {
                value,
                method: m,
                mean_factual: mean_of(fv.into_iter()).0,
                mean_candidate: mean_of(cv.into_iter()).0,
                mean_power,
                n_ok,
                n_failed,
            }
        })
        .collect()
}

/// Mean CME and discriminating power along a sweep axis. The factual
/// assimilation run and its window priors are shared by all grid points.
pub fn run_sweep(cfg: &TwinConfig, sweep: &SweepSpec) -> Result<Vec<SweepRow>> {
    sweep.validate()?;
    let checked = TwinConfig { methods: sweep.methods.clone(), ..cfg.clone() };
    checked.validate()?;
    let max_k = match sweep.axis {
        SweepAxis::ForcingDelta => cfg.window_k,
        SweepAxis::WindowLength => sweep.grid.iter().fold(1.0, |a: f64, &b| a.max(b)) as usize,
    };
    let ctx = prepare(cfg, max_k)?;
    run_sweep_with(&ctx, cfg, sweep)
}

pub fn run_sweep_with(ctx: &TwinContext, cfg: &TwinConfig, sweep: &SweepSpec) -> Result<Vec<SweepRow>> {
    sweep.validate()?;
    let methods = &sweep.methods;
    let mut rows = Vec::new();
    match sweep.axis {
        SweepAxis::ForcingDelta => {
            let f = evaluate_candidate(ctx, cfg, &cfg.factual, Branch::Factual, cfg.window_k, methods)?;
            for &delta in &sweep.grid {
                let candidate = cfg.factual.with_forcing(cfg.factual.forcing() + delta);
                let c = if delta == 0.0 {
                    f.clone()
                } else {
                    evaluate_candidate(ctx, cfg, &candidate, Branch::Counterfactual, cfg.window_k, methods)?
                };
                rows.extend(sweep_rows(delta, methods, &f, &c));
            }
        }
        SweepAxis::WindowLength => {
            for &kv in &sweep.grid {
                let k = kv as usize;
                let f = evaluate_candidate(ctx, cfg, &cfg.factual, Branch::Factual, k, methods)?;
                let c = evaluate_candidate(ctx, cfg, &cfg.counterfactual, Branch::Counterfactual, k, methods)?;
                rows.extend(sweep_rows(kv, methods, &f, &c));
            }
        }
    }
    Ok(rows)
}

/// Mean discriminating power per grid point and method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionRow {
    pub value: f64,
    pub method: CmeMethod,
    pub mean_power: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

pub fn run_attribution(cfg: &TwinConfig, sweep: &SweepSpec) -> Result<Vec<AttributionRow>> {
    Ok(attribution_from(&run_sweep(cfg, sweep)?))
}

pub fn attribution_from(rows: &[SweepRow]) -> Vec<AttributionRow> {
    rows.iter()
        .map(|r| AttributionRow {
            value: r.value,
            method: r.method,
            mean_power: r.mean_power,
            n_ok: r.n_ok,
            n_failed: r.n_failed,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterEstimate {
    pub argmax: f64,
    pub ci: (f64, f64),
    /// Maximum on the grid boundary.
    pub unbracketed: bool,
    /// The interval reached a grid edge before the profile dropped by
    /// [`CI_DROP`].
    pub ci_truncated: bool,
    pub profile: Vec<(f64, f64)>,
}

/// Argmax and likelihood-ratio interval of a profile on an increasing grid,
/// with linear interpolation of the crossing points.
pub fn profile_confidence(grid: &[f64], profile: &[f64]) -> Result<ParameterEstimate> {
    if grid.len() != profile.len() || grid.is_empty() {
        return Err(CmeError::invalid("grid and profile must be nonempty and of equal length"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || profile.iter().any(|v| !v.is_finite()) {
        return Err(CmeError::invalid("grid must be increasing and profile finite"));
    }
    let best = (0..grid.len()).fold(0, |b, i| if profile[i] > profile[b] { i } else { b });
    let level = profile[best] - CI_DROP;
    let crossing = |i: usize, j: usize| {
        let t = (profile[i] - level) / (profile[i] - profile[j]);
        grid[i] + t * (grid[j] - grid[i])
    };
    let mut truncated = false;
    let lo = match (0..best).rev().find(|&i| profile[i] < level) {
        Some(i) => crossing(i + 1, i),
        None => {
            truncated = true;
            grid[0]
        }
    };
    let hi = match (best + 1..grid.len()).find(|&i| profile[i] < level) {
        Some(i) => crossing(i - 1, i),
        None => {
            truncated = true;
            grid[grid.len() - 1]
        }
    };
    Ok(ParameterEstimate {
        argmax: grid[best],
        ci: (lo, hi),
        unbracketed: best == 0 || best == grid.len() - 1,
        ci_truncated: truncated,
        profile: grid.iter().copied().zip(profile.iter().copied()).collect(),
    })
}

/// Profile of mean CME over absolute forcing values, its argmax and 95%
/// interval.
pub fn estimate_parameter(cfg: &TwinConfig, grid: &[f64], method: CmeMethod) -> Result<ParameterEstimate> {
    let ctx = prepare(cfg, cfg.window_k)?;
    estimate_parameter_with(&ctx, cfg, grid, method)
}

pub fn estimate_parameter_with(
    ctx: &TwinContext,
    cfg: &TwinConfig,
    grid: &[f64],
    method: CmeMethod,
) -> Result<ParameterEstimate> {
    cfg.check_method(method)?;
    let mut profile = Vec::with_capacity(grid.len());
    for &theta in grid {
        let candidate = cfg.factual.with_forcing(theta);
        let recs = evaluate_candidate(ctx, cfg, &candidate, Branch::Counterfactual, cfg.window_k, &[method])?;
        let (mean, _, _) = mean_of(recs.iter().map(|r| r.log_cme));
        profile.push(mean.ok_or_else(|| {
            CmeError::ill(format!("every window failed for forcing {theta}"))
        })?);
    }
    profile_confidence(grid, &profile)
}

/// GHQ reference against the MC convergence ladder for one branch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleBranch {
    pub branch: Branch,
    pub ghq_mean: Option<f64>,
    /// `(n, mean MC estimate)` over windows.
    pub mc_means: Vec<(usize, f64)>,
    pub fit: Option<PowerLawFit>,
    pub n_windows: usize,
    pub n_failed: usize,
}

struct OracleWindow {
    ghq: Option<f64>,
    ladder: Option<Vec<f64>>,
}

/// Per-branch GHQ mean, MC ladder means, and a power-law fit of the latter.
pub fn run_oracle_compare(cfg: &TwinConfig, ladder: &[usize], with_ghq: bool) -> Result<Vec<OracleBranch>> {
    let ctx = prepare(cfg, cfg.window_k)?;
    run_oracle_compare_with(&ctx, cfg, ladder, with_ghq)
}

pub fn run_oracle_compare_with(
    ctx: &TwinContext,
    cfg: &TwinConfig,
    ladder: &[usize],
    with_ghq: bool,
) -> Result<Vec<OracleBranch>> {
    if ladder.is_empty() || ladder.contains(&0) || ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CmeError::invalid("the MC ladder must be increasing positive sizes"));
    }
    if with_ghq {
        cfg.check_method(CmeMethod::Ghq)?;
    }
    let h = cfg.obs_operator();
    let r = cfg.obs_error()?;
    let mut out = Vec::new();
    for (branch, spec) in [(Branch::Factual, cfg.factual), (Branch::Counterfactual, cfg.counterfactual)] {
        let model = cfg.flow(&spec)?;
        let windows: Vec<OracleWindow> = ctx
            .priors
            .par_iter()
            .map(|p| {
                let eval = || -> Result<(Option<f64>, Vec<f64>)> {
                    let win = ctx.window(p.start_index, cfg.window_k)?;
                    let belief = p.ensemble.belief()?;
                    let ghq = if with_ghq {
                        Some(gh_cme(&belief, model.as_ref(), &h, &r, &win, cfg.oracles.ghq_degree)?.log_cme)
                    } else {
                        None
                    };
                    let mut rng = RngStreams::new(cfg.seed).substream(Stream::MonteCarlo, p.start_index as u64);
                    let mc = mc_ladder(&belief, model.as_ref(), &h, &r, &win, ladder, &mut rng)?;
                    Ok((ghq, mc))
                };
                match eval() {
                    Ok((ghq, mc)) if mc.iter().all(|v| v.is_finite()) && ghq.is_none_or(f64::is_finite) => {
                        OracleWindow { ghq, ladder: Some(mc) }
                    }
                    _ => OracleWindow { ghq: None, ladder: None },
                }
            })
            .collect();
        let ok: Vec<&OracleWindow> = windows.iter().filter(|w| w.ladder.is_some()).collect();
        let n_failed = windows.len() - ok.len();
        let ghq_mean = if with_ghq && !ok.is_empty() {
            Some(ok.iter().map(|w| w.ghq.unwrap_or(f64::NAN)).sum::<f64>() / ok.len() as f64)
        } else {
            None
        };
        let mc_means: Vec<(usize, f64)> = if ok.is_empty() {
            Vec::new()
        } else {
            ladder
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let s: f64 = ok.iter().map(|w| w.ladder.as_ref().expect("filtered")[i]).sum();
                    (n, s / ok.len() as f64)
                })
                .collect()
        };
        let fit = if mc_means.len() >= 4 {
            let pts: Vec<(f64, f64)> = mc_means.iter().map(|&(n, v)| (n as f64, v)).collect();
            powerlaw_extrapolate(&pts).ok()
        } else {
            None
        };
        out.push(OracleBranch {
            branch,
            ghq_mean,
            mc_means,
            fit,
            n_windows: windows.len(),
            n_failed,
        });
    }
    Ok(out)
}

//! Forward models and the fixed-step integrator.
//!
//! Two chaotic test beds are provided: the three-variable Lorenz convection model
//! with an additional constant forcing of strength `lambda` along the angle `theta`,
//! and the cyclic forty-variable Lorenz model. Both are integrated with classical
//! RK4 at a fixed internal step. The estimators never see the tendency directly;
//! they consume a [`ForwardModel`], a discrete map advancing a state by whole
//! observation intervals.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CmeError, Result};

pub type StateVector = DVector<f64>;

/// Time-indexed path of states; entry `i` is the state after `i` steps.
pub type Trajectory = Vec<StateVector>;

/// Continuous-time right-hand side `dx/dt = f(x)`.
pub trait Tendency: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `f(x)` into `dx`. Both slices have length [`Tendency::dim`].
    fn eval(&self, x: &[f64], dx: &mut [f64]);
}

/// Forced Lorenz-63 parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L63Params {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// Forcing strength.
    pub lambda: f64,
    /// Forcing angle in radians.
    pub theta: f64,
}

impl Default for L63Params {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            lambda: 0.0,
            theta: 7.0 * PI / 9.0,
        }
    }
}

impl L63Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CmeError::invalid("l63: sigma must be positive"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(CmeError::invalid("l63: beta must be positive"));
        }
        if !self.theta.is_finite() || !self.rho.is_finite() || !self.lambda.is_finite() {
            return Err(CmeError::invalid("l63: parameters must be finite"));
        }
        Ok(())
    }
}

impl Tendency for L63Params {
    fn dim(&self) -> usize {
        3
    }

    #[inline]
    fn eval(&self, x: &[f64], dx: &mut [f64]) {
        let (a, b, c) = (x[0], x[1], x[2]);
        dx[0] = self.sigma * (b - a) + self.lambda * self.theta.cos();
        dx[1] = self.rho * a - b - a * c + self.lambda * self.theta.sin();
        dx[2] = a * b - self.beta * c;
    }
}

/// L63 right-hand side with the forcing components resolved once.
#[derive(Debug, Clone, Copy)]
pub struct L63Rhs {
    sigma: f64,
    rho: f64,
    beta: f64,
    fx: f64,
    fy: f64,
}

impl From<L63Params> for L63Rhs {
    fn from(p: L63Params) -> Self {
        Self {
            sigma: p.sigma,
            rho: p.rho,
            beta: p.beta,
            fx: p.lambda * p.theta.cos(),
            fy: p.lambda * p.theta.sin(),
        }
    }
}

impl Tendency for L63Rhs {
    fn dim(&self) -> usize {
        3
    }

    #[inline]
    fn eval(&self, x: &[f64], dx: &mut [f64]) {
        let (a, b, c) = (x[0], x[1], x[2]);
        dx[0] = self.sigma * (b - a) + self.fx;
        dx[1] = self.rho * a - b - a * c + self.fy;
        dx[2] = a * b - self.beta * c;
    }
}

/// Lorenz-95 parameters: forcing `F` and state dimension `M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L95Params {
    pub forcing: f64,
    pub dim: usize,
}

impl Default for L95Params {
    fn default() -> Self {
        Self {
            forcing: 8.0,
            dim: 40,
        }
    }
}

impl L95Params {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(CmeError::invalid(format!(
                "l95: dimension {} is below the stencil minimum of 4",
                self.dim
            )));
        }
        if !self.forcing.is_finite() {
            return Err(CmeError::invalid("l95: forcing must be finite"));
        }
        Ok(())
    }
}

impl Tendency for L95Params {
    fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn eval(&self, x: &[f64], dx: &mut [f64]) {
        let m = x.len();
        for j in 0..m {
            let jm1 = (j + m - 1) % m;
            let jm2 = (j + m - 2) % m;
            let jp1 = (j + 1) % m;
            dx[j] = x[jm1] * (x[jp1] - x[jm2]) - x[j] + self.forcing;
        }
    }
}

pub fn l63_tendency(state: &[f64], p: &L63Params) -> Result<StateVector> {
    if state.len() != 3 {
        return Err(CmeError::invalid(format!(
            "l63 state must have length 3, got {}",
            state.len()
        )));
    }
    let mut dx = DVector::zeros(3);
    p.eval(state, dx.as_mut_slice());
    Ok(dx)
}

pub fn l95_tendency(state: &[f64], p: &L95Params) -> Result<StateVector> {
    if state.len() < 4 {
        return Err(CmeError::invalid(format!(
            "l95 state must have length >= 4, got {}",
            state.len()
        )));
    }
    let p = L95Params {
        dim: state.len(),
        ..*p
    };
    let mut dx = DVector::zeros(state.len());
    p.eval(state, dx.as_mut_slice());
    Ok(dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSpec {
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

impl IntegratorSpec {
    pub fn rk4(dt: f64) -> Self {
        Self {
            dt,
            scheme: Scheme::Rk4,
        }
    }

    /// Number of internal steps covering `interval`; `dt` must divide it.
    pub fn steps_per_interval(&self, interval: f64) -> Result<usize> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CmeError::invalid("integrator dt must be positive"));
        }
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(CmeError::invalid("observation interval must be positive"));
        }
        let ratio = interval / self.dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-12 * ratio.max(1.0) {
            return Err(CmeError::invalid(format!(
                "dt = {} does not divide the observation interval {}",
                self.dt, interval
            )));
        }
        Ok(steps as usize)
    }
}

/// Scratch buffers for one RK4 step.
struct Rk4Workspace {
    buf: Vec<f64>,
}

impl Rk4Workspace {
    fn new(n: usize) -> Self {
        Self { buf: vec![0.0; 5 * n] }
    }

    #[inline]
    fn step<F: Fn(&[f64], &mut [f64])>(&mut self, f: &F, x: &mut [f64], dt: f64) -> bool {
        rk4_kernel(f, x, dt, &mut self.buf)
    }
}

/// RK4 update of `x` in place using `scratch` (length `5 * x.len()`);
/// returns whether the new state is finite.
#[inline]
fn rk4_kernel<F: Fn(&[f64], &mut [f64])>(f: &F, x: &mut [f64], dt: f64, scratch: &mut [f64]) -> bool {
    let n = x.len();
    let (k1, rest) = scratch.split_at_mut(n);
    let (k2, rest) = rest.split_at_mut(n);
    let (k3, rest) = rest.split_at_mut(n);
    let (k4, tmp) = rest.split_at_mut(n);
    let tmp = &mut tmp[..n];
    let half = 0.5 * dt;
    f(x, k1);
    for i in 0..n {
        tmp[i] = x[i] + half * k1[i];
    }
    f(tmp, k2);
    for i in 0..n {
        tmp[i] = x[i] + half * k2[i];
    }
    f(tmp, k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    f(tmp, k4);
    let sixth = dt / 6.0;
    let mut finite = true;
    for i in 0..n {
        x[i] += sixth * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        finite &= x[i].is_finite();
    }
    finite
}

/// One classical RK4 step of `dx/dt = f(x)`.
pub fn rk4_step<F: Fn(&[f64], &mut [f64])>(f: F, state: &[f64], dt: f64) -> Result<StateVector> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CmeError::invalid("rk4 step requires dt > 0"));
    }
    let mut ws = Rk4Workspace::new(state.len());
    let mut x = state.to_vec();
    if !ws.step(&f, &mut x, dt) {
        return Err(CmeError::NumericalOverflow {
            step: 0,
            context: "rk4 step produced a non-finite state".into(),
        });
    }
    Ok(DVector::from_vec(x))
}

/// Integrates `n_steps` internal steps, returning all `n_steps + 1` states.
pub fn propagate<T: Tendency + ?Sized>(
    model: &T,
    state: &[f64],
    n_steps: usize,
    spec: IntegratorSpec,
) -> Result<Trajectory> {
    if state.len() != model.dim() {
        return Err(CmeError::invalid(format!(
            "state length {} does not match model dimension {}",
            state.len(),
            model.dim()
        )));
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(CmeError::invalid("integrator dt must be positive"));
    }
    let f = |x: &[f64], dx: &mut [f64]| model.eval(x, dx);
    let mut ws = Rk4Workspace::new(state.len());
    let mut x = state.to_vec();
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(DVector::from_column_slice(&x));
    for step in 0..n_steps {
        if !ws.step(&f, &mut x, spec.dt) {
            return Err(CmeError::NumericalOverflow {
                step: step + 1,
                context: "propagated state is not finite".into(),
            });
        }
        out.push(DVector::from_column_slice(&x));
    }
    Ok(out)
}

/// Discrete-time resolvent over whole observation intervals.
///
/// This is the only view of the dynamics the estimators use.
pub trait ForwardModel: Send + Sync {
    fn state_dim(&self) -> usize;

    /// Advances `state` in place by `intervals` observation intervals.
    fn advance(&self, state: &mut [f64], intervals: usize) -> Result<()>;
}

impl<F: ForwardModel + ?Sized> ForwardModel for &F {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn advance(&self, state: &mut [f64], intervals: usize) -> Result<()> {
        (**self).advance(state, intervals)
    }
}

impl<F: ForwardModel + ?Sized> ForwardModel for Box<F> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn advance(&self, state: &mut [f64], intervals: usize) -> Result<()> {
        (**self).advance(state, intervals)
    }
}

/// Time-continuous tendency sampled at a fixed observation interval.
#[derive(Debug, Clone)]
pub struct FlowMap<T> {
    tendency: T,
    dt: f64,
    steps_per_interval: usize,
}

impl<T: Tendency> FlowMap<T> {
    pub fn new(tendency: T, spec: IntegratorSpec, obs_interval: f64) -> Result<Self> {
        let steps_per_interval = spec.steps_per_interval(obs_interval)?;
        Ok(Self {
            tendency,
            dt: spec.dt,
            steps_per_interval,
        })
    }

    pub fn steps_per_interval(&self) -> usize {
        self.steps_per_interval
    }

    pub fn tendency(&self) -> &T {
        &self.tendency
    }
}

impl<T: Tendency> ForwardModel for FlowMap<T> {
    fn state_dim(&self) -> usize {
        self.tendency.dim()
    }

    fn advance(&self, state: &mut [f64], intervals: usize) -> Result<()> {
        debug_assert_eq!(state.len(), self.tendency.dim());
        let f = |x: &[f64], dx: &mut [f64]| self.tendency.eval(x, dx);
        // Low-dimensional models are advanced millions of times by the
        // quadrature and Monte Carlo references; keep their scratch on the stack.
        if let Ok(x) = <&mut [f64; 3]>::try_from(&mut *state) {
            return advance_fixed(&f, x, self.dt, intervals * self.steps_per_interval);
        }
        const STACK_DIM: usize = 8;
        let mut stack = [0.0; 5 * STACK_DIM];
        let mut heap = Vec::new();
        let scratch: &mut [f64] = if state.len() <= STACK_DIM {
            &mut stack[..5 * state.len()]
        } else {
            heap.resize(5 * state.len(), 0.0);
            &mut heap
        };
        let total = intervals * self.steps_per_interval;
        for step in 0..total {
            if !rk4_kernel(&f, state, self.dt, scratch) {
                return Err(CmeError::NumericalOverflow {
                    step: step + 1,
                    context: "propagated state is not finite".into(),
                });
            }
        }
        Ok(())
    }
}

/// [`rk4_kernel`] with the dimension known at compile time.
#[inline]
fn advance_fixed<const N: usize, F: Fn(&[f64], &mut [f64])>(
    f: &F,
    x: &mut [f64; N],
    dt: f64,
    steps: usize,
) -> Result<()> {
    let (half, sixth) = (0.5 * dt, dt / 6.0);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = ([0.0; N], [0.0; N], [0.0; N], [0.0; N], [0.0; N]);
    for step in 0..steps {
        f(x, &mut k1);
        for i in 0..N {
            tmp[i] = x[i] + half * k1[i];
        }
        f(&tmp, &mut k2);
        for i in 0..N {
            tmp[i] = x[i] + half * k2[i];
        }
        f(&tmp, &mut k3);
        for i in 0..N {
            tmp[i] = x[i] + dt * k3[i];
        }
        f(&tmp, &mut k4);
        let mut finite = true;
        for i in 0..N {
            x[i] += sixth * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
            finite &= x[i].is_finite();
        }
        if !finite {
            return Err(CmeError::NumericalOverflow {
                step: step + 1,
                context: "propagated state is not finite".into(),
            });
        }
    }
    Ok(())
}

/// Linear map `x -> A x` per observation interval.
#[derive(Debug, Clone)]
pub struct LinearMap {
    pub matrix: DMatrix<f64>,
}

impl LinearMap {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(CmeError::invalid("linear model matrix must be square"));
        }
        Ok(Self { matrix })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: DMatrix::identity(dim, dim),
        }
    }
}

impl ForwardModel for LinearMap {
    fn state_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn advance(&self, state: &mut [f64], intervals: usize) -> Result<()> {
        let mut x = DVector::from_column_slice(state);
        for step in 0..intervals {
            x = &self.matrix * x;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(CmeError::NumericalOverflow {
                    step: step + 1,
                    context: "linear propagation is not finite".into(),
                });
            }
        }
        state.copy_from_slice(x.as_slice());
        Ok(())
    }
}

/// Advances every ensemble member (column) by `intervals`.
pub fn propagate_members<F: ForwardModel + ?Sized>(
    model: &F,
    members: &mut DMatrix<f64>,
    intervals: usize,
) -> Result<()> {
    if members.nrows() != model.state_dim() {
        return Err(CmeError::invalid("ensemble rows do not match model dimension"));
    }
    for mut col in members.column_iter_mut() {
        model.advance(col.as_mut_slice(), intervals)?;
    }
    Ok(())
}

/// Named model registry entry: the model family plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum ModelSpec {
    L63(L63Params),
    L95(L95Params),
}

impl ModelSpec {
    /// Default parameters for a registered model name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "l63" => Ok(ModelSpec::L63(L63Params::default())),
            "l95" => Ok(ModelSpec::L95(L95Params::default())),
            other => Err(CmeError::invalid(format!("unknown model '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::L63(_) => "l63",
            ModelSpec::L95(_) => "l95",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            ModelSpec::L63(_) => 3,
            ModelSpec::L95(p) => p.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::L63(p) => p.validate(),
            ModelSpec::L95(p) => p.validate(),
        }
    }

    /// The forcing parameter varied in sensitivity and attribution studies
    /// (`lambda` for L63, `F` for L95).
    pub fn forcing(&self) -> f64 {
        match self {
            ModelSpec::L63(p) => p.lambda,
            ModelSpec::L95(p) => p.forcing,
        }
    }

    pub fn with_forcing(&self, value: f64) -> Self {
        match *self {
            ModelSpec::L63(p) => ModelSpec::L63(L63Params { lambda: value, ..p }),
            ModelSpec::L95(p) => ModelSpec::L95(L95Params { forcing: value, ..p }),
        }
    }

    pub fn evaluate_tendency(&self, x: &[f64]) -> Result<StateVector> {
        match self {
            ModelSpec::L63(p) => l63_tendency(x, p),
            ModelSpec::L95(p) => l95_tendency(x, p),
        }
    }

    pub fn flow(&self, spec: IntegratorSpec, obs_interval: f64) -> Result<Box<dyn ForwardModel>> {
        self.validate()?;
        Ok(match *self {
            ModelSpec::L63(p) => Box::new(FlowMap::new(L63Rhs::from(p), spec, obs_interval)?),
            ModelSpec::L95(p) => Box::new(FlowMap::new(p, spec, obs_interval)?),
        })
    }

    pub fn trajectory(&self, state: &[f64], n_steps: usize, spec: IntegratorSpec) -> Result<Trajectory> {
        self.validate()?;
        match self {
            ModelSpec::L63(p) => propagate(&L63Rhs::from(*p), state, n_steps, spec),
            ModelSpec::L95(p) => propagate(p, state, n_steps, spec),
        }
    }
}

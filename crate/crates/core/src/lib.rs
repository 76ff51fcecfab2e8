//! Contextual model evidence (CME) for chaotic state-space models.
//!
//! The CME of an observation window `y_1..y_K` is the marginal likelihood
//! `p(y_K..y_1 | y_0, y_-1, ...)`, taking as prior the state posterior that a
//! routine forecast-assimilation cycle already provides at the window start.
//! Four estimators built on ensemble data assimilation are provided alongside
//! two high-accuracy references:
//!
//! | method   | module                 | form                                   |
//! |----------|------------------------|----------------------------------------|
//! | IS       | [`evidence::cme_is`]       | ensemble average of window likelihoods |
//! | EnKF     | [`evidence::cme_enkf`]     | product of ETKF innovation densities   |
//! | En-4D-Var| [`evidence::cme_en4dvar`]  | Laplace approximation, one batch solve |
//! | IEnKS    | [`evidence::cme_ienks`]    | quasi-static Laplace, one obs per step |
//! | GHQ      | [`oracles::gh_cme`]        | tensor Gauss-Hermite quadrature        |
//! | MC       | [`oracles::mc_cme`]        | Monte Carlo from the Gaussian prior    |
//!
//! [`harness`] wires these into twin experiments with the Lorenz-63 and
//! Lorenz-95 models in [`dynamics`].

pub mod dynamics;
pub mod error;
pub mod etkf;
pub mod evidence;
pub mod gaussian;
pub mod harness;
pub mod oracles;
pub mod rng;
pub mod validate;

pub use error::{CmeError, Result};

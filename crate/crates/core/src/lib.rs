//! Variational neural SDE engine for multivariate panel time series.
//!
//! Observations for each unit (district) are encoded into a Gaussian posterior
//! over an initial latent state, evolved with an Euler–Maruyama discretisation
//! of a neural SDE conditioned on a learned unit embedding, and decoded into
//! per-step Gaussian likelihoods. Training minimises the negative ELBO with a
//! closed-form KL on the initial state and β-annealing.

pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod model;
pub mod objective;
pub mod sdesolve;
pub mod stochastic;
pub mod training;

pub use error::{Error, Result};

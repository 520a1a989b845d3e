//! Sequential MCMC data assimilation with domain localization.
//!
//! The crate is organised around the objects a filtering run needs:
//!
//! - [`grid`]: grid geometry, rectangular subdomain partitions and the
//!   active set of points touched by observations.
//! - [`noise`]: state-noise covariance operators (diagonal, dense and the
//!   boundary-vanishing Fourier-sine construction).
//! - [`dynamics`]: forward maps (scaled-identity linear model and a
//!   finite-volume rotating shallow-water solver) and transition densities.
//! - [`observations`]: swath and drifter observation generators, the
//!   selection operator and Gaussian likelihoods.
//! - [`gaussian`]: Kalman filter, stochastic EnKF and localized EnKF.
//! - [`smcmc`]: the sequential MCMC filter and its localized variant.
//! - [`rng`]: keyed random streams so replicas and samples are reproducible.

pub mod dynamics;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod noise;
pub mod observations;
pub mod rng;
pub mod smcmc;

pub use error::{Error, Result};

//! A Monte Carlo laboratory for diffusions in small isotropic random
//! perturbations of Brownian motion: coefficient-field realizations with
//! exact finite-range dependence, first-exit simulation from bounded
//! domains, walk-on-spheres harmonic baselines, transition-kernel couplings
//! under a Hoelder transport cost, the multiscale constant schedule, and
//! the estimator suite that compares smoothed exit laws against harmonic
//! measure as the domain scale grows.

pub mod brownian;
pub mod config;
pub mod coupling;
pub mod environment;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod rng;
pub mod scales;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};

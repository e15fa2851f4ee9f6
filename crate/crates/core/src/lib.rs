//! Simulation, fitting, and numerical verification toolkit for a
//! synergy-based model of human motor learning in a body-machine
//! interface (BoMI).
//!
//! A BoMI projects high-dimensional finger joint velocities `u` onto a
//! 2-D cursor velocity through a mapping matrix `C = W Φ`, where the rows
//! of `Φ` are orthonormal postural synergies. The learner maintains an
//! estimate `Ŵ` of the synergy weights (forward model, fast gradient
//! dynamics) and generates joint commands by regularized gradient descent
//! on the cursor error (inverse model, slow dynamics), with exploratory
//! noise injected to keep the regressor persistently exciting.
//!
//! Crate layout:
//! - [`synergy`] — synergy basis extraction (PCA) and mapping construction
//! - [`dynamics`] — the coupled learning ODEs and their stochastic integrator
//! - [`protocol`] — session/trial experiment orchestration and record IO
//! - [`metrics`] — reaching error, forward model error, SVD mode analysis
//! - [`fitting`] — exponential RE fit for η, grid search for γ
//! - [`verify`] — persistent excitation, Lyapunov and noise-scaling checks
//! - [`plot`] — minimal deterministic SVG figure emission

pub mod dynamics;
pub mod error;
pub mod fitting;
pub mod integrate;
mod la;
pub mod metrics;
pub mod plot;
pub mod protocol;
pub mod synergy;
pub mod verify;

pub use error::{Error, Result};

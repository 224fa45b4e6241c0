//! Nonlinear reduced-model state and parameter estimation for parametrized
//! elliptic PDEs from linear measurements.
//!
//! The library builds piecewise-affine reduced-model families over a
//! parameter box, reconstructs states with the PBDW one-space estimator,
//! selects among local models with a PDE-residual surrogate, and refines
//! state/parameter estimates by alternating residual minimization.

pub mod altmin;
pub mod artifact;
pub mod error;
pub mod estimation;
pub mod family;
pub mod fem;
pub mod measurement;
pub mod model;
pub mod pbdw;
pub mod rb;
pub mod residual;

pub use error::{CoreError, Result};
pub use measurement::{build_measurements, MeasurementSpace, Observation, Placement};
pub use fem::{DiscreteSpace, StateVector};
pub use model::{build_model, AffineModel, ModelSpec, ParameterBox, Partition, SnapshotSet};

//! Numerical toolkit for caloric measure, parabolic geometry and tangent
//! measures of parabolic uniformly rectifiable sets.

pub mod calpoly;
pub mod capacity;
pub mod cli;
pub mod error;
pub mod flow;
pub mod heatcore;
pub mod lp;
pub mod measures;
pub mod pargeo;
pub mod stochastic;
pub mod transport;

pub use error::{LabError, Result};

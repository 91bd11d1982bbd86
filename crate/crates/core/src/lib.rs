//! Radius-margin capacity bounds for bias-free feed-forward networks, a small
//! dense runtime that trains inside the max-norm constrained class, margin
//! diagnostics, and empirical checks of the inequalities behind the bounds.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which is what the command line tool uses.

pub mod capacity;
pub mod error;
pub mod margins;
pub mod model_spec;
pub mod net_engine;
pub mod oracle;
pub mod scalar;

pub use error::{Diagnostic, Error, Result};
pub use scalar::Scalar;

pub type Report = capacity::BoundReport<f64>;
pub type Net = net_engine::DenseNet<f64>;
pub type Data = net_engine::Dataset<f64>;

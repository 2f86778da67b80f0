//! Certified robustness for piecewise-linear networks.
//!
//! The crate computes differentiable lower bounds on the margin an
//! adversary must overcome inside an l-infinity ball, using a dual network
//! construction, and trains models against those bounds. Random Cauchy
//! projections make the bounds scale to wider models.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod netgraph;
pub mod duallayers;
pub mod projest;
pub mod autodual;
pub mod certifier;
pub mod trainer;
pub mod io;

pub use error::{Error, Result};
pub use tensor::Tensor;

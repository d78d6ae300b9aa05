//! Next-basket recommendation toolkit.

pub mod baselines;
pub mod data;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

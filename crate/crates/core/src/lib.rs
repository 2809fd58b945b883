//! Expert-routing speculation and offloaded decode for small mixture-of-experts models.

pub mod error;
pub mod estimator;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod offload;
pub mod speculation;
pub mod tensor_io;

pub use error::{Error, Result};

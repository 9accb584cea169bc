pub mod continual;
pub mod data;
pub mod error;
pub mod grads;
pub mod math;
pub mod model;
pub mod probes;
pub mod routing;
pub mod theory;

pub use error::{Error, Result};

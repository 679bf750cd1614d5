pub mod align;
pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod profiler;
pub mod pseudo_targets;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};

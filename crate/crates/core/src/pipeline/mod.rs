//! Training, distillation stages, the extreme setup and reporting.

pub mod config;
pub mod extreme;
pub mod probe;
pub mod report;
pub mod stages;
pub mod study;
pub mod trainer;

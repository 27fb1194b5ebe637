//! Abstaining multi-task text CNN for document classification, with
//! gradient × input explanations aggregated into PCA-based global views.

pub mod corpus;
pub mod dac;
pub mod error;
pub mod explain;
pub mod global_xai;
pub mod manifest;
pub mod metrics;
pub mod mtcnn;
pub mod nn;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};

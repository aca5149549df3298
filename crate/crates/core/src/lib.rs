//! Deep elastic networks: a hierarchical estimator holding `h^n` candidate
//! sub-models, a small selector that picks one per input instance, and the
//! alternating training procedure that learns both.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod estimator;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod rng;
pub mod selector;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use estimator::{BlockConfig, EstimatorConfig, EstimatorParams, ModelStructure, TaskConfig};
pub use params::ParamSet;
pub use selector::{SelectorDistribution, SelectorParams};
pub use tensor::Tensor;

//! Moment propagation for MC-dropout networks: a forward engine that carries
//! expectation and variance through every layer in one pass, an MC-dropout
//! sampling engine to check it against, and the training, data and metric
//! code needed to run the regression and OOD experiments.

pub mod data;
pub mod error;
pub mod experiment;
pub mod format;
pub mod layers;
mod kernels;
mod linalg;
pub mod mc;
pub mod metrics;
pub mod moments;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use format::{load_model, save_model};
pub use mc::{estimate_moments, layer_oracle, mc_forward, MomentEstimate, OracleInput, SampleBatch};
pub use moments::{product_variance, std_normal_cdf, std_normal_pdf, GaussianScalar, MomentTensor, MpDiagnostics};
pub use network::{forward, ForwardMode, ForwardOutput, ModelSpec, PredictiveDistribution, Task};
pub use tensor::Tensor;

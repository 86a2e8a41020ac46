//! Training and evaluation of small dense classifiers under the
//! statistically robust risk: the expected loss over both the data and a
//! random input-perturbation distribution.
//!
//! - [`nn`]: dense ReLU networks, exact gradients, SGD
//! - [`perturb`]: perturbation distributions
//! - [`metrics`]: pointwise losses and the violation margin
//! - [`risk`]: Monte Carlo estimators of natural, statistically robust and
//!   adversarial risk
//! - [`train`]: natural, corruption and PGD training
//! - [`data`]: MNIST IDX files and synthetic fixtures

pub mod data;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod nn;
pub mod perturb;
pub mod risk;
pub mod rng;
pub mod train;

pub use data::Dataset;
pub use error::{Error, Result};
pub use metrics::LossSpec;
pub use nn::{Network, ParamGrads, SgdState};
pub use perturb::PerturbationSpec;
pub use risk::{Metric, PgdConfig, RiskEstimate};
pub use train::{train, Regime, TrainConfig, TrainHistory};

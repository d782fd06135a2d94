//! Reconstruction-bias face forgery detection.
//!
//! An auto-encoder reconstructs the input; the absolute difference between
//! input and reconstruction (the bias image) carries the forgery evidence.
//! Latent-space attention compares encoder and decoder features to focus the
//! bias, a small classifier scores it, and a calibrated threshold on the mean
//! bias rejects samples that look unlike anything seen in training.
//!
//! Everything runs in `f64` on the CPU with hand-written backpropagation.

pub mod config;
pub mod detector;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use detector::{DetectorState, Prediction, Route};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossConfig, Objective};
pub use metrics::MetricsReport;
pub use model::{ForgeryNet, ForwardMode, ModelConfig, Params};
pub use synth::{Family, Split, SyntheticSample, SyntheticSpec};
pub use tensor::FeatureMap;
pub use training::{Arm, Checkpoint, TrainConfig};

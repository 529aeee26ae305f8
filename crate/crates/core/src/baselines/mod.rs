//! Classical baselines (logistic GLM on engineered features, 1-D CNN on
//! signal matrices) and the evaluation metrics shared by every model.

pub mod cnn;
pub mod features;
pub mod glm;
pub mod metrics;

pub use cnn::{train_cnn, Cnn, CnnConfig};
pub use features::{engineer_features, feature_names, signal_channels, signal_matrix, FeatureVector};
pub use glm::{train_glm, GlmConfig, GlmModel};
pub use metrics::{compute_metrics, report_from_confusion, ConfusionMatrix, MetricReport, MetricsError};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("training data has a single class")]
    SingleClass,
    #[error("bad input shape: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
}

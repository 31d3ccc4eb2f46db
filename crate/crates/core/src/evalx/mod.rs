//! Evaluation: multilabel metrics, ROC export, inference-time evaluation of
//! trained classifiers and linear probes on frozen encoders.

pub mod export;
pub mod infer;
pub mod metrics;
pub mod probe;

pub use infer::{evaluate, predict_probabilities, run_detector, BoxProvider, BoxSource, DetectionFile};
pub use metrics::{
    auroc, metrics_from_probabilities, roc_points, trapezoid_area, ClassMetrics, Confusion, MacroMetrics,
    MetricsReport, DEFAULT_THRESHOLD,
};
pub use probe::{
    linear_probe, probe_features, AutoencoderLatent, ClipImageEncoder, ClipTextEncoder, FrozenEncoder, NoiseFeatures,
    ResNetFeatures,
};

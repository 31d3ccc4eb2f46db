//! Multimodal paediatric wrist fracture classification with a reproducible
//! modality ablation grid.
//!
//! The radiograph is always used; bone segmentation, a fracture-location
//! heatmap and a radiology-report embedding can be switched on per
//! experiment. Evaluation reports macro-averaged multilabel metrics and a
//! paired Wilcoxon signed-rank analysis of each modality's contribution.

pub mod domain;
pub mod error;
pub mod evalx;
pub mod experiment;
pub mod heatmap;
pub mod ingest;
pub mod model;
pub mod raster;
pub mod seed;
pub mod stats;
pub mod train;

pub use domain::{BBox, LabelSpace, LabelVector, Modality, ModalityConfig, Resolution, Sample};
pub use error::{Error, Result};

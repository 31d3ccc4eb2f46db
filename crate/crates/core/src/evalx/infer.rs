//! Inference-time evaluation of a trained fusion classifier, with heatmaps
//! built from ground truth, a detector command or cached detections.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use candle_nn::ops::sigmoid;
use serde::{Deserialize, Serialize};

use crate::domain::{LabelSpace, Resolution, Sample};
use crate::error::{Error, Result};
use crate::evalx::metrics::{metrics_from_probabilities, MetricsReport};
use crate::heatmap::{gaussian_heatmap, heatmap_from_detector, Detection, Heatmap};
use crate::ingest::rescale_box;
use crate::model::FusionClassifier;
use crate::train::FusionInputs;

/// Confidence below which detections are ignored.
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.5;

/// Where test-time fracture locations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxSource {
    GroundTruth,
    Detector,
    Cached,
}

impl std::str::FromStr for BoxSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" | "ground_truth" => Ok(Self::GroundTruth),
            "detector" => Ok(Self::Detector),
            "cached" => Ok(Self::Cached),
            other => Err(Error::Config(format!(
                "unknown box source {other:?} (gt, detector, cached)"
            ))),
        }
    }
}

/// Detections file: boxes per image id, in the pixel frame of
/// `resolution` (the model resolution when absent).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    #[serde(default)]
    pub resolution: Option<Resolution>,
    pub detections: BTreeMap<String, Vec<Detection>>,
}

impl DetectionFile {
    pub fn parse(text: &str) -> Result<Self> {
        let f: DetectionFile =
            serde_json::from_str(text).map_err(|e| Error::Detector(format!("malformed detections: {e}")))?;
        for (id, dets) in &f.detections {
            for d in dets {
                if !(0.0..=1.0).contains(&d.confidence) {
                    return Err(Error::Detector(format!(
                        "{id}: confidence {} outside [0, 1]",
                        d.confidence
                    )));
                }
                d.bbox.check_axes()?;
            }
        }
        Ok(f)
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing {
                what: "detections file",
                path: path.to_path_buf(),
            });
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Detections rescaled to `to`, with centers clamped into the raster.
    pub fn at_resolution(&self, to: Resolution) -> Result<BTreeMap<String, Vec<Detection>>> {
        let from = self.resolution.unwrap_or(to);
        self.detections
            .iter()
            .map(|(id, dets)| {
                let scaled = dets
                    .iter()
                    .map(|d| {
                        let mut b = rescale_box(&d.bbox, from, to)?;
                        b.center_row = b.center_row.clamp(0.0, to.rows as f64 - 1.0);
                        b.center_col = b.center_col.clamp(0.0, to.cols as f64 - 1.0);
                        Ok(Detection {
                            bbox: b,
                            confidence: d.confidence,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((id.clone(), scaled))
            })
            .collect()
    }
}

/// Runs an external detector through `sh -c`. The command receives the
/// dataset root in `FRACMOD_DATASET_ROOT` and a file listing one image id
/// per line in `FRACMOD_IDS`, and must print a detections file on stdout.
pub fn run_detector(command: &str, dataset_root: &Path, ids: &[String]) -> Result<DetectionFile> {
    static CALLS: AtomicUsize = AtomicUsize::new(0);
    let n = CALLS.fetch_add(1, Ordering::Relaxed);
    let list = std::env::temp_dir().join(format!("fracmod-ids-{}-{n}.txt", std::process::id()));
    std::fs::write(&list, ids.join("\n"))?;
    let out = Command::new("sh")
        .arg("-c")
        .arg(command)
        .env("FRACMOD_DATASET_ROOT", dataset_root)
        .env("FRACMOD_IDS", &list)
        .output();
    let _ = std::fs::remove_file(&list);
    let out = out.map_err(|e| Error::Detector(format!("could not start {command:?}: {e}")))?;
    if !out.status.success() {
        return Err(Error::Detector(format!(
            "{command:?} exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    DetectionFile::parse(&String::from_utf8_lossy(&out.stdout))
}

/// Source of boxes for building heatmaps.
pub enum BoxProvider {
    GroundTruth,
    Detections {
        by_id: BTreeMap<String, Vec<Detection>>,
        threshold: f64,
    },
}

impl BoxProvider {
    /// One heatmap per sample. Samples without detections get an empty map.
    pub fn heatmaps(&self, samples: &[Sample], sigma_scale: f64) -> Result<Vec<Heatmap>> {
        let mut missing = 0usize;
        let maps = samples
            .iter()
            .map(|s| {
                let (r, c) = s.image.dim();
                let res = Resolution::new(r, c);
                match self {
                    BoxProvider::GroundTruth => gaussian_heatmap(&s.boxes, res, sigma_scale),
                    BoxProvider::Detections { by_id, threshold } => match by_id.get(&s.id) {
                        Some(d) => heatmap_from_detector(d, *threshold, res, sigma_scale),
                        None => {
                            missing += 1;
                            Ok(Heatmap::zeros(res))
                        }
                    },
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if missing > 0 {
            log::warn!("{missing} samples have no detections; using empty heatmaps");
        }
        Ok(maps)
    }
}

/// Sigmoid outputs `probs[sample][class]` in evaluation mode.
pub fn predict_probabilities(
    model: &FusionClassifier,
    inputs: &FusionInputs,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let order: Vec<usize> = (0..inputs.len()).collect();
    let mut out = Vec::with_capacity(inputs.len());
    for idx in order.chunks(batch_size.max(1)) {
        let (x, z) = inputs.batch(idx, None)?;
        let p = sigmoid(&model.forward(&x, z.as_ref(), false)?)?;
        out.extend(
            p.to_vec2::<f32>()?
                .into_iter()
                .map(|row| row.into_iter().map(f64::from).collect::<Vec<f64>>()),
        );
    }
    Ok(out)
}

/// Metrics of `model` on `samples` with heatmaps from `boxes` and the
/// given report embeddings (rows aligned with `samples`).
pub fn evaluate(
    model: &FusionClassifier,
    samples: &[Sample],
    boxes: &BoxProvider,
    text: Option<Tensor>,
    ls: &LabelSpace,
    threshold: f64,
    sigma_scale: f64,
) -> Result<MetricsReport> {
    if model.config().num_classes != ls.len() {
        return Err(Error::Config(format!(
            "model has {} outputs for a label space of {}",
            model.config().num_classes,
            ls.len()
        )));
    }
    let mcfg = model.config().modalities;
    let heatmaps = if mcfg.use_fracture_location {
        Some(boxes.heatmaps(samples, sigma_scale)?)
    } else {
        None
    };
    let inputs = FusionInputs::new(samples, mcfg, heatmaps, text)?;
    let probs = predict_probabilities(model, &inputs, 64)?;
    let labels: Vec<_> = samples.iter().map(|s| s.labels.clone()).collect();
    metrics_from_probabilities(&probs, &labels, ls, threshold)
}

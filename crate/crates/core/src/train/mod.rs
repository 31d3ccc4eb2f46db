//! Losses, augmentation and training loops.

pub mod autoencoder;
pub mod clip;
pub mod data;
pub mod fusion;
pub mod loss;

use std::io::Write;
use std::path::Path;

use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{LabelSpace, LabelVector};
use crate::error::{Error, Result};
use crate::ingest::{DatasetManifest, Split};
use crate::model::trainable_vars;
use crate::raster::Affine;

pub use autoencoder::{train_autoencoder, AutoencoderTrainer};
pub use clip::{report_embeddings, train_clip, ClipTrainer};
pub use data::{augment_sample, FusionInputs};
pub use fusion::{train_fusion, FusionTrainer};
pub use loss::{info_nce, retrieval_top1, weighted_bce, weighted_bce_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineRanges {
    pub rotation_deg: (f64, f64),
    /// Per-axis translation as a fraction of the raster size.
    pub translation: (f64, f64),
    pub scale: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self {
            rotation_deg: (-30.0, 30.0),
            translation: (-0.1, 0.1),
            scale: (0.85, 1.15),
        }
    }
}

impl AffineRanges {
    pub fn none() -> Self {
        Self {
            rotation_deg: (0.0, 0.0),
            translation: (0.0, 0.0),
            scale: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.rotation_deg) || !ordered(self.translation) || !ordered(self.scale) {
            return Err(Error::Config(format!(
                "augmentation ranges must be finite and ordered: {self:?}"
            )));
        }
        if self.scale.0 <= 0.0 {
            return Err(Error::Config("augmentation scale must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws rotation, per-axis translation and isotropic scale uniformly.
pub fn sample_affine(ranges: &AffineRanges, rng: &mut impl Rng) -> Affine {
    Affine {
        rotation_deg: uniform(rng, ranges.rotation_deg),
        translate: (uniform(rng, ranges.translation), uniform(rng, ranges.translation)),
        scale: uniform(rng, ranges.scale),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub augment: bool,
    pub augmentation: AffineRanges,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            dropout: 0.6,
            augment: true,
            augmentation: AffineRanges::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn clip_default() -> Self {
        Self {
            batch_size: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.augmentation.validate()
    }
}

pub const MIN_POS_WEIGHT: f64 = 1.0;
pub const MAX_POS_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub pos_weight: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        Self {
            pos_weight: vec![1.0; k],
        }
    }

    /// `#negatives / #positives` per class, clamped to `[1, 100]`.
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a LabelVector>, ls: &LabelSpace) -> Result<Self> {
        let k = ls.len();
        let mut pos = vec![0usize; k];
        let mut n = 0usize;
        for l in labels {
            n += 1;
            for c in l.positives() {
                pos[c] += 1;
            }
        }
        if n == 0 {
            return Err(Error::Dataset("class weights need a non-empty training split".into()));
        }
        let empty: Vec<String> = (0..k)
            .filter(|&c| pos[c] == 0)
            .map(|c| ls.code(c).to_string())
            .collect();
        if !empty.is_empty() {
            return Err(Error::NoPositives(empty));
        }
        let pos_weight = pos
            .iter()
            .map(|&p| ((n - p) as f64 / p as f64).clamp(MIN_POS_WEIGHT, MAX_POS_WEIGHT))
            .collect();
        Ok(Self { pos_weight })
    }
}

/// Class weights from the training split of a manifest.
pub fn compute_class_weights(manifest: &DatasetManifest) -> Result<ClassWeights> {
    ClassWeights::from_labels(manifest.split(Split::Train).map(|e| &e.labels), &manifest.label_space)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// Seconds since the start of training.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub augmentation: bool,
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn new(augmentation: bool) -> Self {
        Self {
            augmentation,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, split: &str, loss: f64, wall_time: f64) {
        self.records.push(LogRecord {
            epoch,
            split: split.to_string(),
            loss,
            wall_time,
        });
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    /// One JSON object per line: a header with the augmentation state, then
    /// one record per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::json!({ "augmentation": if self.augmentation { "on" } else { "off" } });
        writeln!(f, "{header}")?;
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Adam (no weight decay) over all trainable variables of a var map.
pub fn adam(vm: &VarMap, learning_rate: f64) -> Result<AdamW> {
    let vars = trainable_vars(vm).into_iter().map(|(_, v)| v).collect();
    let params = ParamsAdamW {
        lr: learning_rate,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(AdamW::new(vars, params)?)
}

pub(crate) fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { epoch, loss })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn class_weight_examples() {
        let ls = LabelSpace::new(["a", "b", "none"], "none").unwrap();
        let lv = |bits: [u8; 3]| LabelVector::from_bits(bits.to_vec()).unwrap();
        // a: 1 of 10, b: 5 of 10, none: 4 of 10
        let mut labels = vec![lv([1, 0, 0])];
        labels.extend((0..5).map(|_| lv([0, 1, 0])));
        labels.extend((0..4).map(|_| lv([0, 0, 1])));
        let w = ClassWeights::from_labels(&labels, &ls).unwrap();
        assert_eq!(w.pos_weight, vec![9.0, 1.0, 1.5]);

        let mut rare = vec![lv([1, 0, 0]), lv([0, 1, 0])];
        rare.extend((0..998).map(|_| lv([0, 0, 1])));
        assert_eq!(ClassWeights::from_labels(&rare, &ls).unwrap().pos_weight[0], 100.0);
    }

    #[test]
    fn class_weights_reject_empty_classes() {
        let ls = LabelSpace::new(["a", "b", "none"], "none").unwrap();
        let labels = vec![LabelVector::from_bits(vec![0, 0, 1]).unwrap()];
        match ClassWeights::from_labels(&labels, &ls) {
            Err(Error::NoPositives(c)) => assert_eq!(c, vec!["a".to_string(), "b".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(ClassWeights::from_labels(&[], &ls).is_err());
    }

    #[test]
    fn affine_draws_stay_in_range() {
        let r = AffineRanges::default();
        let mut rng = seed::rng(0, "affine", 0);
        let draws: Vec<Affine> = (0..10_000).map(|_| sample_affine(&r, &mut rng)).collect();
        let span = |f: &dyn Fn(&Affine) -> f64| {
            draws
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (lo, hi) = span(&|a| a.rotation_deg);
        assert!(lo >= -30.0 && hi <= 30.0 && lo < -29.0 && hi > 29.0);
        let (lo, hi) = span(&|a| a.translate.0.min(a.translate.1));
        assert!(lo >= -0.1 && hi <= 0.1);
        let (lo, hi) = span(&|a| a.scale);
        assert!(lo >= 0.85 && hi <= 1.15 && lo < 0.86 && hi > 1.14);
    }

    #[test]
    fn affine_degenerate_and_deterministic() {
        let mut rng = seed::rng(0, "x", 0);
        assert!(sample_affine(&AffineRanges::none(), &mut rng).is_identity());
        let a = sample_affine(&AffineRanges::default(), &mut seed::rng(4, "s", 1));
        let b = sample_affine(&AffineRanges::default(), &mut seed::rng(4, "s", 1));
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::clip_default().batch_size, 256);
        let bad = TrainConfig {
            dropout: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.augmentation.scale = (1.2, 0.9);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn log_jsonl_has_header_and_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TrainLog::new(false);
        log.push(0, "train", 0.5, 1.0);
        let p = dir.path().join("log.jsonl");
        log.write_jsonl(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"augmentation":"off"}"#);
        let rec: LogRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(rec.epoch, 0);
    }
}

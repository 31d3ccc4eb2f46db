//! Contrastive pretraining of the radiograph encoder and report projection.
//! The text backbone is run once up front; its outputs are constants.

use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::domain::Sample;
use crate::error::{Error, Result};
use crate::model::{device, stack_inputs, ClipPair, TextBackbone};
use crate::seed;
use crate::train::loss::{info_nce, retrieval_top1};
use crate::train::{adam, check_finite, sample_affine, TrainConfig, TrainLog};

pub struct ClipTrainer<'a> {
    model: ClipPair,
    samples: Vec<&'a Sample>,
    features: Tensor,
    skipped: usize,
    cfg: TrainConfig,
    opt: AdamW,
    log: TrainLog,
    start: Instant,
    epoch: usize,
}

impl<'a> ClipTrainer<'a> {
    pub fn new(model: ClipPair, samples: &'a [Sample], backbone: &dyn TextBackbone, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if backbone.hidden_dim() != model.config().text_dim {
            return Err(Error::Shape(format!(
                "backbone width {} but projection expects {}",
                backbone.hidden_dim(),
                model.config().text_dim
            )));
        }
        let with_report: Vec<&Sample> = samples.iter().filter(|s| s.report.is_some()).collect();
        let skipped = samples.len() - with_report.len();
        if skipped > 0 {
            log::warn!("clip: skipping {skipped} samples without a report");
        }
        if with_report.len() < 2 {
            return Err(Error::Dataset(format!(
                "contrastive training needs at least 2 samples with reports, found {}",
                with_report.len()
            )));
        }
        let texts: Vec<String> = with_report
            .iter()
            .map(|s| s.report.clone().unwrap_or_default())
            .collect();
        let features = backbone.encode(&texts)?;
        let opt = adam(model.var_map(), cfg.learning_rate)?;
        Ok(Self {
            model,
            samples: with_report,
            features,
            skipped,
            log: TrainLog::new(cfg.augment),
            cfg,
            opt,
            start: Instant::now(),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &ClipPair {
        &self.model
    }

    /// Samples left out for lacking a report.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn images(&self, idx: &[usize], epoch: Option<u64>) -> Result<Tensor> {
        let arrays: Vec<Array3<f32>> = idx
            .par_iter()
            .map(|&i| {
                let s = self.samples[i];
                let img = match epoch {
                    Some(e) => {
                        let affine = sample_affine(&self.cfg.augmentation, &mut seed::rng(self.cfg.seed, &s.id, e));
                        affine.warp_bilinear(&s.image, 0.0)
                    }
                    None => s.image.clone(),
                };
                img.insert_axis(ndarray::Axis(0))
            })
            .collect();
        stack_inputs(&arrays)
    }

    fn features(&self, idx: &[usize]) -> Result<Tensor> {
        let ids = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &device())?;
        Ok(self.features.index_select(&ids, 0)?)
    }

    /// Loss and in-batch top-1 retrieval on the first `n` samples, in
    /// evaluation mode and without augmentation.
    pub fn probe(&self, n: usize) -> Result<(f64, f64)> {
        let idx: Vec<usize> = (0..n.min(self.samples.len())).collect();
        let (zi, zt) = self
            .model
            .embed_pair(&self.images(&idx, None)?, &self.features(&idx)?, false)?;
        let loss = info_nce(&zi, &zt, &self.model.logit_scale()?)?;
        Ok((f64::from(loss.to_scalar::<f32>()?), retrieval_top1(&zi, &zt)?))
    }

    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut seed::rng(self.cfg.seed, "clip-shuffle", epoch as u64));
        let aug_epoch = self.cfg.augment.then_some(epoch as u64);
        let mut total = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(self.cfg.batch_size) {
            // a contrastive batch needs at least one negative
            if idx.len() < 2 {
                continue;
            }
            let (zi, zt) = self
                .model
                .embed_pair(&self.images(idx, aug_epoch)?, &self.features(idx)?, true)?;
            let loss = info_nce(&zi, &zt, &self.model.logit_scale()?)?;
            let value = f64::from(loss.to_scalar::<f32>()?);
            check_finite(value, epoch)?;
            self.opt.backward_step(&loss)?;
            total += value * idx.len() as f64;
            seen += idx.len();
        }
        let mean = total / seen.max(1) as f64;
        self.log.push(epoch, "train", mean, self.start.elapsed().as_secs_f64());
        log::debug!("clip epoch {epoch}: loss {mean:.5}");
        self.epoch += 1;
        Ok(mean)
    }

    pub fn finish(self) -> (ClipPair, TrainLog) {
        (self.model, self.log)
    }
}

pub fn train_clip(
    model: ClipPair,
    samples: &[Sample],
    backbone: &dyn TextBackbone,
    cfg: &TrainConfig,
) -> Result<(ClipPair, TrainLog)> {
    let mut t = ClipTrainer::new(model, samples, backbone, cfg.clone())?;
    for _ in 0..cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

/// Frozen text-pathway embeddings for classification: one L2-normalized row
/// per sample, zeros where a sample has no report.
pub fn report_embeddings(model: &ClipPair, backbone: &dyn TextBackbone, samples: &[Sample]) -> Result<Tensor> {
    let dim = model.config().embed_dim();
    let present: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].report.is_some()).collect();
    let mut rows = vec![0f32; samples.len() * dim];
    if !present.is_empty() {
        let texts: Vec<String> = present
            .iter()
            .map(|&i| samples[i].report.clone().unwrap_or_default())
            .collect();
        let z = model.embed_text_features(&backbone.encode(&texts)?)?.to_vec2::<f32>()?;
        for (row, &i) in z.iter().zip(&present) {
            rows[i * dim..(i + 1) * dim].copy_from_slice(row);
        }
    }
    Ok(Tensor::from_vec(rows, (samples.len(), dim), &device())?.detach())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{LabelSpace, Resolution};
    use crate::ingest::{load_dataset, make_synthetic_fixture, Split};
    use crate::model::{checksum, ClipConfig, HashedTokenBackbone};

    fn samples() -> Vec<Sample> {
        let dir = tempfile::tempdir().unwrap();
        let ls = LabelSpace::grazped_default();
        let res = Resolution::new(64, 32);
        make_synthetic_fixture(dir.path(), 2, 20, res, &ls).unwrap();
        load_dataset(dir.path(), &ls, res)
            .unwrap()
            .load_split(Split::Train)
            .unwrap()
    }

    #[test]
    fn freeze_contract_and_zero_epochs() {
        let mut s = samples();
        s[0].report = None;
        let bb = HashedTokenBackbone::new(512, 16, 0).unwrap();
        let cp = ClipPair::new(ClipConfig::new(4, 16, bb.name()), 0).unwrap();
        let img0 = checksum(cp.var_map(), ClipPair::IMAGE_PREFIX).unwrap();
        let proj0 = checksum(cp.var_map(), ClipPair::PROJECTION_PREFIX).unwrap();
        let bb0 = bb.checksum().unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..TrainConfig::clip_default()
        };
        let mut t = ClipTrainer::new(cp, &s, &bb, cfg).unwrap();
        assert_eq!(t.skipped(), 1);
        let (l0, _) = t.probe(8).unwrap();
        let (l0b, _) = t.probe(8).unwrap();
        assert_eq!(l0, l0b);
        t.run_epoch().unwrap();
        let (cp, log) = t.finish();
        assert_eq!(log.records.len(), 1);
        assert_eq!(bb.checksum().unwrap(), bb0);
        assert_ne!(checksum(cp.var_map(), ClipPair::IMAGE_PREFIX).unwrap(), img0);
        assert_ne!(checksum(cp.var_map(), ClipPair::PROJECTION_PREFIX).unwrap(), proj0);
    }

    #[test]
    fn distilbert_backbone_stays_frozen() {
        let dir = tempfile::tempdir().unwrap();
        crate::model::text::tests::tiny_distilbert(dir.path());
        let bb = crate::model::DistilBertBackbone::load(dir.path()).unwrap();
        let s = samples();
        let cp = ClipPair::new(ClipConfig::new(4, bb.hidden_dim(), bb.name()), 0).unwrap();
        let proj0 = checksum(cp.var_map(), ClipPair::PROJECTION_PREFIX).unwrap();
        let bb0 = bb.checksum().unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::clip_default()
        };
        let (cp, _) = train_clip(cp, &s, &bb, &cfg).unwrap();
        assert_eq!(bb.checksum().unwrap(), bb0);
        assert_ne!(checksum(cp.var_map(), ClipPair::PROJECTION_PREFIX).unwrap(), proj0);
    }

    #[test]
    fn report_embeddings_zero_for_missing() {
        let mut s = samples();
        s[1].report = None;
        let bb = HashedTokenBackbone::new(512, 16, 0).unwrap();
        let cp = ClipPair::new(ClipConfig::new(4, 16, bb.name()), 0).unwrap();
        let z = report_embeddings(&cp, &bb, &s[..3]).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(z.len(), 3);
        assert!(z[1].iter().all(|&v| v == 0.0));
        let n: f32 = z[0].iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

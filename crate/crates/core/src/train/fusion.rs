//! Training loop for the fusion classifier.

use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{device, FusionClassifier, DTYPE};
use crate::seed;
use crate::train::data::{EpochAugment, FusionInputs};
use crate::train::loss::weighted_bce_tensor;
use crate::train::{adam, check_finite, ClassWeights, TrainConfig, TrainLog};

/// Epoch-at-a-time trainer, so callers can evaluate between epochs.
pub struct FusionTrainer<'a> {
    model: FusionClassifier,
    inputs: FusionInputs<'a>,
    cfg: TrainConfig,
    opt: AdamW,
    pos_weight: Tensor,
    log: TrainLog,
    start: Instant,
    epoch: usize,
}

impl<'a> FusionTrainer<'a> {
    pub fn new(
        model: FusionClassifier,
        inputs: FusionInputs<'a>,
        weights: &ClassWeights,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if inputs.is_empty() {
            return Err(Error::Dataset("empty training split".into()));
        }
        if inputs.modalities() != model.config().modalities {
            return Err(Error::Config(format!(
                "inputs built for {} but model expects {}",
                inputs.modalities().name(),
                model.config().modalities.name()
            )));
        }
        if weights.pos_weight.len() != model.config().num_classes {
            return Err(Error::Shape(format!(
                "{} class weights for {} classes",
                weights.pos_weight.len(),
                model.config().num_classes
            )));
        }
        let opt = adam(model.var_map(), cfg.learning_rate)?;
        let pos_weight = Tensor::new(weights.pos_weight.as_slice(), &device())?.to_dtype(DTYPE)?;
        Ok(Self {
            model,
            inputs,
            log: TrainLog::new(cfg.augment),
            cfg,
            opt,
            pos_weight,
            start: Instant::now(),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &FusionClassifier {
        &self.model
    }

    pub fn inputs(&self) -> &FusionInputs<'a> {
        &self.inputs
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled training set; returns the mean loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..self.inputs.len()).collect();
        order.shuffle(&mut seed::rng(self.cfg.seed, "fusion-shuffle", epoch as u64));
        self.model.reseed_dropout(self.cfg.seed, epoch as u64);
        let augment = self.cfg.augment.then_some(EpochAugment {
            ranges: &self.cfg.augmentation,
            seed: self.cfg.seed,
            epoch: epoch as u64,
        });
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let (x, z) = self.inputs.batch(idx, augment)?;
            let y = self.inputs.targets(idx)?;
            let logits = self.model.forward(&x, z.as_ref(), true)?;
            let loss = weighted_bce_tensor(&logits, &y, &self.pos_weight)?;
            let value = f64::from(loss.to_scalar::<f32>()?);
            check_finite(value, epoch)?;
            self.opt.backward_step(&loss)?;
            total += value * idx.len() as f64;
        }
        let mean = total / self.inputs.len() as f64;
        self.log.push(epoch, "train", mean, self.start.elapsed().as_secs_f64());
        log::debug!(
            "fusion {} epoch {epoch}: loss {mean:.5}",
            self.model.config().modalities.name()
        );
        self.epoch += 1;
        Ok(mean)
    }

    pub fn finish(self) -> (FusionClassifier, TrainLog) {
        (self.model, self.log)
    }
}

/// Runs `cfg.epochs` epochs of Adam on weighted BCE.
pub fn train_fusion(
    model: FusionClassifier,
    inputs: FusionInputs,
    weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<(FusionClassifier, TrainLog)> {
    let mut t = FusionTrainer::new(model, inputs, weights, cfg.clone())?;
    for _ in 0..cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

//! L1 reconstruction training for the autoencoder baseline. Never augments.

use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer};
use ndarray::Array3;
use rand::seq::SliceRandom;

use crate::domain::Sample;
use crate::error::{Error, Result};
use crate::model::{stack_inputs, Autoencoder};
use crate::seed;
use crate::train::{adam, check_finite, TrainConfig, TrainLog};

pub struct AutoencoderTrainer<'a> {
    model: Autoencoder,
    samples: &'a [Sample],
    cfg: TrainConfig,
    opt: AdamW,
    log: TrainLog,
    start: Instant,
    epoch: usize,
}

fn images(samples: &[Sample], idx: &[usize]) -> Result<Tensor> {
    let arrays: Vec<Array3<f32>> = idx
        .iter()
        .map(|&i| samples[i].image.clone().insert_axis(ndarray::Axis(0)))
        .collect();
    stack_inputs(&arrays)
}

/// Mean absolute reconstruction error over a batch.
pub fn l1_loss(model: &Autoencoder, x: &Tensor) -> Result<Tensor> {
    Ok((model.reconstruct(x)? - x)?.abs()?.mean_all()?)
}

impl<'a> AutoencoderTrainer<'a> {
    pub fn new(model: Autoencoder, samples: &'a [Sample], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Dataset("empty training split".into()));
        }
        log::info!("autoencoder: augmentation: off");
        let opt = adam(model.var_map(), cfg.learning_rate)?;
        Ok(Self {
            model,
            samples,
            cfg,
            opt,
            log: TrainLog::new(false),
            start: Instant::now(),
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Autoencoder {
        &self.model
    }

    /// Mean L1 error over all samples without updating.
    pub fn evaluate(&self) -> Result<f64> {
        let order: Vec<usize> = (0..self.samples.len()).collect();
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let loss = l1_loss(&self.model, &images(self.samples, idx)?)?;
            total += f64::from(loss.to_scalar::<f32>()?) * idx.len() as f64;
        }
        Ok(total / self.samples.len() as f64)
    }

    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut seed::rng(self.cfg.seed, "ae-shuffle", epoch as u64));
        let mut total = 0.0;
        for idx in order.chunks(self.cfg.batch_size) {
            let loss = l1_loss(&self.model, &images(self.samples, idx)?)?;
            let value = f64::from(loss.to_scalar::<f32>()?);
            check_finite(value, epoch)?;
            self.opt.backward_step(&loss)?;
            total += value * idx.len() as f64;
        }
        let mean = total / self.samples.len() as f64;
        self.log.push(epoch, "train", mean, self.start.elapsed().as_secs_f64());
        self.epoch += 1;
        Ok(mean)
    }

    pub fn finish(self) -> (Autoencoder, TrainLog) {
        (self.model, self.log)
    }
}

/// Trains with the configured optimizer settings; any augmentation settings
/// are ignored.
pub fn train_autoencoder(model: Autoencoder, samples: &[Sample], cfg: &TrainConfig) -> Result<(Autoencoder, TrainLog)> {
    let mut t = AutoencoderTrainer::new(model, samples, cfg.clone())?;
    for _ in 0..cfg.epochs {
        t.run_epoch()?;
    }
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{LabelSpace, Resolution};
    use crate::model::AutoencoderConfig;
    use ndarray::Array2;

    fn constant_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                id: format!("c{i}"),
                image: Array2::from_elem((32, 16), 0.5),
                segmentation: None,
                boxes: vec![],
                report: None,
                labels: LabelSpace::grazped_default().negative(),
            })
            .collect()
    }

    fn small() -> Autoencoder {
        Autoencoder::new(
            AutoencoderConfig {
                resolution: Resolution::new(32, 16),
                base_width: 4,
                latent_dim: 16,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn constant_images_are_learned() {
        let samples = constant_samples(4);
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 4,
            learning_rate: 3e-3,
            ..TrainConfig::default()
        };
        let mut t = AutoencoderTrainer::new(small(), &samples, cfg).unwrap();
        let initial = t.evaluate().unwrap();
        for _ in 0..150 {
            t.run_epoch().unwrap();
        }
        let fin = t.evaluate().unwrap();
        assert!(fin < initial && fin < 0.02, "{initial} -> {fin}");
        let (_, log) = t.finish();
        assert!(!log.augmentation);
    }
}

//! Linear probes: a single linear layer trained on frozen embeddings.

use std::path::Path;

use candle_core::{Module, Tensor};
use candle_nn::ops::sigmoid;
use candle_nn::{Optimizer, VarBuilder, VarMap};
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::domain::{LabelSpace, LabelVector, Sample};
use crate::error::{Error, Result};
use crate::evalx::metrics::{metrics_from_probabilities, MetricsReport, DEFAULT_THRESHOLD};
use crate::model::resnet::load_pretrained_file;
use crate::model::{
    checksum, device, seeded_init, stack_inputs, Autoencoder, ClipPair, EncoderConfig, ResNet18, TextBackbone, DTYPE,
};
use crate::seed;
use crate::train::clip::report_embeddings;
use crate::train::loss::weighted_bce_tensor;
use crate::train::{adam, check_finite, ClassWeights, TrainConfig};

const EMBED_BATCH: usize = 32;

/// A fixed embedding function over samples.
pub trait FrozenEncoder {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    /// `(N, dim)` embeddings, detached.
    fn embed(&self, samples: &[Sample]) -> Result<Tensor>;
    fn checksum(&self) -> Result<String>;
}

fn image_batches(samples: &[Sample], f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let parts = samples
        .chunks(EMBED_BATCH)
        .map(|chunk| {
            let arrays: Vec<Array3<f32>> = chunk
                .iter()
                .map(|s| s.image.clone().insert_axis(ndarray::Axis(0)))
                .collect();
            f(&stack_inputs(&arrays)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?.detach())
}

pub struct ClipImageEncoder<'a>(pub &'a ClipPair);

impl FrozenEncoder for ClipImageEncoder<'_> {
    fn name(&self) -> &str {
        "CLIP img"
    }

    fn dim(&self) -> usize {
        self.0.config().embed_dim()
    }

    fn embed(&self, samples: &[Sample]) -> Result<Tensor> {
        image_batches(samples, |x| self.0.image_features(x, false))
    }

    fn checksum(&self) -> Result<String> {
        checksum(self.0.var_map(), ClipPair::IMAGE_PREFIX)
    }
}

pub struct ClipTextEncoder<'a> {
    pub clip: &'a ClipPair,
    pub backbone: &'a dyn TextBackbone,
}

impl FrozenEncoder for ClipTextEncoder<'_> {
    fn name(&self) -> &str {
        "CLIP txt"
    }

    fn dim(&self) -> usize {
        self.clip.config().embed_dim()
    }

    fn embed(&self, samples: &[Sample]) -> Result<Tensor> {
        report_embeddings(self.clip, self.backbone, samples)
    }

    fn checksum(&self) -> Result<String> {
        Ok(format!(
            "{}:{}",
            checksum(self.clip.var_map(), ClipPair::PROJECTION_PREFIX)?,
            self.backbone.checksum()?
        ))
    }
}

/// Global-pooled ResNet18 features on the radiograph, from ImageNet weights
/// when available and a seeded random initialization otherwise.
pub struct ResNetFeatures {
    vm: VarMap,
    encoder: ResNet18,
    pretrained: bool,
}

impl ResNetFeatures {
    pub fn new(base_width: usize, seed: u64, weights: Option<&Path>) -> Result<Self> {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DTYPE, &device());
        let encoder = ResNet18::new(
            EncoderConfig {
                in_channels: 1,
                base_width,
            },
            vb,
        )?;
        seeded_init(&vm, seed)?;
        let pretrained = match weights {
            Some(p) => {
                let report = load_pretrained_file(&vm, "", p)?;
                if !report.skipped.is_empty() {
                    log::warn!("pretrained import skipped {} tensors", report.skipped.len());
                }
                true
            }
            None => false,
        };
        Ok(Self {
            vm,
            encoder,
            pretrained,
        })
    }

    pub fn pretrained(&self) -> bool {
        self.pretrained
    }
}

impl FrozenEncoder for ResNetFeatures {
    fn name(&self) -> &str {
        if self.pretrained {
            "ResNet18 ImageNet"
        } else {
            "ResNet18 random init"
        }
    }

    fn dim(&self) -> usize {
        self.encoder.config().latent_dim()
    }

    fn embed(&self, samples: &[Sample]) -> Result<Tensor> {
        image_batches(samples, |x| self.encoder.forward_t(x, false))
    }

    fn checksum(&self) -> Result<String> {
        checksum(&self.vm, "")
    }
}

pub struct AutoencoderLatent<'a>(pub &'a Autoencoder);

impl FrozenEncoder for AutoencoderLatent<'_> {
    fn name(&self) -> &str {
        "Autoencoder"
    }

    fn dim(&self) -> usize {
        self.0.config().latent_dim
    }

    fn embed(&self, samples: &[Sample]) -> Result<Tensor> {
        image_batches(samples, |x| self.0.encode(x))
    }

    fn checksum(&self) -> Result<String> {
        checksum(self.0.var_map(), "")
    }
}

/// Label-independent Gaussian features keyed by sample id; a floor for the
/// other encoders.
pub struct NoiseFeatures {
    pub dim: usize,
    pub seed: u64,
}

impl FrozenEncoder for NoiseFeatures {
    fn name(&self) -> &str {
        "Noise"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, samples: &[Sample]) -> Result<Tensor> {
        let mut v = Vec::with_capacity(samples.len() * self.dim);
        for s in samples {
            let mut rng = seed::rng(self.seed, &s.id, 0);
            v.extend((0..self.dim).map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            }));
        }
        Ok(Tensor::from_vec(v, (samples.len(), self.dim), &device())?)
    }

    fn checksum(&self) -> Result<String> {
        Ok(format!("noise-{}-{}", self.dim, self.seed))
    }
}

fn labels_tensor(labels: &[LabelVector]) -> Result<Tensor> {
    let k = labels.first().map(|l| l.len()).unwrap_or(0);
    let v: Vec<f32> = labels.iter().flat_map(|l| l.as_f32()).collect();
    Ok(Tensor::from_vec(v, (labels.len(), k), &device())?)
}

/// Fits one linear layer with weighted BCE on standardized training
/// features and reports test metrics.
pub fn probe_features(
    train_x: &Tensor,
    train_y: &[LabelVector],
    test_x: &Tensor,
    test_y: &[LabelVector],
    ls: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let (n, d) = train_x.dims2()?;
    if n != train_y.len() || test_x.dim(0)? != test_y.len() || test_x.dim(1)? != d {
        return Err(Error::Shape("probe features and labels disagree".into()));
    }
    let weights = ClassWeights::from_labels(train_y, ls)?;
    let mean = train_x.mean_keepdim(0)?;
    let std = (train_x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)? + 1e-6)?.sqrt()?;
    let norm = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?) };
    let xs = norm(train_x)?;
    let xt = norm(test_x)?;
    let ys = labels_tensor(train_y)?;

    let vm = VarMap::new();
    let vb = VarBuilder::from_varmap(&vm, DTYPE, &device());
    let head = candle_nn::linear(d, ls.len(), vb.pp("probe"))?;
    seeded_init(&vm, cfg.seed)?;
    let mut opt = adam(&vm, cfg.learning_rate)?;
    let pos_weight = Tensor::new(weights.pos_weight.as_slice(), &device())?.to_dtype(DTYPE)?;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(cfg.seed, "probe-shuffle", epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let ids = Tensor::new(idx.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &device())?;
            let logits = head.forward(&xs.index_select(&ids, 0)?)?;
            let loss = weighted_bce_tensor(&logits, &ys.index_select(&ids, 0)?, &pos_weight)?;
            check_finite(f64::from(loss.to_scalar::<f32>()?), epoch)?;
            opt.backward_step(&loss)?;
        }
    }
    let probs: Vec<Vec<f64>> = sigmoid(&head.forward(&xt)?)?
        .to_vec2::<f32>()?
        .into_iter()
        .map(|r| r.into_iter().map(f64::from).collect())
        .collect();
    metrics_from_probabilities(&probs, test_y, ls, DEFAULT_THRESHOLD)
}

/// Embeds both splits with a frozen encoder and fits a linear probe. Errors
/// if the encoder's weights changed along the way.
pub fn linear_probe(
    encoder: &dyn FrozenEncoder,
    train: &[Sample],
    test: &[Sample],
    ls: &LabelSpace,
    cfg: &TrainConfig,
) -> Result<MetricsReport> {
    let before = encoder.checksum()?;
    let train_x = encoder.embed(train)?;
    let test_x = encoder.embed(test)?;
    let train_y: Vec<LabelVector> = train.iter().map(|s| s.labels.clone()).collect();
    let test_y: Vec<LabelVector> = test.iter().map(|s| s.labels.clone()).collect();
    let report = probe_features(&train_x, &train_y, &test_x, &test_y, ls, cfg)?;
    if encoder.checksum()? != before {
        return Err(Error::Config(format!(
            "encoder {} changed during probing",
            encoder.name()
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Each class has its own direction; features are that direction plus
    /// small noise.
    fn separable(n: usize, ls: &LabelSpace, seed: u64) -> (Tensor, Vec<LabelVector>) {
        let k = ls.len();
        let d = 2 * k;
        let mut rng = seed::rng(seed, "sep", 0);
        let mut v = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % k;
            let mut bits = vec![0u8; k];
            bits[c] = 1;
            labels.push(LabelVector::from_bits(bits).unwrap());
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                v.push((if j == c { 3.0 } else { 0.0 } + 0.3 * noise) as f32);
            }
        }
        (Tensor::from_vec(v, (n, d), &device()).unwrap(), labels)
    }

    #[test]
    fn separable_embeddings_probe_near_perfect() {
        let ls = LabelSpace::grazped_default();
        let (xs, ys) = separable(160, &ls, 0);
        let (xt, yt) = separable(80, &ls, 1);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let r = probe_features(&xs, &ys, &xt, &yt, &ls, &cfg).unwrap();
        assert!(r.macro_avg.auroc.unwrap() > 0.99, "{:?}", r.macro_avg);
    }

    #[test]
    fn noise_features_are_deterministic() {
        let f = NoiseFeatures { dim: 4, seed: 1 };
        let s = Sample {
            id: "a".into(),
            image: ndarray::Array2::zeros((64, 32)),
            segmentation: None,
            boxes: vec![],
            report: None,
            labels: LabelSpace::grazped_default().negative(),
        };
        let a = f.embed(std::slice::from_ref(&s)).unwrap().to_vec2::<f32>().unwrap();
        let b = f.embed(std::slice::from_ref(&s)).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resnet_features_report_their_origin() {
        let r = ResNetFeatures::new(4, 0, None).unwrap();
        assert_eq!(r.name(), "ResNet18 random init");
        assert_eq!(r.dim(), 32);
        assert!(ResNetFeatures::new(4, 0, Some(Path::new("/nonexistent.safetensors"))).is_err());
    }
}

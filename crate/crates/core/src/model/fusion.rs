//! Fusion classifier: channel-concatenated spatial modalities through a
//! ResNet18, optionally joined by a fixed report embedding, then one linear
//! layer to K logits.

use std::sync::Mutex;

use candle_core::{Module, Tensor};
use candle_nn::{Linear, VarBuilder, VarMap};
use ndarray::{s, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ModalityConfig, Sample, NUM_BONES};
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::model::resnet::{EncoderConfig, ResNet18};
use crate::model::{device, dropout_mask, seeded_init, DTYPE};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub modalities: ModalityConfig,
    pub base_width: usize,
    /// Width of the report embedding; only used with the report modality.
    pub text_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl FusionConfig {
    pub fn new(modalities: ModalityConfig, num_classes: usize) -> Self {
        Self {
            modalities,
            base_width: 64,
            text_dim: 512,
            num_classes,
            dropout: 0.6,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.modalities.spatial_channels(),
            base_width: self.base_width,
        }
    }

    pub fn fused_dim(&self) -> usize {
        self.encoder().latent_dim() + if self.modalities.use_report { self.text_dim } else { 0 }
    }
}

pub struct FusionClassifier {
    cfg: FusionConfig,
    vm: VarMap,
    encoder: ResNet18,
    head: Linear,
    dropout_rng: Mutex<ChaCha8Rng>,
}

impl FusionClassifier {
    pub const ENCODER_PREFIX: &'static str = "spatial";
    pub const HEAD_PREFIX: &'static str = "head";

    pub fn new(cfg: FusionConfig, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", cfg.dropout)));
        }
        if cfg.num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DTYPE, &device());
        let encoder = ResNet18::new(cfg.encoder(), vb.pp(Self::ENCODER_PREFIX))?;
        let head = candle_nn::linear(cfg.fused_dim(), cfg.num_classes, vb.pp(Self::HEAD_PREFIX))?;
        seeded_init(&vm, seed)?;
        Ok(Self {
            dropout_rng: Mutex::new(seed::rng(seed, "fusion-dropout", 0)),
            cfg,
            vm,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn var_map(&self) -> &VarMap {
        &self.vm
    }

    /// Reseeds the dropout stream, e.g. at the start of each epoch.
    pub fn reseed_dropout(&self, seed: u64, epoch: u64) {
        *self.dropout_rng.lock().expect("dropout rng lock") = seed::rng(seed, "fusion-dropout", epoch);
    }

    /// The fused latent `[z_spatial, z_text]` before dropout.
    pub fn fused(&self, x: &Tensor, z_text: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let z = self.encoder.forward_t(x, train)?;
        match (self.cfg.modalities.use_report, z_text) {
            (false, None) => Ok(z),
            (true, Some(t)) => {
                let (bt, dt) = t.dims2()?;
                if bt != z.dim(0)? || dt != self.cfg.text_dim {
                    return Err(Error::Shape(format!(
                        "report embedding {bt}x{dt}, expected {}x{}",
                        z.dim(0)?,
                        self.cfg.text_dim
                    )));
                }
                Ok(Tensor::cat(&[&z, t], 1)?)
            }
            (true, None) => Err(Error::Shape(
                "classifier uses reports but no report embedding given".into(),
            )),
            (false, Some(_)) => Err(Error::Shape(
                "report embedding given to a classifier without reports".into(),
            )),
        }
    }

    /// Raw logits `(B, K)`. Dropout acts on the fused latent in train mode.
    pub fn forward(&self, x: &Tensor, z_text: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let mut fused = self.fused(x, z_text, train)?;
        if train && self.cfg.dropout > 0.0 {
            let (b, d) = fused.dims2()?;
            let mask = {
                let mut rng = self.dropout_rng.lock().expect("dropout rng lock");
                dropout_mask(&mut *rng, b, d, self.cfg.dropout)?
            };
            fused = (fused * mask)?;
        }
        Ok(self.head.forward(&fused)?)
    }
}

/// Stacks the active spatial modalities of one sample as `(C, H, W)` in the
/// order image, 17 bone channels, heatmap.
pub fn assemble_spatial_input(s: &Sample, cfg: ModalityConfig, hm: Option<&Heatmap>) -> Result<Array3<f32>> {
    let (h, w) = s.image.dim();
    let mut out = Array3::<f32>::zeros((cfg.spatial_channels(), h, w));
    out.slice_mut(s![0, .., ..]).assign(&s.image);
    let mut next = 1;
    if cfg.use_segmentation {
        let seg = s
            .segmentation
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("{}: segmentation required but absent", s.id)))?;
        if seg.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "{}: segmentation {:?} vs image {:?}",
                s.id,
                seg.dim(),
                (h, w)
            )));
        }
        for bone in 0..NUM_BONES {
            let bit = 1u32 << bone;
            out.slice_mut(s![next + bone, .., ..])
                .zip_mut_with(seg, |o, &m| *o = if m & bit != 0 { 1.0 } else { 0.0 });
        }
        next += NUM_BONES;
    }
    match (cfg.use_fracture_location, hm) {
        (true, Some(hm)) => {
            if hm.values().dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "{}: heatmap {:?} vs image {:?}",
                    s.id,
                    hm.values().dim(),
                    (h, w)
                )));
            }
            out.slice_mut(s![next, .., ..]).assign(&hm.to_f32());
        }
        (false, None) => {}
        (true, None) => {
            return Err(Error::Shape(format!(
                "{}: fracture location enabled but no heatmap",
                s.id
            )))
        }
        (false, Some(_)) => {
            return Err(Error::Shape(format!(
                "{}: heatmap given with fracture location off",
                s.id
            )))
        }
    }
    Ok(out)
}

/// Batches `(C, H, W)` arrays into a `(B, C, H, W)` tensor.
pub fn stack_inputs(inputs: &[Array3<f32>]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (c, h, w) = first.dim();
    let mut data = Vec::with_capacity(inputs.len() * c * h * w);
    for a in inputs {
        if a.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "batch mixes shapes {:?} and {:?}",
                (c, h, w),
                a.dim()
            )));
        }
        data.extend(a.iter().copied());
    }
    Ok(Tensor::from_vec(data, (inputs.len(), c, h, w), &device())?)
}

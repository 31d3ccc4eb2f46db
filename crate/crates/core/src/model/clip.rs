//! Contrastive image-report pair: a radiograph-only ResNet18 and a trainable
//! projection over a frozen text backbone.

use candle_core::{Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::resnet::{EncoderConfig, ResNet18};
use crate::model::text::{TextBackbone, TextProjection};
use crate::model::{device, l2_normalize, seeded_init, DTYPE};

/// Initial inverse temperature.
pub const INIT_LOGIT_SCALE: f64 = 1.0 / 0.07;
/// Upper bound on the inverse temperature, keeps logits finite.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub encoder: EncoderConfig,
    /// Output width of the text backbone.
    pub text_dim: usize,
    /// Identifier of the frozen text backbone the projection was trained on.
    pub backbone: String,
}

impl ClipConfig {
    pub fn new(base_width: usize, text_dim: usize, backbone: impl Into<String>) -> Self {
        Self {
            encoder: EncoderConfig {
                in_channels: 1,
                base_width,
            },
            text_dim,
            backbone: backbone.into(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.latent_dim()
    }
}

pub struct ClipPair {
    cfg: ClipConfig,
    vm: VarMap,
    image: ResNet18,
    projection: TextProjection,
    log_scale: Var,
}

impl ClipPair {
    pub const IMAGE_PREFIX: &'static str = "image";
    pub const PROJECTION_PREFIX: &'static str = "projection";

    pub fn new(cfg: ClipConfig, seed: u64) -> Result<Self> {
        if cfg.encoder.in_channels != 1 {
            return Err(Error::Config(
                "the image side of the CLIP pair sees the radiograph only".into(),
            ));
        }
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DTYPE, &device());
        let image = ResNet18::new(cfg.encoder, vb.pp(Self::IMAGE_PREFIX))?;
        let projection = TextProjection::new(cfg.text_dim, cfg.embed_dim(), vb.pp(Self::PROJECTION_PREFIX))?;
        vb.get_with_hints((), "log_scale", candle_nn::Init::Const(INIT_LOGIT_SCALE.ln()))?;
        seeded_init(&vm, seed)?;
        let log_scale = vm.data().lock().expect("var map lock")["log_scale"].clone();
        Ok(Self {
            cfg,
            vm,
            image,
            projection,
            log_scale,
        })
    }

    pub fn config(&self) -> &ClipConfig {
        &self.cfg
    }

    pub fn var_map(&self) -> &VarMap {
        &self.vm
    }

    /// Inverse temperature `exp(log_scale)`, clamped to `MAX_LOGIT_SCALE`.
    pub fn logit_scale(&self) -> Result<Tensor> {
        Ok(self
            .log_scale
            .as_tensor()
            .clamp(f32::MIN, MAX_LOGIT_SCALE.ln() as f32)?
            .exp()?)
    }

    pub fn image_features(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        self.image.forward_t(images, train)
    }

    pub fn embed_images(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        l2_normalize(&self.image.forward_t(images, train)?)
    }

    /// Projects precomputed backbone features and normalizes them.
    pub fn embed_text_features(&self, features: &Tensor) -> Result<Tensor> {
        let (_, d) = features.dims2()?;
        if d != self.cfg.text_dim {
            return Err(Error::Shape(format!(
                "text features of width {d}, projection expects {}",
                self.cfg.text_dim
            )));
        }
        l2_normalize(&self.projection.forward(features)?)
    }

    /// Embeddings from a cached backbone batch.
    pub fn embed_pair(&self, images: &Tensor, text_features: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let bi = images.dim(0)?;
        let bt = text_features.dim(0)?;
        if bi == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if bi != bt {
            return Err(Error::Shape(format!("{bi} images but {bt} reports")));
        }
        Ok((
            self.embed_images(images, train)?,
            self.embed_text_features(text_features)?,
        ))
    }

    /// L2-normalized image and report embeddings in evaluation mode.
    pub fn clip_embed(
        &self,
        images: &Tensor,
        reports: &[String],
        backbone: &dyn TextBackbone,
    ) -> Result<(Tensor, Tensor)> {
        if images.dim(0)? != reports.len() {
            return Err(Error::Shape(format!(
                "{} images but {} reports",
                images.dim(0)?,
                reports.len()
            )));
        }
        if reports.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        self.embed_pair(images, &backbone.encode(reports)?, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::text::HashedTokenBackbone;

    fn pair() -> (ClipPair, HashedTokenBackbone) {
        let bb = HashedTokenBackbone::new(256, 24, 0).unwrap();
        let cp = ClipPair::new(ClipConfig::new(4, bb.hidden_dim(), bb.name()), 1).unwrap();
        (cp, bb)
    }

    fn images(b: usize, seed: f64) -> Tensor {
        let n = b * 64 * 32;
        let v: Vec<f32> = (0..n).map(|i| ((i as f64 * 0.37 + seed).sin()) as f32).collect();
        Tensor::from_vec(v, (b, 1, 64, 32), &device()).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (cp, bb) = pair();
        let (zi, zt) = cp.clip_embed(&images(1, 0.0), &["distal radius".into()], &bb).unwrap();
        assert_eq!(zi.dims(), &[1, 32]);
        assert_eq!(zt.dims(), &[1, 32]);
        for z in [zi, zt] {
            let n = z.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn identical_texts_embed_identically_and_batches_are_independent() {
        let (cp, bb) = pair();
        let texts: Vec<String> = vec!["ulna".into(), "ulna".into(), "radius".into()];
        let base = images(3, 0.0);
        let (zi, zt) = cp.clip_embed(&base, &texts, &bb).unwrap();
        let t = zt.to_vec2::<f32>().unwrap();
        assert_eq!(t[0], t[1]);
        let changed = Tensor::cat(&[base.narrow(0, 0, 2).unwrap(), images(1, 5.0)], 0).unwrap();
        let (zi2, _) = cp.clip_embed(&changed, &texts, &bb).unwrap();
        let a = zi.to_vec2::<f32>().unwrap();
        let b = zi2.to_vec2::<f32>().unwrap();
        assert_eq!(a[0], b[0]);
        assert_eq!(a[1], b[1]);
        assert_ne!(a[2], b[2]);
    }

    #[test]
    fn batch_errors() {
        let (cp, bb) = pair();
        assert!(matches!(
            cp.clip_embed(&images(2, 0.0), &["a".into()], &bb),
            Err(Error::Shape(_))
        ));
        let empty = Tensor::zeros((0, 1, 64, 32), DTYPE, &device()).unwrap();
        assert!(matches!(cp.clip_embed(&empty, &[], &bb), Err(Error::Shape(_))));
    }

    #[test]
    fn logit_scale_starts_at_inverse_temperature() {
        let (cp, _) = pair();
        let s = cp.logit_scale().unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!((s - INIT_LOGIT_SCALE).abs() < 1e-3);
        cp.log_scale.set(&Tensor::new(10f32, &device()).unwrap()).unwrap();
        let s = cp.logit_scale().unwrap().to_scalar::<f32>().unwrap() as f64;
        assert!((s - MAX_LOGIT_SCALE).abs() < 1e-3);
    }
}

//! ResNet18 encoder with a configurable number of input channels.
//!
//! Parameter names follow the torchvision layout (`conv1`, `bn1`,
//! `layer1.0.conv1`, ..., `layer4.1.bn2`) so ImageNet weights exported to
//! safetensors can be copied in directly.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Module, Tensor, D};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::device;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Width of the first stage; 64 is the standard ResNet18.
    pub base_width: usize,
}

impl EncoderConfig {
    pub fn resnet18(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_width: 64,
        }
    }

    pub fn latent_dim(&self) -> usize {
        8 * self.base_width
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d_no_bias(cin, cout, k, cfg, vb)?)
}

fn bn(c: usize, vb: VarBuilder) -> Result<BatchNorm> {
    Ok(candle_nn::batch_norm(c, 1e-5, vb)?)
}

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let downsample = if stride != 1 || cin != cout {
            Some((
                conv(cin, cout, 1, stride, 0, vb.pp("downsample.0"))?,
                bn(cout, vb.pp("downsample.1"))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(cin, cout, 3, stride, 1, vb.pp("conv1"))?,
            bn1: bn(cout, vb.pp("bn1"))?,
            conv2: conv(cout, cout, 3, 1, 1, vb.pp("conv2"))?,
            bn2: bn(cout, vb.pp("bn2"))?,
            downsample,
        })
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv1.forward(x)?.apply_t(&self.bn1, train)?.relu()?;
        let y = self.conv2.forward(&y)?.apply_t(&self.bn2, train)?;
        let shortcut = match &self.downsample {
            Some((c, b)) => c.forward(x)?.apply_t(b, train)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

/// 3x3 max pool, stride 2, padding 1, written as the maximum over nine
/// strided shifts so it has a gradient.
fn stem_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut out: Option<Tensor> = None;
    for dr in 0..3 {
        for dc in 0..3 {
            let s = padded
                .narrow(2, dr, h)?
                .narrow(3, dc, w)?
                .reshape((b, c, h / 2, 2, w / 2, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((b, c, h / 2, w / 2))?;
            out = Some(match out {
                None => s,
                Some(o) => o.maximum(&s)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

pub struct ResNet18 {
    cfg: EncoderConfig,
    conv1: Conv2d,
    bn1: BatchNorm,
    blocks: Vec<BasicBlock>,
    prefix: String,
}

impl ResNet18 {
    /// Spatial sizes must be divisible by 32 (five stride-2 stages).
    pub const SIZE_MULTIPLE: usize = 32;

    pub fn new(cfg: EncoderConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.base_width == 0 {
            return Err(Error::Config(format!("invalid encoder config {cfg:?}")));
        }
        let w = cfg.base_width;
        let widths = [w, 2 * w, 4 * w, 8 * w];
        let mut blocks = Vec::with_capacity(8);
        let mut cin = w;
        for (stage, &cout) in widths.iter().enumerate() {
            for i in 0..2 {
                let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    cin,
                    cout,
                    stride,
                    vb.pp(format!("layer{}.{i}", stage + 1)),
                )?);
                cin = cout;
            }
        }
        Ok(Self {
            cfg,
            conv1: conv(cfg.in_channels, w, 7, 2, 3, vb.pp("conv1"))?,
            bn1: bn(w, vb.pp("bn1"))?,
            blocks,
            prefix: vb.prefix(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Variable-name prefix of this encoder within its var map.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// `(B, C, H, W)` to the pooled latent `(B, 8 * base_width)`.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h % Self::SIZE_MULTIPLE != 0 || w % Self::SIZE_MULTIPLE != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} must be a multiple of {}",
                Self::SIZE_MULTIPLE
            )));
        }
        let mut y = self.conv1.forward(x)?.apply_t(&self.bn1, train)?.relu()?;
        y = stem_pool(&y)?;
        for b in &self.blocks {
            y = b.forward_t(&y, train)?;
        }
        Ok(y.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

/// What happened to each tensor when importing pretrained weights.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct PretrainedImport {
    pub copied: Vec<String>,
    pub adapted: Vec<String>,
    pub skipped: Vec<String>,
}

/// Copies torchvision-layout ResNet18 weights into the encoder stored under
/// `prefix` in `vm`.
///
/// Tensors with matching shapes are copied. For the first convolution with a
/// different channel count, the radiograph channel receives the sum of the
/// RGB filters (a gray image fed to all three channels) and every further
/// channel the mean of the RGB filters.
pub fn import_pretrained(vm: &VarMap, prefix: &str, weights: &HashMap<String, Tensor>) -> Result<PretrainedImport> {
    let data = vm.data().lock().expect("var map lock");
    let mut report = PretrainedImport::default();
    let mut names: Vec<&String> = data.keys().filter(|n| n.starts_with(prefix)).collect();
    names.sort();
    let strip = if prefix.is_empty() { 0 } else { prefix.len() + 1 };
    for name in names {
        let var = &data[name];
        let key = &name[strip..];
        let Some(src) = weights.get(key) else {
            report.skipped.push(key.to_string());
            continue;
        };
        let src = src.to_dtype(var.dtype())?.to_device(var.device())?;
        if src.dims() == var.dims() {
            var.set(&src)?;
            report.copied.push(key.to_string());
        } else if key == "conv1.weight"
            && src.dims().len() == 4
            && src.dim(0)? == var.dim(0)?
            && src.dims()[2..] == var.dims()[2..]
        {
            let channels = var.dim(1)?;
            let gray = src.sum_keepdim(1)?;
            let mean = src.mean_keepdim(1)?;
            let mut parts = vec![gray];
            parts.extend(std::iter::repeat_n(mean, channels - 1));
            var.set(&Tensor::cat(&parts, 1)?)?;
            report.adapted.push(key.to_string());
        } else {
            report.skipped.push(key.to_string());
        }
    }
    Ok(report)
}

pub fn load_pretrained_file(vm: &VarMap, prefix: &str, path: &Path) -> Result<PretrainedImport> {
    if !path.is_file() {
        return Err(Error::Missing {
            what: "pretrained weights",
            path: path.to_path_buf(),
        });
    }
    let weights = candle_core::safetensors::load(path, &device())?;
    import_pretrained(vm, prefix, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{seeded_init, DTYPE};

    fn encoder(cfg: EncoderConfig) -> (VarMap, ResNet18) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DTYPE, &device());
        let enc = ResNet18::new(cfg, vb.pp("enc")).unwrap();
        seeded_init(&vm, 0).unwrap();
        (vm, enc)
    }

    #[test]
    fn latent_shape_and_channel_check() {
        let (_, enc) = encoder(EncoderConfig {
            in_channels: 2,
            base_width: 4,
        });
        let x = Tensor::zeros((3, 2, 64, 32), DTYPE, &device()).unwrap();
        assert_eq!(enc.forward_t(&x, false).unwrap().dims(), &[3, 32]);
        let bad = Tensor::zeros((1, 3, 64, 32), DTYPE, &device()).unwrap();
        assert!(matches!(enc.forward_t(&bad, false), Err(Error::Shape(_))));
        let odd = Tensor::zeros((1, 2, 48, 32), DTYPE, &device()).unwrap();
        assert!(matches!(enc.forward_t(&odd, false), Err(Error::Shape(_))));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn stem_pool_matches_reference() {
        let x = Tensor::arange(0f32, 32.0, &device())
            .unwrap()
            .reshape((1, 1, 4, 8))
            .unwrap();
        let x = (x.sin().unwrap() * 10.0).unwrap();
        let got = stem_pool(&x).unwrap().squeeze(0).unwrap().to_vec3::<f32>().unwrap()[0].clone();
        let v = x.squeeze(0).unwrap().to_vec3::<f32>().unwrap()[0].clone();
        for i in 0..2usize {
            for j in 0..4usize {
                let mut m = f32::NEG_INFINITY;
                for r in (2 * i).saturating_sub(1)..=(2 * i + 1).min(3) {
                    for c in (2 * j).saturating_sub(1)..=(2 * j + 1).min(7) {
                        m = m.max(v[r][c]);
                    }
                }
                assert_eq!(got[i][j], m);
            }
        }
    }

    #[test]
    fn pretrained_import_adapts_first_layer() {
        let (vm, _) = encoder(EncoderConfig {
            in_channels: 3,
            base_width: 4,
        });
        // fake "ImageNet" weights from a differently seeded 3-channel encoder
        let (src_vm, _) = {
            let vm2 = VarMap::new();
            let vb = VarBuilder::from_varmap(&vm2, DTYPE, &device());
            let e = ResNet18::new(
                EncoderConfig {
                    in_channels: 3,
                    base_width: 4,
                },
                vb,
            )
            .unwrap();
            seeded_init(&vm2, 9).unwrap();
            (vm2, e)
        };
        let weights: HashMap<String, Tensor> = src_vm
            .data()
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();

        let report = import_pretrained(&vm, "enc", &weights).unwrap();
        assert!(report.adapted.is_empty());
        assert!(report.skipped.is_empty());

        let vm5 = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm5, DTYPE, &device());
        ResNet18::new(
            EncoderConfig {
                in_channels: 5,
                base_width: 4,
            },
            vb.pp("enc"),
        )
        .unwrap();
        let report = import_pretrained(&vm5, "enc", &weights).unwrap();
        assert_eq!(report.adapted, vec!["conv1.weight".to_string()]);
        let data = vm5.data().lock().unwrap();
        let w = data["enc.conv1.weight"].as_tensor();
        let src = &weights["conv1.weight"];
        let gray = w.narrow(1, 0, 1).unwrap();
        let expect_gray = src.sum_keepdim(1).unwrap();
        let diff = (gray - expect_gray)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-6);
        let extra = w.narrow(1, 4, 1).unwrap();
        let expect_mean = src.mean_keepdim(1).unwrap();
        let diff = (extra - expect_mean)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(diff < 1e-6);
    }
}

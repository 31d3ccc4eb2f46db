//! Convolutional autoencoder baseline for the frozen-latent comparison.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, ConvTranspose2d, ConvTranspose2dConfig, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use crate::domain::Resolution;
use crate::error::{Error, Result};
use crate::model::{device, seeded_init, DTYPE};

const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub resolution: Resolution,
    pub base_width: usize,
    pub latent_dim: usize,
}

impl AutoencoderConfig {
    pub fn new(resolution: Resolution) -> Self {
        Self {
            resolution,
            base_width: 32,
            latent_dim: 512,
        }
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        let f = 1 << STAGES;
        (
            self.base_width << (STAGES - 1),
            self.resolution.rows / f,
            self.resolution.cols / f,
        )
    }
}

pub struct Autoencoder {
    cfg: AutoencoderConfig,
    vm: VarMap,
    down: Vec<Conv2d>,
    to_latent: Linear,
    from_latent: Linear,
    up: Vec<ConvTranspose2d>,
}

impl Autoencoder {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Result<Self> {
        let f = 1 << STAGES;
        let Resolution { rows, cols } = cfg.resolution;
        if rows == 0 || cols == 0 || rows % f != 0 || cols % f != 0 {
            return Err(Error::Config(format!(
                "autoencoder resolution {rows}x{cols} must be a positive multiple of {f}"
            )));
        }
        if cfg.base_width == 0 || cfg.latent_dim == 0 {
            return Err(Error::Config("autoencoder widths must be positive".into()));
        }
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DTYPE, &device());
        let widths: Vec<usize> = (0..STAGES).map(|i| cfg.base_width << i).collect();
        let down_cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let up_cfg = ConvTranspose2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let mut down = Vec::with_capacity(STAGES);
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            down.push(candle_nn::conv2d(cin, w, 4, down_cfg, vb.pp(format!("encoder.{i}")))?);
            cin = w;
        }
        let (c, h, w) = cfg.bottleneck();
        let flat = c * h * w;
        let to_latent = candle_nn::linear(flat, cfg.latent_dim, vb.pp("to_latent"))?;
        let from_latent = candle_nn::linear(cfg.latent_dim, flat, vb.pp("from_latent"))?;
        let mut up = Vec::with_capacity(STAGES);
        for i in (0..STAGES).rev() {
            let cout = if i == 0 { 1 } else { widths[i - 1] };
            up.push(candle_nn::conv_transpose2d(
                widths[i],
                cout,
                4,
                up_cfg,
                vb.pp(format!("decoder.{}", STAGES - 1 - i)),
            )?);
        }
        seeded_init(&vm, seed)?;
        Ok(Self {
            cfg,
            vm,
            down,
            to_latent,
            from_latent,
            up,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn var_map(&self) -> &VarMap {
        &self.vm
    }

    /// `(B, 1, H, W)` to `(B, latent_dim)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || (h, w) != self.cfg.resolution.shape() {
            return Err(Error::Shape(format!(
                "autoencoder expects 1x{}, got {c}x{h}x{w}",
                self.cfg.resolution
            )));
        }
        let mut y = x.clone();
        for conv in &self.down {
            y = conv.forward(&y)?.relu()?;
        }
        Ok(self.to_latent.forward(&y.flatten_from(1)?)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (c, h, w) = self.cfg.bottleneck();
        let b = z.dim(0)?;
        let mut y = self.from_latent.forward(z)?.relu()?.reshape((b, c, h, w))?;
        let last = self.up.len() - 1;
        for (i, conv) in self.up.iter().enumerate() {
            y = conv.forward(&y)?;
            if i != last {
                y = y.relu()?;
            }
        }
        Ok(y)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Autoencoder {
        let cfg = AutoencoderConfig {
            resolution: Resolution::new(32, 16),
            base_width: 4,
            latent_dim: 24,
        };
        Autoencoder::new(cfg, 0).unwrap()
    }

    #[test]
    fn reconstruction_keeps_shape() {
        let ae = small();
        let x = Tensor::ones((2, 1, 32, 16), DTYPE, &device()).unwrap();
        assert_eq!(ae.encode(&x).unwrap().dims(), &[2, 24]);
        let y = ae.reconstruct(&x).unwrap();
        assert_eq!(y.dims(), &[2, 1, 32, 16]);
        assert!(y
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_sizes() {
        let bad = AutoencoderConfig::new(Resolution::new(30, 16));
        assert!(Autoencoder::new(bad, 0).is_err());
        let ae = small();
        let x = Tensor::ones((1, 1, 16, 16), DTYPE, &device()).unwrap();
        assert!(matches!(ae.encode(&x), Err(Error::Shape(_))));
    }
}

//! Networks: the ResNet18 spatial encoder, text pathways, the fusion
//! classifier, the CLIP pair and the autoencoder baseline.

pub mod autoencoder;
pub mod checkpoint;
pub mod clip;
pub mod fusion;
pub mod resnet;
pub mod text;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::seed;

pub use autoencoder::{Autoencoder, AutoencoderConfig};
pub use clip::{ClipConfig, ClipPair};
pub use fusion::{assemble_spatial_input, stack_inputs, FusionClassifier, FusionConfig};
pub use resnet::{EncoderConfig, ResNet18};
pub use text::{DistilBertBackbone, HashedTokenBackbone, TextBackbone, TextProjection};

pub const DTYPE: DType = DType::F32;

pub fn device() -> Device {
    Device::Cpu
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Variables updated by the optimizer, sorted by name.
pub fn trainable_vars(vm: &VarMap) -> Vec<(String, Var)> {
    let data = vm.data().lock().expect("var map lock");
    let mut vars: Vec<(String, Var)> = data
        .iter()
        .filter(|(n, _)| !is_running_stat(n))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

/// Replaces the random initial values candle draws from its unseeded RNG
/// with values from per-variable seeded streams.
///
/// Conv kernels: He normal (fan-out). Linear weights and any bias with a
/// matrix sibling: uniform in `±1/sqrt(fan_in)`. Norm parameters and
/// scalars keep their constant initializers.
pub fn seeded_init(vm: &VarMap, seed: u64) -> Result<()> {
    let data = vm.data().lock().expect("var map lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let mut rng = seed::rng(seed, name, 0);
        let values: Option<Vec<f32>> = if name.ends_with("weight") && dims.len() == 4 {
            let fan_out = (dims[0] * dims[2] * dims[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
            Some((0..var.elem_count()).map(|_| normal.sample(&mut rng) as f32).collect())
        } else if name.ends_with("weight") && dims.len() == 2 {
            let bound = 1.0 / (dims[1] as f64).sqrt();
            Some(
                (0..var.elem_count())
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect(),
            )
        } else if let Some(stem) = name.strip_suffix("bias") {
            match data.get(&format!("{stem}weight")).map(|w| w.dims().to_vec()) {
                Some(w) if w.len() >= 2 => {
                    let fan_in: usize = w[1..].iter().product();
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Some(
                        (0..var.elem_count())
                            .map(|_| rng.random_range(-bound..bound) as f32)
                            .collect(),
                    )
                }
                _ => None,
            }
        } else {
            None
        };
        if let Some(v) = values {
            var.set(&Tensor::from_vec(v, dims, var.device())?)?;
        }
    }
    Ok(())
}

/// SHA-256 over the names and raw values of every variable whose name starts
/// with `prefix`.
pub fn checksum(vm: &VarMap, prefix: &str) -> Result<String> {
    let data = vm.data().lock().expect("var map lock");
    let mut names: Vec<&String> = data.keys().filter(|n| n.starts_with(prefix)).collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.as_bytes());
        hash_tensor(&mut h, data[n].as_tensor())?;
    }
    Ok(hex(&h.finalize()))
}

pub(crate) fn hash_tensor(h: &mut Sha256, t: &Tensor) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    for v in values {
        h.update(v.to_le_bytes());
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Inverted-dropout mask with entries `0` or `1 / (1 - rate)`.
pub fn dropout_mask(rng: &mut impl Rng, rows: usize, cols: usize, rate: f64) -> Result<Tensor> {
    let keep = 1.0 - rate;
    let scale = (1.0 / keep) as f32;
    let values: Vec<f32> = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(values, (rows, cols), &device())?)
}

/// Row-wise L2 normalization.
pub fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let norm = t.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12f32, f32::MAX)?;
    Ok(t.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::{Init, VarBuilder};

    fn build(seed: u64) -> VarMap {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DTYPE, &device());
        candle_nn::linear(4, 3, vb.pp("fc")).unwrap();
        candle_nn::conv2d(2, 5, 3, Default::default(), vb.pp("conv")).unwrap();
        vb.get_with_hints(3, "norm.weight", Init::Const(1.0)).unwrap();
        seeded_init(&vm, seed).unwrap();
        vm
    }

    #[test]
    fn seeded_init_is_reproducible() {
        assert_eq!(checksum(&build(3), "").unwrap(), checksum(&build(3), "").unwrap());
        assert_ne!(checksum(&build(3), "").unwrap(), checksum(&build(4), "").unwrap());
    }

    #[test]
    fn seeded_init_keeps_norm_constants_and_bounds() {
        let vm = build(1);
        let data = vm.data().lock().unwrap();
        let norm = data["norm.weight"].to_vec1::<f32>().unwrap();
        assert!(norm.iter().all(|&v| v == 1.0));
        let b = data["fc.bias"].to_vec1::<f32>().unwrap();
        assert!(b.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = seed::rng(0, "d", 0);
        let m = dropout_mask(&mut rng, 50, 40, 0.6).unwrap().to_vec2::<f32>().unwrap();
        let flat: Vec<f32> = m.into_iter().flatten().collect();
        assert!(flat.iter().all(|&v| v == 0.0 || (v - 2.5).abs() < 1e-6));
        let kept = flat.iter().filter(|&&v| v > 0.0).count() as f64 / flat.len() as f64;
        assert!((kept - 0.4).abs() < 0.05, "{kept}");
    }

    #[test]
    fn l2_rows_are_unit() {
        let t = Tensor::new(&[[3.0f32, 4.0], [0.0, 2.0]], &device()).unwrap();
        let n = l2_normalize(&t).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(n, vec![vec![0.6, 0.8], vec![0.0, 1.0]]);
    }
}

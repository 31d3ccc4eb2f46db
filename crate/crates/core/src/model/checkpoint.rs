//! Checkpoints: weights as safetensors next to a JSON sidecar holding the
//! model config, the run config with its hash, and the label space.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::VarMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::LabelSpace;
use crate::error::{Error, Result};
use crate::model::autoencoder::{Autoencoder, AutoencoderConfig};
use crate::model::clip::{ClipConfig, ClipPair};
use crate::model::fusion::{FusionClassifier, FusionConfig};
use crate::model::{device, hex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    /// Everything needed to rebuild the network before loading weights.
    pub model: serde_json::Value,
    /// The run configuration that produced the weights.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub label_space: Option<LabelSpace>,
}

/// SHA-256 of the canonical JSON form (object keys sorted).
pub fn config_hash<T: Serialize>(cfg: &T) -> Result<String> {
    let value = serde_json::to_value(cfg)?;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&value)?.as_bytes());
    Ok(hex(&h.finalize()))
}

pub fn weights_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.safetensors"))
}

pub fn meta_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub fn save<M: Serialize, C: Serialize>(
    vm: &VarMap,
    dir: &Path,
    stem: &str,
    kind: &str,
    model: &M,
    config: &C,
    label_space: Option<&LabelSpace>,
) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir)?;
    let tensors: HashMap<String, Tensor> = vm
        .data()
        .lock()
        .expect("var map lock")
        .iter()
        .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
        .collect();
    candle_core::safetensors::save(&tensors, weights_path(dir, stem))?;
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        model: serde_json::to_value(model)?,
        config: serde_json::to_value(config)?,
        config_hash: config_hash(config)?,
        label_space: label_space.cloned(),
    };
    std::fs::write(meta_path(dir, stem), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// The sidecar, or `None` when either checkpoint file is absent.
pub fn read_meta(dir: &Path, stem: &str) -> Result<Option<CheckpointMeta>> {
    let mp = meta_path(dir, stem);
    if !mp.is_file() || !weights_path(dir, stem).is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(mp)?)?))
}

fn require_meta(dir: &Path, stem: &str, kind: &str) -> Result<CheckpointMeta> {
    let meta = read_meta(dir, stem)?.ok_or_else(|| Error::Missing {
        what: "checkpoint",
        path: meta_path(dir, stem),
    })?;
    if meta.kind != kind {
        return Err(Error::Config(format!(
            "checkpoint {stem} holds a {}, expected a {kind}",
            meta.kind
        )));
    }
    Ok(meta)
}

/// Overwrites every variable in `vm` from the weights file. Missing or
/// misshapen tensors are errors.
pub fn load_weights(vm: &VarMap, path: &Path) -> Result<()> {
    let saved = candle_core::safetensors::load(path, &device())?;
    let data = vm.data().lock().expect("var map lock");
    for (name, var) in data.iter() {
        let t = saved
            .get(name)
            .ok_or_else(|| Error::Config(format!("{} lacks tensor {name}", path.display())))?;
        if t.dims() != var.dims() {
            return Err(Error::Shape(format!(
                "{name}: saved {:?}, model {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(t)?;
    }
    Ok(())
}

fn model_config<T: DeserializeOwned>(meta: &CheckpointMeta) -> Result<T> {
    Ok(serde_json::from_value(meta.model.clone())?)
}

pub const FUSION_KIND: &str = "fusion";
pub const CLIP_KIND: &str = "clip";
pub const AUTOENCODER_KIND: &str = "autoencoder";

pub fn load_fusion(dir: &Path, stem: &str) -> Result<(FusionClassifier, CheckpointMeta)> {
    let meta = require_meta(dir, stem, FUSION_KIND)?;
    let fc = FusionClassifier::new(model_config::<FusionConfig>(&meta)?, 0)?;
    load_weights(fc.var_map(), &weights_path(dir, stem))?;
    Ok((fc, meta))
}

pub fn load_clip(dir: &Path, stem: &str) -> Result<(ClipPair, CheckpointMeta)> {
    let meta = require_meta(dir, stem, CLIP_KIND)?;
    let cp = ClipPair::new(model_config::<ClipConfig>(&meta)?, 0)?;
    load_weights(cp.var_map(), &weights_path(dir, stem))?;
    Ok((cp, meta))
}

pub fn load_autoencoder(dir: &Path, stem: &str) -> Result<(Autoencoder, CheckpointMeta)> {
    let meta = require_meta(dir, stem, AUTOENCODER_KIND)?;
    let ae = Autoencoder::new(model_config::<AutoencoderConfig>(&meta)?, 0)?;
    load_weights(ae.var_map(), &weights_path(dir, stem))?;
    Ok((ae, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ModalityConfig;
    use crate::model::{checksum, DTYPE};

    #[test]
    fn hash_ignores_field_order() {
        let a = serde_json::json!({"a": 1, "b": [1, 2]});
        let b: serde_json::Value = serde_json::from_str(r#"{"b":[1,2],"a":1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_ne!(
            config_hash(&a).unwrap(),
            config_hash(&serde_json::json!({"a": 2})).unwrap()
        );
    }

    #[test]
    fn fusion_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = FusionConfig {
            base_width: 4,
            text_dim: 6,
            ..FusionConfig::new(ModalityConfig::new(false, true, true), 8)
        };
        let fc = FusionClassifier::new(cfg.clone(), 7).unwrap();
        let ls = LabelSpace::grazped_default();
        let run = serde_json::json!({"seed": 7});
        save(fc.var_map(), dir.path(), "m", FUSION_KIND, &cfg, &run, Some(&ls)).unwrap();
        let (back, meta) = load_fusion(dir.path(), "m").unwrap();
        assert_eq!(meta.label_space, Some(ls));
        assert_eq!(meta.config_hash, config_hash(&run).unwrap());
        assert_eq!(back.config(), &cfg);
        assert_eq!(
            checksum(fc.var_map(), "").unwrap(),
            checksum(back.var_map(), "").unwrap()
        );

        let x = Tensor::ones((1, 2, 64, 32), DTYPE, &device()).unwrap();
        let t = Tensor::ones((1, 6), DTYPE, &device()).unwrap();
        let a = fc.forward(&x, Some(&t), false).unwrap().to_vec2::<f32>().unwrap();
        let b = back.forward(&x, Some(&t), false).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);

        assert!(matches!(load_clip(dir.path(), "m"), Err(Error::Config(_))));
        assert!(read_meta(dir.path(), "absent").unwrap().is_none());
    }
}

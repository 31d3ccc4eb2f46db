//! Report text pathway: a frozen backbone producing one pooled vector per
//! report, and the trainable projection head used by the CLIP pair.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use candle_transformers::models::distilbert::{Config as DistilBertConfig, DistilBertModel};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use tokenizers::{PaddingParams, PaddingStrategy, Tokenizer, TruncationParams};

use crate::error::{Error, Result};
use crate::model::{device, hash_tensor, hex, DTYPE};
use crate::seed;

pub const MAX_TOKENS: usize = 128;
const ENCODE_CHUNK: usize = 32;

/// A frozen text encoder. Outputs are detached so no gradient can reach it.
pub trait TextBackbone: Send + Sync {
    fn name(&self) -> &str;
    fn hidden_dim(&self) -> usize;
    /// Pooled `(B, hidden_dim)` representation of each text.
    fn encode(&self, texts: &[String]) -> Result<Tensor>;
    /// Digest of the backbone weights, used to check the freeze contract.
    fn checksum(&self) -> Result<String>;
}

/// DistilBERT loaded from a directory holding `config.json`,
/// `model.safetensors` and `tokenizer.json`. Token states are mean pooled
/// over non-padding positions.
pub struct DistilBertBackbone {
    dir: PathBuf,
    model: DistilBertModel,
    tokenizer: Tokenizer,
    weights: HashMap<String, Tensor>,
    hidden: usize,
}

impl DistilBertBackbone {
    pub fn load(dir: &Path) -> Result<Self> {
        let file = |name: &'static str, what: &'static str| {
            let p = dir.join(name);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::Missing { what, path: p })
            }
        };
        let config: DistilBertConfig =
            serde_json::from_str(&std::fs::read_to_string(file("config.json", "text model config")?)?)?;
        let weights = candle_core::safetensors::load(file("model.safetensors", "text model weights")?, &device())?;
        let vb = VarBuilder::from_tensors(weights.clone(), DTYPE, &device());
        let model = DistilBertModel::load(vb, &config)?;
        let mut tokenizer =
            Tokenizer::from_file(file("tokenizer.json", "tokenizer")?).map_err(|e| Error::Tokenizer(e.to_string()))?;
        tokenizer
            .with_truncation(Some(TruncationParams {
                max_length: MAX_TOKENS,
                ..Default::default()
            }))
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        tokenizer.with_padding(Some(PaddingParams {
            strategy: PaddingStrategy::BatchLongest,
            pad_id: config.pad_token_id as u32,
            ..Default::default()
        }));
        Ok(Self {
            dir: dir.to_path_buf(),
            model,
            tokenizer,
            weights,
            hidden: config.dim,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn encode_chunk(&self, texts: &[String]) -> Result<Tensor> {
        let enc = self
            .tokenizer
            .encode_batch(texts.to_vec(), true)
            .map_err(|e| Error::Tokenizer(e.to_string()))?;
        let b = enc.len();
        let len = enc.iter().map(|e| e.get_ids().len()).max().unwrap_or(0);
        if len == 0 {
            return Ok(Tensor::zeros((b, self.hidden), DTYPE, &device())?);
        }
        let mut ids = Vec::with_capacity(b * len);
        let mut valid = Vec::with_capacity(b * len);
        for e in &enc {
            ids.extend_from_slice(e.get_ids());
            valid.extend(e.get_attention_mask().iter().map(|&m| m as f32));
        }
        let ids = Tensor::from_vec(ids, (b, len), &device())?;
        let valid = Tensor::from_vec(valid, (b, len), &device())?;
        // the model masks positions where the mask is 1
        let pad = valid.eq(0f32)?.to_dtype(DType::U8)?.reshape((b, 1, 1, len))?;
        let states = self.model.forward(&ids, &pad)?;
        let summed = states.broadcast_mul(&valid.unsqueeze(2)?)?.sum(1)?;
        let count = valid.sum_keepdim(1)?.clamp(1f32, f32::MAX)?;
        Ok(summed.broadcast_div(&count)?)
    }
}

impl TextBackbone for DistilBertBackbone {
    fn name(&self) -> &str {
        "distilbert"
    }

    fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn encode(&self, texts: &[String]) -> Result<Tensor> {
        if texts.is_empty() {
            return Ok(Tensor::zeros((0, self.hidden), DTYPE, &device())?);
        }
        let parts = texts
            .chunks(ENCODE_CHUNK)
            .map(|c| self.encode_chunk(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?.detach())
    }

    fn checksum(&self) -> Result<String> {
        let mut names: Vec<&String> = self.weights.keys().collect();
        names.sort();
        let mut h = Sha256::new();
        for n in names {
            h.update(n.as_bytes());
            hash_tensor(&mut h, &self.weights[n])?;
        }
        Ok(hex(&h.finalize()))
    }
}

/// Frozen bag-of-words encoder: lower-cased word unigrams and bigrams are
/// hashed into a fixed random embedding table, mean pooled and layer
/// normalized. A light stand-in for a pretrained language model when no
/// weights are available.
pub struct HashedTokenBackbone {
    table: Tensor,
    buckets: usize,
    dim: usize,
}

impl HashedTokenBackbone {
    pub fn new(buckets: usize, dim: usize, seed: u64) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::Config("hashed backbone needs buckets and dim > 0".into()));
        }
        let mut rng = seed::rng(seed, "hashed-text-table", 0);
        let values: Vec<f32> = (0..buckets * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        Ok(Self {
            table: Tensor::from_vec(values, (buckets, dim), &device())?,
            buckets,
            dim,
        })
    }

    pub fn tokens(text: &str) -> Vec<String> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut out = words.clone();
        out.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
        out
    }

    fn row(&self, text: &str) -> Result<Tensor> {
        let ids: Vec<u32> = Self::tokens(text)
            .iter()
            .map(|t| (seed::fnv1a(t.as_bytes()) % self.buckets as u64) as u32)
            .collect();
        if ids.is_empty() {
            return Ok(Tensor::zeros(self.dim, DTYPE, &device())?);
        }
        let idx = Tensor::new(ids.as_slice(), &device())?;
        let pooled = self.table.index_select(&idx, 0)?.mean(0)?;
        let centered = pooled.broadcast_sub(&pooled.mean_keepdim(0)?)?;
        let std = (centered.sqr()?.mean_keepdim(0)? + 1e-5)?.sqrt()?;
        Ok(centered.broadcast_div(&std)?)
    }
}

impl TextBackbone for HashedTokenBackbone {
    fn name(&self) -> &str {
        "hashed"
    }

    fn hidden_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Tensor> {
        if texts.is_empty() {
            return Ok(Tensor::zeros((0, self.dim), DTYPE, &device())?);
        }
        let rows = texts.iter().map(|t| self.row(t)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?.detach())
    }

    fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        hash_tensor(&mut h, &self.table)?;
        Ok(hex(&h.finalize()))
    }
}

/// Two-layer projection from backbone features to the shared embedding.
pub struct TextProjection {
    fc1: Linear,
    fc2: Linear,
}

impl TextProjection {
    pub const HIDDEN: usize = 512;

    pub fn new(input_dim: usize, embed_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: candle_nn::linear(input_dim, Self::HIDDEN, vb.pp("fc1"))?,
            fc2: candle_nn::linear(Self::HIDDEN, embed_dim, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.relu()?)?)
    }
}

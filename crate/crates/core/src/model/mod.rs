//! Bidirectional transformer encoder (BERT recipe) with masked-LM and
//! sequence-classification heads.
//!
//! Architecture: learned token + absolute position embeddings → LayerNorm →
//! dropout → `n_layers` post-LN blocks (fused QKV self-attention with
//! key-padding mask, output projection, residual + LayerNorm, GELU
//! feed-forward, residual + LayerNorm). The MLM head is dense + GELU +
//! LayerNorm + an untied vocabulary projection; the classifier pools the
//! first (`<CLS>`) position through a tanh dense layer.
//!
//! All parameters live in one flat vector described by a [`ParamLayout`];
//! weight matrices are stored `[in, out]` row-major.

mod checkpoint;
mod encoder;
pub mod gradcheck;
mod ops;
mod optim;
pub mod real;

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointError, Manifest, CHECKPOINT_VERSION};
pub use encoder::{argmax, Batch, EvalOutput, Labels, StepOutput, IGNORE};
pub use gradcheck::{gradient_check, gradient_check_with, GradReport};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};
pub use real::Real;

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    Mlm,
    Classifier { n_classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub ff_size: usize,
    /// Applied to embeddings, attention and feed-forward outputs, and the
    /// pooled classifier input.
    pub dropout: f64,
    pub head: Head,
}

impl ModelConfig {
    /// Encoder of roughly fifty million parameters at `max_seq_len` 451.
    pub fn reference(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_seq_len: 451,
            n_layers: 9,
            hidden_size: 670,
            n_heads: 10,
            ff_size: 2680,
            dropout: 0.1,
            head: Head::Mlm,
        }
    }

    /// Two layers of width 64: small enough to train on one CPU core.
    pub fn tiny(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_seq_len,
            n_layers: 2,
            hidden_size: 64,
            n_heads: 4,
            ff_size: 128,
            dropout: 0.1,
            head: Head::Mlm,
        }
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.hidden_size == 0 || self.n_heads == 0 || self.ff_size == 0 {
            return bad("sizes must be positive");
        }
        if !self.hidden_size.is_multiple_of(self.n_heads) {
            return bad("hidden_size must be divisible by n_heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if let Head::Classifier { n_classes } = self.head {
            if n_classes < 2 {
                return bad("classifier needs at least two classes");
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIdx {
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub out_w: Range<usize>,
    pub out_b: Range<usize>,
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub ff_in_w: Range<usize>,
    pub ff_in_b: Range<usize>,
    pub ff_out_w: Range<usize>,
    pub ff_out_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) enum HeadIdx {
    Mlm {
        dense_w: Range<usize>,
        dense_b: Range<usize>,
        ln_g: Range<usize>,
        ln_b: Range<usize>,
        dec_w: Range<usize>,
        dec_b: Range<usize>,
    },
    Classifier {
        pool_w: Range<usize>,
        pool_b: Range<usize>,
        out_w: Range<usize>,
        out_b: Range<usize>,
    },
}

/// Name, shape and offset of every tensor in the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) tok_emb: Range<usize>,
    pub(crate) pos_emb: Range<usize>,
    pub(crate) emb_ln_g: Range<usize>,
    pub(crate) emb_ln_b: Range<usize>,
    pub(crate) layers: Vec<LayerIdx>,
    pub(crate) head: HeadIdx,
}

struct LayoutBuilder {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize]) -> Range<usize> {
        let spec = TensorSpec {
            name,
            shape: shape.to_vec(),
            offset: self.total,
        };
        let r = spec.range();
        self.total = r.end;
        self.tensors.push(spec);
        r
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, h, f) = (cfg.vocab_size, cfg.hidden_size, cfg.ff_size);
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let tok_emb = b.add("embeddings.token".into(), &[v, h]);
        let pos_emb = b.add("embeddings.position".into(), &[cfg.max_seq_len, h]);
        let emb_ln_g = b.add("embeddings.norm.gamma".into(), &[h]);
        let emb_ln_b = b.add("embeddings.norm.beta".into(), &[h]);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let mut add = |n: &str, s: &[usize]| b.add(format!("layer{i}.{n}"), s);
                LayerIdx {
                    qkv_w: add("attention.qkv.weight", &[h, 3 * h]),
                    qkv_b: add("attention.qkv.bias", &[3 * h]),
                    out_w: add("attention.out.weight", &[h, h]),
                    out_b: add("attention.out.bias", &[h]),
                    ln1_g: add("attention.norm.gamma", &[h]),
                    ln1_b: add("attention.norm.beta", &[h]),
                    ff_in_w: add("ff.in.weight", &[h, f]),
                    ff_in_b: add("ff.in.bias", &[f]),
                    ff_out_w: add("ff.out.weight", &[f, h]),
                    ff_out_b: add("ff.out.bias", &[h]),
                    ln2_g: add("ff.norm.gamma", &[h]),
                    ln2_b: add("ff.norm.beta", &[h]),
                }
            })
            .collect();
        let head = match cfg.head {
            Head::Mlm => HeadIdx::Mlm {
                dense_w: b.add("mlm.dense.weight".into(), &[h, h]),
                dense_b: b.add("mlm.dense.bias".into(), &[h]),
                ln_g: b.add("mlm.norm.gamma".into(), &[h]),
                ln_b: b.add("mlm.norm.beta".into(), &[h]),
                dec_w: b.add("mlm.decoder.weight".into(), &[h, v]),
                dec_b: b.add("mlm.decoder.bias".into(), &[v]),
            },
            Head::Classifier { n_classes } => HeadIdx::Classifier {
                pool_w: b.add("classifier.pool.weight".into(), &[h, h]),
                pool_b: b.add("classifier.pool.bias".into(), &[h]),
                out_w: b.add("classifier.out.weight".into(), &[h, n_classes]),
                out_b: b.add("classifier.out.bias".into(), &[n_classes]),
            },
        };
        ParamLayout {
            tensors: b.tensors,
            total: b.total,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            head,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensors belonging to the encoder body (everything but the head).
    pub fn is_encoder(name: &str) -> bool {
        !(name.starts_with("mlm.") || name.starts_with("classifier."))
    }
}

/// Exact number of trainable scalars for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    ParamLayout::new(cfg).total()
}

/// Encoder weights in one flat vector.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
}

impl<T: Real> Model<T> {
    /// BERT-style initialisation: weight matrices N(0, 0.02), biases 0,
    /// LayerNorm gain 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![T::ZERO; layout.total()];
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        for t in layout.tensors() {
            let mut r = rng::stream(seed, &[rng::label("init"), rng::label(&t.name)]);
            let slice = &mut params[t.range()];
            if t.name.ends_with(".gamma") {
                slice.fill(T::ONE);
            } else if t.shape.len() == 2 {
                slice.iter_mut().for_each(|p| *p = T::from_f64(normal.sample(&mut r)));
            }
        }
        Ok(Model { config, layout, params })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(ModelError::Contract(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        Ok(Model { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.find(name).map(|t| &self.params[t.range()])
    }

    /// Same encoder with a freshly initialised head of a different kind.
    /// Encoder tensors are copied bit for bit.
    pub fn with_new_head(&self, head: Head, seed: u64) -> Result<Model<T>, ModelError> {
        let mut fresh = Model::init(self.config.clone().with_head(head), seed)?;
        for t in self.layout.tensors().iter().filter(|t| ParamLayout::is_encoder(&t.name)) {
            let dst = fresh.layout.find(&t.name).expect("same encoder layout").range();
            fresh.params[dst].copy_from_slice(&self.params[t.range()]);
        }
        Ok(fresh)
    }

    /// Copies every same-named, same-shaped tensor from `src`.
    pub fn load_encoder_from<U: Real>(&mut self, src: &Model<U>) -> Result<(), ModelError> {
        for t in src.layout.tensors().iter().filter(|t| ParamLayout::is_encoder(&t.name)) {
            let dst = self
                .layout
                .find(&t.name)
                .filter(|d| d.shape == t.shape)
                .ok_or_else(|| ModelError::Contract(format!("tensor `{}` missing or reshaped", t.name)))?
                .range();
            for (d, s) in self.params[dst].iter_mut().zip(&src.params[t.range()]) {
                *d = T::from_f64(s.to_f64());
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::from_f64(p.to_f64())).collect(),
        }
    }
}

/// Random token ids in `[first, vocab)`, used by tests and checks.
pub fn random_ids(rng: &mut impl Rng, n: usize, first: u32, vocab: u32) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(first..vocab)).collect()
}

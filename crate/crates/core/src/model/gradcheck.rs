//! Finite-difference check of the hand-written backward pass, in `f64`
//! with dropout disabled.

use rand::Rng;
use serde::Serialize;

use super::encoder::{Batch, Labels, IGNORE};
use super::{Head, Model, ModelConfig, ModelError};
use crate::rng;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// Denominator floor so gradients that are zero up to rounding do not
/// produce spurious relative errors.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub head: Head,
    pub n_params: usize,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Configuration small enough to difference every parameter.
pub fn tiny_config(head: Head) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_seq_len: 10,
        n_layers: 2,
        hidden_size: 8,
        n_heads: 2,
        ff_size: 16,
        dropout: 0.0,
        head,
    }
}

fn check_batch(cfg: &ModelConfig, seed: u64) -> Batch {
    let mut r = rng::stream(seed, &[rng::label("gradcheck")]);
    let l = cfg.max_seq_len;
    let ids: Vec<u32> = (0..2 * l).map(|_| r.gen_range(0..cfg.vocab_size as u32)).collect();
    // second sequence padded at the tail
    let attention: Vec<bool> = (0..2 * l).map(|i| i < l || i < l + l - 3).collect();
    let labels = match cfg.head {
        Head::Mlm => Labels::Mlm(
            (0..2 * l)
                .map(|i| {
                    if attention[i] && i % 3 == 1 {
                        r.gen_range(0..cfg.vocab_size as u32)
                    } else {
                        IGNORE
                    }
                })
                .collect(),
        ),
        Head::Classifier { n_classes } => Labels::Class(vec![0, n_classes - 1]),
    };
    Batch {
        seq_len: l,
        ids,
        attention,
        labels,
    }
}

/// Compares analytic and central-difference gradients for every parameter
/// of `config` (dropout forced to zero).
pub fn gradient_check(config: &ModelConfig, seed: u64) -> Result<GradReport, ModelError> {
    gradient_check_with(config, seed, |_| {})
}

/// As [`gradient_check`], but `tamper` may alter the analytic gradient
/// before comparison; used to confirm the check detects errors.
pub fn gradient_check_with(
    config: &ModelConfig,
    seed: u64,
    tamper: impl FnOnce(&mut [f64]),
) -> Result<GradReport, ModelError> {
    let mut cfg = config.clone();
    cfg.dropout = 0.0;
    let mut model = Model::<f64>::init(cfg.clone(), seed)?;
    // nudge biases and gains away from their symmetric initial values
    let mut r = rng::stream(seed, &[rng::label("gradcheck-perturb")]);
    for p in model.params_mut() {
        *p += r.gen_range(-0.05..0.05);
    }
    let batch = check_batch(&cfg, seed);
    let weights: Option<Vec<f64>> = match cfg.head {
        Head::Classifier { n_classes } => Some((0..n_classes).map(|c| 1.0 + c as f64).collect()),
        Head::Mlm => None,
    };
    let loss = |m: &Model<f64>| m.loss_and_backward(&batch, weights.as_deref(), None).map(|o| o.loss);

    let mut analytic = model.loss_and_backward(&batch, weights.as_deref(), None)?.grads;
    tamper(&mut analytic);

    let specs = model.layout().tensors().to_vec();
    let mut tensors = Vec::with_capacity(specs.len());
    for t in &specs {
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for i in t.range() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + STEP;
            let up = loss(&model)?;
            model.params_mut()[i] = orig - STEP;
            let down = loss(&model)?;
            model.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i];
            let diff = (a - numeric).abs();
            abs = abs.max(diff);
            rel = rel.max(diff / a.abs().max(numeric.abs()).max(FLOOR));
        }
        tensors.push(TensorCheck {
            name: t.name.clone(),
            max_rel_error: rel,
            max_abs_error: abs,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        head: cfg.head,
        n_params: model.params().len(),
        tensors,
        max_rel_error,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

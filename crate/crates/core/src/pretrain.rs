//! Masked-token pretraining: the 15 % / 80-10-10 masking policy, the
//! training loop, held-out evaluation and embedding export.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{
    clip_grad_norm, save_checkpoint, AdamW, AdamWConfig, Batch, Checkpoint, CheckpointError, EvalOutput, Head, Labels,
    LrSchedule, Model, ModelConfig, ModelError, IGNORE,
};
use crate::rng;
use crate::tokenizer::{TokenSequence, Vocabulary, CLS_ID, MASK_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPolicy {
    pub select_fraction: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
    pub non_maskable: Vec<u32>,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_fraction: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
            non_maskable: vec![PAD_ID, CLS_ID],
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let f = [self.select_fraction, self.mask_fraction, self.random_fraction, self.keep_fraction];
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(PretrainError::Config("masking fractions must lie in [0, 1]".into()));
        }
        if (self.mask_fraction + self.random_fraction + self.keep_fraction - 1.0).abs() > 1e-9 {
            return Err(PretrainError::Config("mask + random + keep fractions must sum to 1".into()));
        }
        if !self.non_maskable.contains(&PAD_ID) {
            return Err(PretrainError::Config("<PAD> must be non-maskable".into()));
        }
        Ok(())
    }
}

/// Outcome counts of one masking pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskStats {
    pub maskable: usize,
    pub selected: usize,
    pub masked: usize,
    pub random: usize,
    pub kept: usize,
}

impl std::ops::AddAssign for MaskStats {
    fn add_assign(&mut self, o: MaskStats) {
        self.maskable += o.maskable;
        self.selected += o.selected;
        self.masked += o.masked;
        self.random += o.random;
        self.kept += o.kept;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub input: Vec<u32>,
    /// Original id at selected positions, [`IGNORE`] elsewhere.
    pub labels: Vec<u32>,
    pub stats: MaskStats,
}

/// Selects `round(select_fraction × maskable)` positions (at least one when
/// any are maskable and the fraction is positive) uniformly without
/// replacement, then replaces each with `<MASK>`, a random id from
/// `replacement`, or leaves it, per the policy.
pub fn apply_masking(ids: &[u32], policy: &MaskingPolicy, replacement: Range<u32>, rng: &mut ChaCha8Rng) -> MaskedSequence {
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !policy.non_maskable.contains(&ids[i])).collect();
    let mut count = (policy.select_fraction * maskable.len() as f64).round() as usize;
    if policy.select_fraction > 0.0 && !maskable.is_empty() {
        count = count.max(1);
    }
    let mut input = ids.to_vec();
    let mut labels = vec![IGNORE; ids.len()];
    let mut stats = MaskStats {
        maskable: maskable.len(),
        selected: count,
        ..MaskStats::default()
    };
    let mut chosen: Vec<usize> = index::sample(rng, maskable.len(), count).into_iter().map(|k| maskable[k]).collect();
    chosen.sort_unstable();
    for pos in chosen {
        labels[pos] = ids[pos];
        let u: f64 = rng.gen();
        if u < policy.mask_fraction {
            input[pos] = MASK_ID;
            stats.masked += 1;
        } else if u < policy.mask_fraction + policy.random_fraction {
            input[pos] = rng.gen_range(replacement.clone());
            stats.random += 1;
        } else {
            stats.kept += 1;
        }
    }
    MaskedSequence { input, labels, stats }
}

/// `<CLS>` followed by the window.
pub fn with_cls(ids: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len() + 1);
    out.push(CLS_ID);
    out.extend_from_slice(ids);
    out
}

/// Encoder dimensions; vocabulary and sequence length come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub ff_size: usize,
    pub dropout: f64,
}

impl EncoderShape {
    pub fn tiny() -> Self {
        EncoderShape {
            n_layers: 2,
            hidden_size: 64,
            n_heads: 4,
            ff_size: 128,
            dropout: 0.1,
        }
    }

    pub fn to_config(&self, vocab_size: usize, max_seq_len: usize, head: Head) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_seq_len,
            n_layers: self.n_layers,
            hidden_size: self.hidden_size,
            n_heads: self.n_heads,
            ff_size: self.ff_size,
            dropout: self.dropout,
            head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderShape,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Held-out evaluation every this many steps (and at the end).
    pub eval_interval: u64,
    /// Upper bound on held-out windows scored per evaluation.
    pub eval_windows: usize,
    /// Fraction of trips withheld from training.
    pub holdout_fraction: f64,
    /// Save an intermediate checkpoint every this many steps (0 = never).
    #[serde(default)]
    pub checkpoint_interval: u64,
    #[serde(default)]
    pub masking: MaskingPolicy,
}

impl PretrainConfig {
    pub fn tiny(seed: u64) -> Self {
        PretrainConfig {
            encoder: EncoderShape::tiny(),
            batch_size: 4,
            steps: 2000,
            lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed,
            eval_interval: 250,
            eval_windows: 128,
            holdout_fraction: 0.1,
            checkpoint_interval: 0,
            masking: MaskingPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        self.masking.validate()?;
        if self.batch_size == 0 || self.steps == 0 || self.eval_interval == 0 || self.eval_windows == 0 {
            return Err(PretrainError::Config("batch size, steps and eval sizes must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(PretrainError::Config("learning rate and clip norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) || self.holdout_fraction == 0.0 {
            return Err(PretrainError::Config("holdout fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr,
            warmup: self.warmup_steps,
            total: self.steps,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PretrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("corpus has no windows to train on")]
    EmptyCorpus,
    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("non-finite loss at step {step}{}", dump.as_ref().map(|p| format!(" (batch dumped to {})", p.display())).unwrap_or_default())]
    NonFinite { step: u64, dump: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics log: {0}")]
    Csv(#[from] csv::Error),
}

/// One line of the training metrics log, shared by pretraining and
/// fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Top-1 accuracy on the scored targets of the training batch.
    pub accuracy: f64,
    pub eval_loss: Option<f64>,
    /// Held-out masked accuracy (pretraining) or validation F1 (fine-tuning).
    pub eval_metric: Option<f64>,
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W, header: bool) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn check_vocab(corpus: &[TokenSequence], vocab: &Vocabulary) -> Result<(), PretrainError> {
    match corpus.iter().find(|s| *s.vocab_hash != *vocab.hash()) {
        Some(s) => Err(PretrainError::VocabMismatch {
            expected: vocab.hash().to_string(),
            found: s.vocab_hash.to_string(),
        }),
        None => Ok(()),
    }
}

/// Splits window indices into (train, held-out) by whole trips.
pub fn holdout_split(corpus: &[TokenSequence], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let trips: BTreeSet<(Arc<str>, Arc<str>)> = corpus
        .iter()
        .map(|s| (s.origin.vehicle_id.clone(), s.origin.trip_id.clone()))
        .collect();
    let mut trips: Vec<_> = trips.into_iter().collect();
    trips.shuffle(&mut rng::stream(seed, &[rng::label("holdout")]));
    let n_held = ((fraction * trips.len() as f64).ceil() as usize).clamp(1, trips.len().saturating_sub(1).max(1));
    let held: BTreeSet<_> = trips.into_iter().take(n_held).collect();
    (0..corpus.len()).partition(|&i| {
        let o = &corpus[i].origin;
        !held.contains(&(o.vehicle_id.clone(), o.trip_id.clone()))
    })
}

/// A masked batch of `<CLS>`-prefixed windows.
pub fn masked_batch(
    windows: &[&[u32]],
    policy: &MaskingPolicy,
    replacement: Range<u32>,
    mut rng_for: impl FnMut(usize) -> ChaCha8Rng,
) -> (Batch, MaskStats) {
    let seq_len = windows.first().map_or(1, |w| w.len() + 1);
    let mut ids = Vec::with_capacity(windows.len() * seq_len);
    let mut labels = Vec::with_capacity(windows.len() * seq_len);
    let mut stats = MaskStats::default();
    for (b, w) in windows.iter().enumerate() {
        let m = apply_masking(&with_cls(w), policy, replacement.clone(), &mut rng_for(b));
        ids.extend(m.input);
        labels.extend(m.labels);
        stats += m.stats;
    }
    let attention = vec![true; ids.len()];
    (
        Batch {
            seq_len,
            ids,
            attention,
            labels: Labels::Mlm(labels),
        },
        stats,
    )
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamW,
    pub step: u64,
    /// Rows produced by this invocation (a resumed run starts after the
    /// checkpoint step).
    pub log: Vec<MetricsRow>,
    pub final_eval: EvalOutput,
}

pub struct Pretrainer<'a> {
    corpus: &'a [TokenSequence],
    vocab: &'a Vocabulary,
    cfg: PretrainConfig,
    train: Vec<usize>,
    eval_batch: Batch,
    model_config: ModelConfig,
}

impl<'a> Pretrainer<'a> {
    pub fn new(corpus: &'a [TokenSequence], vocab: &'a Vocabulary, cfg: PretrainConfig) -> Result<Self, PretrainError> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(PretrainError::EmptyCorpus);
        }
        check_vocab(corpus, vocab)?;
        let window = corpus[0].ids.len();
        if corpus.iter().any(|s| s.ids.len() != window) {
            return Err(PretrainError::Config("windows differ in length".into()));
        }
        let (train, held) = holdout_split(corpus, cfg.holdout_fraction, cfg.seed);
        if train.is_empty() || held.is_empty() {
            return Err(PretrainError::Config("corpus too small to hold out whole trips".into()));
        }
        let model_config = cfg.encoder.to_config(vocab.size(), window + 1, Head::Mlm);
        model_config.validate()?;
        let stride = (held.len() / cfg.eval_windows).max(1);
        let eval_idx: Vec<usize> = held.iter().step_by(stride).take(cfg.eval_windows).copied().collect();
        let windows: Vec<&[u32]> = eval_idx.iter().map(|&i| corpus[i].ids.as_slice()).collect();
        let (eval_batch, _) = masked_batch(&windows, &cfg.masking, replacement_range(vocab), |b| {
            rng::stream(cfg.seed, &[rng::label("eval-mask"), b as u64])
        });
        Ok(Pretrainer {
            corpus,
            vocab,
            cfg,
            train,
            eval_batch,
            model_config,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn train_windows(&self) -> &[usize] {
        &self.train
    }

    pub fn eval_batch(&self) -> &Batch {
        &self.eval_batch
    }

    pub fn evaluate(&self, model: &Model<f32>) -> Result<EvalOutput, PretrainError> {
        Ok(model.evaluate(&self.eval_batch, None)?)
    }

    /// The masked batch used at 0-based `step`.
    pub fn batch_at(&self, step: u64) -> (Batch, MaskStats) {
        let seed = self.cfg.seed;
        let mut pick = rng::stream(seed, &[rng::label("batch"), step]);
        let windows: Vec<&[u32]> = (0..self.cfg.batch_size)
            .map(|_| self.corpus[self.train[pick.gen_range(0..self.train.len())]].ids.as_slice())
            .collect();
        masked_batch(&windows, &self.cfg.masking, replacement_range(self.vocab), |b| {
            rng::stream(seed, &[rng::label("mask"), step, b as u64])
        })
    }

    /// Trains from `resume` (or a fresh initialisation) up to the configured
    /// step count. Intermediate checkpoints go under `out/step-N` when an
    /// output directory is given.
    pub fn run(&self, resume: Option<Checkpoint<f32>>, out: Option<&Path>) -> Result<PretrainOutcome, PretrainError> {
        let cfg = &self.cfg;
        let (mut model, mut opt, start) = match resume {
            Some(ck) => {
                if ck.manifest.vocab_hash != self.vocab.hash() {
                    return Err(PretrainError::VocabMismatch {
                        expected: self.vocab.hash().to_string(),
                        found: ck.manifest.vocab_hash,
                    });
                }
                if ck.model.config() != &self.model_config {
                    return Err(PretrainError::Config("checkpoint config differs from run config".into()));
                }
                let opt = ck
                    .optimizer
                    .ok_or_else(|| PretrainError::Config("checkpoint has no optimizer state to resume".into()))?;
                (ck.model, opt, ck.manifest.step)
            }
            None => {
                let model = Model::<f32>::init(self.model_config.clone(), cfg.seed)?;
                let opt = AdamW::new(cfg.adamw(), model.layout());
                (model, opt, 0)
            }
        };
        let schedule = cfg.schedule();
        let mut log = Vec::new();
        let mut last_eval = None;
        for step in start..cfg.steps {
            let (batch, _) = self.batch_at(step);
            let dropout = rng::derive_seed(cfg.seed, &[rng::label("dropout"), step]);
            let mut outp = model.loss_and_backward(&batch, None, Some(dropout))?;
            if !outp.loss.is_finite() || outp.grads.iter().any(|g| !g.is_finite()) {
                let dump = match out {
                    Some(dir) => Some(dump_batch(dir, step + 1, &batch)?),
                    None => None,
                };
                return Err(PretrainError::NonFinite { step: step + 1, dump });
            }
            let grad_norm = clip_grad_norm(&mut outp.grads, cfg.clip_norm);
            let lr = schedule.at(step + 1);
            opt.update(model.params_mut(), &outp.grads, lr);
            let done = step + 1;
            let mut row = MetricsRow {
                step: done,
                loss: outp.loss,
                lr,
                grad_norm,
                accuracy: if outp.scored > 0 {
                    outp.correct as f64 / outp.scored as f64
                } else {
                    0.0
                },
                eval_loss: None,
                eval_metric: None,
            };
            if done % cfg.eval_interval == 0 || done == cfg.steps {
                let e = self.evaluate(&model)?;
                row.eval_loss = Some(e.loss);
                row.eval_metric = Some(e.accuracy());
                last_eval = Some(e);
                log::info!("step {done}: loss {:.4} held-out {:.4} acc {:.4}", outp.loss, e.loss, e.accuracy());
            }
            log.push(row);
            if let Some(dir) = out {
                if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.steps {
                    save_checkpoint(&dir.join(format!("step-{done}")), &model, Some(&opt), done, cfg.seed, self.vocab.hash())?;
                }
            }
        }
        let final_eval = match last_eval {
            Some(e) => e,
            None => self.evaluate(&model)?,
        };
        Ok(PretrainOutcome {
            model,
            optimizer: opt,
            step: cfg.steps.max(start),
            log,
            final_eval,
        })
    }
}

/// Ids eligible as random replacements: every non-special token.
pub fn replacement_range(vocab: &Vocabulary) -> Range<u32> {
    vocab.first_feature_id()..vocab.size() as u32
}

fn dump_batch(dir: &Path, step: u64, batch: &Batch) -> Result<PathBuf, PretrainError> {
    #[derive(Serialize)]
    struct Dump<'a> {
        step: u64,
        seq_len: usize,
        ids: &'a [u32],
        labels: Option<&'a [u32]>,
    }
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("nonfinite-step{step}.json"));
    let dump = Dump {
        step,
        seq_len: batch.seq_len,
        ids: &batch.ids,
        labels: match &batch.labels {
            Labels::Mlm(l) => Some(l),
            Labels::Class(_) => None,
        },
    };
    std::fs::write(&path, serde_json::to_vec(&dump).map_err(std::io::Error::other)?)?;
    Ok(path)
}

/// Token-embedding rows with their names.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub names: Vec<String>,
    pub dim: usize,
    pub rows: Vec<f32>,
}

impl EmbeddingTable {
    pub fn row(&self, id: usize) -> &[f32] {
        &self.rows[id * self.dim..(id + 1) * self.dim]
    }

    /// `id,token,e0,e1,…` with shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "token".to_string()];
        header.extend((0..self.dim).map(|j| format!("e{j}")));
        w.write_record(&header)?;
        for (id, name) in self.names.iter().enumerate() {
            let mut rec = vec![id.to_string(), name.clone()];
            rec.extend(self.row(id).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(input);
        let dim = r.headers()?.len().saturating_sub(2);
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            names.push(rec[1].to_string());
            for cell in rec.iter().skip(2) {
                rows.push(cell.parse::<f32>().map_err(|e| {
                    csv::Error::from(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
                })?);
            }
        }
        Ok(EmbeddingTable { names, dim, rows })
    }
}

pub fn export_embeddings<T: crate::model::Real>(model: &Model<T>, vocab: &Vocabulary) -> EmbeddingTable {
    let dim = model.config().hidden_size;
    let rows = model
        .tensor("embeddings.token")
        .expect("every model has token embeddings")
        .iter()
        .map(|v| v.to_f64() as f32)
        .collect();
    EmbeddingTable {
        names: (0..vocab.size() as u32).map(|id| vocab.name(id).unwrap_or("?").to_string()).collect(),
        dim,
        rows,
    }
}

/// Mean cosine similarity between embeddings of value tokens (bins, states,
/// sentinels) of the same feature, and between tokens of different
/// features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterStatistic {
    pub within: f64,
    pub across: f64,
}

pub fn cluster_statistic(table: &EmbeddingTable, vocab: &Vocabulary) -> ClusterStatistic {
    let ids: Vec<(usize, usize)> = (0..table.names.len())
        .filter_map(|id| vocab.feature_of(id as u32).map(|f| (id, f)))
        .collect();
    let unit: Vec<Vec<f64>> = ids
        .iter()
        .map(|&(id, _)| {
            let r = table.row(id);
            let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-30);
            r.iter().map(|&v| v as f64 / n).collect()
        })
        .collect();
    let sums: Vec<(f64, u64, f64, u64)> = (0..ids.len())
        .into_par_iter()
        .map(|i| {
            let (mut w, mut nw, mut a, mut na) = (0.0, 0u64, 0.0, 0u64);
            for j in i + 1..ids.len() {
                let c: f64 = unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum();
                if ids[i].1 == ids[j].1 {
                    w += c;
                    nw += 1;
                } else {
                    a += c;
                    na += 1;
                }
            }
            (w, nw, a, na)
        })
        .collect();
    let (w, nw, a, na) = sums
        .into_iter()
        .fold((0.0, 0, 0.0, 0), |acc, s| (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2, acc.3 + s.3));
    ClusterStatistic {
        within: if nw > 0 { w / nw as f64 } else { 0.0 },
        across: if na > 0 { a / na as f64 } else { 0.0 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> MaskingPolicy {
        MaskingPolicy::default()
    }

    #[test]
    fn masking_labels_exactly_the_selected_positions() {
        let ids: Vec<u32> = (0..60).map(|i| if i % 10 == 0 { PAD_ID } else { 10 + i }).collect();
        let mut r = rng::stream(1, &[]);
        let m = apply_masking(&ids, &policy(), 10..100, &mut r);
        assert_eq!(m.stats.maskable, 54);
        assert_eq!(m.stats.selected, 8);
        let labelled: Vec<usize> = (0..60).filter(|&i| m.labels[i] != IGNORE).collect();
        assert_eq!(labelled.len(), 8);
        for i in 0..60 {
            if m.labels[i] == IGNORE {
                assert_eq!(m.input[i], ids[i]);
            } else {
                assert_eq!(m.labels[i], ids[i]);
                assert_ne!(ids[i], PAD_ID);
            }
        }
        assert_eq!(m.stats.masked + m.stats.random + m.stats.kept, 8);
    }

    #[test]
    fn zero_fraction_changes_nothing() {
        let ids: Vec<u32> = (6..40).collect();
        let p = MaskingPolicy {
            select_fraction: 0.0,
            ..policy()
        };
        let m = apply_masking(&ids, &p, 6..40, &mut rng::stream(2, &[]));
        assert_eq!(m.input, ids);
        assert!(m.labels.iter().all(|&l| l == IGNORE));
    }

    #[test]
    fn short_sequences_still_mask_one_token() {
        let m = apply_masking(&[7, 8, 9], &policy(), 6..20, &mut rng::stream(3, &[]));
        assert_eq!(m.stats.selected, 1);
        let none = apply_masking(&[PAD_ID, CLS_ID], &policy(), 6..20, &mut rng::stream(3, &[]));
        assert_eq!(none.stats.selected, 0);
    }

    #[test]
    fn policy_validation() {
        assert!(policy().validate().is_ok());
        let bad = MaskingPolicy {
            keep_fraction: 0.2,
            ..policy()
        };
        assert!(bad.validate().is_err());
        let no_pad = MaskingPolicy {
            non_maskable: vec![CLS_ID],
            ..policy()
        };
        assert!(no_pad.validate().is_err());
    }

    #[test]
    fn metrics_log_round_trips() {
        let rows = vec![
            MetricsRow {
                step: 1,
                loss: 7.25,
                lr: 1e-5,
                grad_norm: 3.0,
                accuracy: 0.0,
                eval_loss: None,
                eval_metric: None,
            },
            MetricsRow {
                step: 2,
                loss: 0.1 + 0.2,
                lr: 2e-5,
                grad_norm: 1.5,
                accuracy: 0.25,
                eval_loss: Some(6.5),
                eval_metric: Some(0.125),
            },
        ];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf, true).unwrap();
        assert_eq!(read_metrics(buf.as_slice()).unwrap(), rows);
    }
}

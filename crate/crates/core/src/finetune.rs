//! Downstream tasks: collision detection (binary, rebalanced to a fixed
//! negative:positive ratio) and point of impact (8 classes). Builds
//! trip-disjoint splits, fine-tunes a pretrained encoder or trains the same
//! architecture from scratch, and compares the two arms.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{compute_metrics, ConfusionMatrix, MetricReport};
use crate::datagen::{rebalance, DatagenError, EventLabel, Impact};
use crate::model::{
    argmax, clip_grad_norm, AdamW, AdamWConfig, Batch, Head, Labels, LrSchedule, Model, ModelConfig, ModelError,
};
use crate::pretrain::{with_cls, MetricsRow};
use crate::rng;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Collision vs. no collision.
    Collision,
    /// Point of impact among collision windows.
    Impact,
}

impl TaskKind {
    pub fn n_classes(self) -> usize {
        match self {
            TaskKind::Collision => 2,
            TaskKind::Impact => Impact::ALL.len(),
        }
    }

    pub fn class_names(self) -> Vec<&'static str> {
        match self {
            TaskKind::Collision => vec!["no_collision", "collision"],
            TaskKind::Impact => Impact::ALL.iter().map(|i| i.name()).collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Collision => "collision",
            TaskKind::Impact => "impact",
        }
    }

    /// Headline score: positive-class F1 for collisions, macro F1 for
    /// impact.
    pub fn score(self, report: &MetricReport) -> f64 {
        match self {
            TaskKind::Collision => report.positive().f1,
            TaskKind::Impact => report.macro_avg.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Negatives per positive (collision task only).
    pub ratio: Option<f64>,
    /// Train / validation / test fractions.
    pub splits: [f64; 3],
    pub seed: u64,
}

impl TaskSpec {
    pub fn collision(ratio: f64, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Collision,
            ratio: Some(ratio),
            splits: [0.8, 0.1, 0.1],
            seed,
        }
    }

    pub fn impact(seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Impact,
            ratio: None,
            splits: [0.8, 0.1, 0.1],
            seed,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error("invalid task: {0}")]
    Task(String),
    #[error("label references window {window} of {vehicle}/{trip}, which the corpus lacks")]
    MissingWindow {
        vehicle: String,
        trip: String,
        window: usize,
    },
    #[error("class `{class}` has no samples in the {split} split")]
    EmptyClass { class: String, split: &'static str },
    #[error("checkpoint incompatible with task: {0}")]
    Incompatible(String),
    #[error("invalid arm comparison: {0}")]
    InvalidComparison(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A labelled window: `index` points into the token corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    pub index: usize,
    pub label: usize,
    pub vehicle_id: Arc<str>,
    pub trip_id: Arc<str>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Vec<TaskExample>,
    pub val: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub class_weights: Vec<f64>,
}

impl TaskDataset {
    pub fn n_classes(&self) -> usize {
        self.spec.kind.n_classes()
    }

    pub fn split(&self, name: &str) -> Option<&[TaskExample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn class_counts(examples: &[TaskExample], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for e in examples {
        c[e.label] += 1;
    }
    c
}

/// Balanced inverse-frequency weights `N / (K · N_c)`.
pub fn class_weights(counts: &[usize]) -> Option<Vec<f64>> {
    let n: usize = counts.iter().sum();
    let k = counts.len() as f64;
    counts.iter().map(|&c| (c > 0).then(|| n as f64 / (k * c as f64))).collect()
}

/// Assigns whole trips to splits, greedily keeping every class near the
/// target fractions. Trips holding rare classes are placed first.
fn split_by_trip(examples: Vec<TaskExample>, k: usize, fractions: [f64; 3], seed: u64) -> [Vec<TaskExample>; 3] {
    let mut trips: BTreeMap<(Arc<str>, Arc<str>), Vec<TaskExample>> = BTreeMap::new();
    for e in examples {
        trips.entry((e.vehicle_id.clone(), e.trip_id.clone())).or_default().push(e);
    }
    let mut groups: Vec<Vec<TaskExample>> = trips.into_values().collect();
    groups.shuffle(&mut rng::stream(seed, &[rng::label("split")]));
    let totals = {
        let mut t = vec![0usize; k];
        for g in &groups {
            for e in g {
                t[e.label] += 1;
            }
        }
        t
    };
    let rarity = |g: &Vec<TaskExample>| {
        g.iter().map(|e| 1.0 / totals[e.label] as f64).fold(0.0, f64::max)
    };
    groups.sort_by(|a, b| rarity(b).total_cmp(&rarity(a)));
    let n_total: usize = totals.iter().sum();
    let mut assigned = [vec![0usize; k], vec![0usize; k], vec![0usize; k]];
    let mut sizes = [0usize; 3];
    let mut out: [Vec<TaskExample>; 3] = Default::default();
    for g in groups {
        let counts = class_counts(&g, k);
        let rarest = (0..k)
            .filter(|&c| counts[c] > 0)
            .min_by_key(|&c| totals[c])
            .expect("groups are non-empty");
        let want = |s: usize| {
            (
                fractions[s] * totals[rarest] as f64 - assigned[s][rarest] as f64,
                fractions[s] * n_total as f64 - sizes[s] as f64,
            )
        };
        let best = (0..3).fold(0, |b, s| if want(s) > want(b) { s } else { b });
        for c in 0..k {
            assigned[best][c] += counts[c];
        }
        sizes[best] += g.len();
        out[best].extend(g);
    }
    for split in &mut out {
        split.sort_by_key(|e| e.index);
    }
    out
}

/// Labels the token corpus for `spec`, splits by trip, rebalances each
/// split (collision task) and computes class weights on the training split.
pub fn build_task_dataset(
    corpus: &[TokenSequence],
    labels: &[EventLabel],
    spec: &TaskSpec,
) -> Result<TaskDataset, FinetuneError> {
    let s = spec.splits;
    if s.iter().any(|f| !(0.0..=1.0).contains(f)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(FinetuneError::Task("split fractions must sum to 1".into()));
    }
    let k = spec.kind.n_classes();
    let mut by_trip: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, seq) in corpus.iter().enumerate() {
        by_trip.entry((&seq.origin.vehicle_id, &seq.origin.trip_id)).or_default().push(i);
    }
    let mut examples = Vec::new();
    for l in labels {
        let label = match (spec.kind, l.impact) {
            (TaskKind::Collision, imp) => usize::from(imp.is_some()),
            (TaskKind::Impact, Some(imp)) => imp.index(),
            (TaskKind::Impact, None) => continue,
        };
        let index = by_trip
            .get(&(&*l.vehicle_id, &*l.trip_id))
            .and_then(|w| w.get(l.window))
            .copied()
            .ok_or_else(|| FinetuneError::MissingWindow {
                vehicle: l.vehicle_id.to_string(),
                trip: l.trip_id.to_string(),
                window: l.window,
            })?;
        examples.push(TaskExample {
            index,
            label,
            vehicle_id: l.vehicle_id.clone(),
            trip_id: l.trip_id.clone(),
        });
    }
    let [mut train, mut val, mut test] = split_by_trip(examples, k, spec.splits, spec.seed);
    if spec.kind == TaskKind::Collision {
        let ratio = spec
            .ratio
            .ok_or_else(|| FinetuneError::Task("collision task needs a negative:positive ratio".into()))?;
        for (n, split) in [&mut train, &mut val, &mut test].into_iter().enumerate() {
            let as_labels: Vec<EventLabel> = split
                .iter()
                .map(|e| EventLabel {
                    vehicle_id: e.vehicle_id.clone(),
                    trip_id: e.trip_id.clone(),
                    window: e.index,
                    impact: (e.label == 1).then_some(Impact::Front),
                })
                .collect();
            let keep = rebalance(&as_labels, ratio, rng::derive_seed(spec.seed, &[n as u64]))?;
            *split = keep.into_iter().map(|i| split[i].clone()).collect();
        }
    }
    let names = spec.kind.class_names();
    for (split, name) in [(&train, "train"), (&val, "val"), (&test, "test")] {
        if let Some(c) = class_counts(split, k).iter().position(|&n| n == 0) {
            if name == "train" || spec.kind == TaskKind::Collision {
                return Err(FinetuneError::EmptyClass {
                    class: names[c].to_string(),
                    split: name,
                });
            }
        }
    }
    let class_weights = class_weights(&class_counts(&train, k)).expect("train classes checked non-empty");
    Ok(TaskDataset {
        spec: spec.clone(),
        train,
        val,
        test,
        class_weights,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Validation every this many steps (and at the end).
    pub eval_interval: u64,
    /// Upper bound on validation windows scored, subsampled per class.
    pub val_windows: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        if self.batch_size == 0 || self.steps == 0 || self.eval_interval == 0 || self.val_windows == 0 {
            return Err(FinetuneError::Task("batch size, steps and eval sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.weight_decay >= 0.0) {
            return Err(FinetuneError::Task("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Everything except the seed, used to check that arms are comparable.
    fn budget(&self) -> (usize, u64, u64, u64, u64, u64, usize) {
        (
            self.batch_size,
            self.steps,
            self.lr.to_bits(),
            self.warmup_steps,
            self.weight_decay.to_bits(),
            self.clip_norm.to_bits(),
            self.val_windows,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Pretrained,
    Scratch,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Pretrained => "pretrained",
            Arm::Scratch => "scratch",
        }
    }
}

/// What a fine-tuning run is compared on, without its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmResult {
    pub task: TaskKind,
    pub ratio: Option<f64>,
    pub arm: Arm,
    pub config: FinetuneConfig,
    pub best_step: u64,
    pub val_score: f64,
    pub test_score: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub task: TaskKind,
    pub ratio: Option<f64>,
    pub arm: Arm,
    pub config: FinetuneConfig,
    /// Best-validation model.
    pub model: Model<f32>,
    pub best_step: u64,
    pub best_val_score: f64,
    pub log: Vec<MetricsRow>,
    pub test_report: MetricReport,
    pub test_confusion: ConfusionMatrix,
    pub test_score: f64,
}

/// Class predictions for corpus windows, `<CLS>`-prefixed, in chunks.
pub fn predict(model: &Model<f32>, corpus: &[TokenSequence], examples: &[TaskExample]) -> Result<Vec<usize>, ModelError> {
    let k = match model.config().head {
        Head::Classifier { n_classes } => n_classes,
        Head::Mlm => return Err(ModelError::Contract("prediction needs a classifier head".into())),
    };
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let ids: Vec<u32> = chunk.iter().flat_map(|e| with_cls(&corpus[e.index].ids)).collect();
        let seq_len = ids.len() / chunk.len();
        let logits = model.forward(&ids, &vec![true; ids.len()], seq_len)?;
        out.extend(logits.chunks_exact(k).map(argmax));
    }
    Ok(out)
}

pub fn evaluate_examples(
    model: &Model<f32>,
    corpus: &[TokenSequence],
    examples: &[TaskExample],
    k: usize,
) -> Result<(MetricReport, ConfusionMatrix), FinetuneError> {
    let pred = predict(model, corpus, examples)?;
    let truth: Vec<usize> = examples.iter().map(|e| e.label).collect();
    compute_metrics(&truth, &pred, k).map_err(|e| FinetuneError::Task(e.to_string()))
}

/// At most `cap` examples, keeping each class's share (every class keeps
/// at least one example).
pub fn stratified_subsample(examples: &[TaskExample], k: usize, cap: usize) -> Vec<TaskExample> {
    if examples.len() <= cap {
        return examples.to_vec();
    }
    let mut out = Vec::new();
    for c in 0..k {
        let members: Vec<&TaskExample> = examples.iter().filter(|e| e.label == c).collect();
        if members.is_empty() {
            continue;
        }
        let take = ((members.len() * cap) as f64 / examples.len() as f64).round().max(1.0) as usize;
        let stride = members.len() as f64 / take as f64;
        out.extend((0..take).map(|i| members[(i as f64 * stride) as usize].clone()));
    }
    out.sort_by_key(|e| e.index);
    out
}

/// Fine-tunes `init` (pretrained arm) or a fresh encoder of `scratch_config`
/// shape (scratch arm) with a new classifier head, keeping the weights
/// with the best validation score.
pub fn finetune(
    corpus: &[TokenSequence],
    data: &TaskDataset,
    init: Result<&Model<f32>, &ModelConfig>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome, FinetuneError> {
    cfg.validate()?;
    let kind = data.spec.kind;
    let k = kind.n_classes();
    let head = Head::Classifier { n_classes: k };
    let head_seed = rng::derive_seed(cfg.seed, &[rng::label("head")]);
    let (mut model, arm) = match init {
        Ok(pre) => (pre.with_new_head(head, head_seed)?, Arm::Pretrained),
        Err(shape) => (Model::init(shape.clone().with_head(head), head_seed)?, Arm::Scratch),
    };
    let needed = corpus.first().map_or(0, |s| s.ids.len() + 1);
    if model.config().max_seq_len < needed {
        return Err(FinetuneError::Incompatible(format!(
            "max_seq_len {} below the {needed} tokens of a <CLS>-prefixed window",
            model.config().max_seq_len
        )));
    }
    if data.train.is_empty() {
        return Err(FinetuneError::Task("empty training split".into()));
    }
    let val = stratified_subsample(&data.val, k, cfg.val_windows);
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        model.layout(),
    );
    let schedule = LrSchedule {
        peak: cfg.lr,
        warmup: cfg.warmup_steps,
        total: cfg.steps,
    };
    let mut best: Option<(f64, u64, Vec<f32>)> = None;
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let mut pick = rng::stream(cfg.seed, &[rng::label("ft-batch"), step]);
        let chosen: Vec<&TaskExample> = (0..cfg.batch_size)
            .map(|_| &data.train[pick.gen_range(0..data.train.len())])
            .collect();
        let ids: Vec<u32> = chosen.iter().flat_map(|e| with_cls(&corpus[e.index].ids)).collect();
        let batch = Batch {
            seq_len: needed,
            attention: vec![true; ids.len()],
            ids,
            labels: Labels::Class(chosen.iter().map(|e| e.label).collect()),
        };
        let dropout = rng::derive_seed(cfg.seed, &[rng::label("ft-dropout"), step]);
        let mut out = model.loss_and_backward(&batch, Some(&data.class_weights), Some(dropout))?;
        if !out.loss.is_finite() {
            return Err(FinetuneError::NonFinite { step: step + 1 });
        }
        let grad_norm = clip_grad_norm(&mut out.grads, cfg.clip_norm);
        let lr = schedule.at(step + 1);
        opt.update(model.params_mut(), &out.grads, lr);
        let done = step + 1;
        let mut row = MetricsRow {
            step: done,
            loss: out.loss,
            lr,
            grad_norm,
            accuracy: out.correct as f64 / out.scored.max(1) as f64,
            eval_loss: None,
            eval_metric: None,
        };
        if done % cfg.eval_interval == 0 || done == cfg.steps {
            let (report, _) = evaluate_examples(&model, corpus, &val, k)?;
            let score = kind.score(&report);
            row.eval_metric = Some(score);
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, done, model.params().to_vec()));
            }
            log::info!("{} step {done}: loss {:.4} val {:.4}", arm.name(), out.loss, score);
        }
        log.push(row);
    }
    let (best_val_score, best_step, params) = best.expect("the final step always evaluates");
    model.params_mut().copy_from_slice(&params);
    let (test_report, test_confusion) = evaluate_examples(&model, corpus, &data.test, k)?;
    Ok(FinetuneOutcome {
        task: kind,
        ratio: data.spec.ratio,
        arm,
        config: cfg.clone(),
        model,
        best_step,
        best_val_score,
        log,
        test_score: kind.score(&test_report),
        test_report,
        test_confusion,
    })
}

impl FinetuneOutcome {
    pub fn result(&self) -> ArmResult {
        ArmResult {
            task: self.task,
            ratio: self.ratio,
            arm: self.arm,
            config: self.config.clone(),
            best_step: self.best_step,
            val_score: self.best_val_score,
            test_score: self.test_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedGain {
    pub seed: u64,
    pub pretrained: f64,
    pub scratch: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub task: TaskKind,
    pub per_seed: Vec<SeedGain>,
    pub mean_pretrained: f64,
    pub mean_scratch: f64,
    pub mean_gain: f64,
    /// Sample standard deviation of the per-seed gains.
    pub std_gain: f64,
}

/// Pairs the two arms by seed. Both must cover the same task, ratio and
/// seeds under identical budgets.
pub fn transfer_gain(pretrained: &[ArmResult], scratch: &[ArmResult]) -> Result<TransferReport, FinetuneError> {
    let invalid = |m: String| Err(FinetuneError::InvalidComparison(m));
    let Some(first) = pretrained.first() else {
        return invalid("no pretrained runs".into());
    };
    if pretrained.len() != scratch.len() {
        return invalid(format!("{} pretrained runs against {} scratch runs", pretrained.len(), scratch.len()));
    }
    if let Some(r) = pretrained.iter().chain(scratch).find(|r| r.task != first.task || r.ratio != first.ratio) {
        return invalid(format!(
            "runs mix tasks: {} {:?} and {} {:?}",
            first.task.name(),
            first.ratio,
            r.task.name(),
            r.ratio
        ));
    }
    let mut per_seed = Vec::new();
    for p in pretrained {
        let seed = p.config.seed;
        if per_seed.iter().any(|g: &SeedGain| g.seed == seed) {
            return invalid(format!("seed {seed} repeated"));
        }
        let Some(s) = scratch.iter().find(|s| s.config.seed == seed) else {
            return invalid(format!("seed {seed} missing from the scratch arm"));
        };
        if s.config.budget() != p.config.budget() {
            return invalid(format!("seed {seed}: budgets differ"));
        }
        per_seed.push(SeedGain {
            seed,
            pretrained: p.test_score,
            scratch: s.test_score,
            gain: p.test_score - s.test_score,
        });
    }
    Ok(gain_summary(first.task, per_seed))
}

pub fn gain_summary(task: TaskKind, per_seed: Vec<SeedGain>) -> TransferReport {
    let n = per_seed.len() as f64;
    let mean = |f: fn(&SeedGain) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    let mean_gain = mean(|s| s.gain);
    let std_gain = if per_seed.len() > 1 {
        (per_seed.iter().map(|s| (s.gain - mean_gain).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    TransferReport {
        task,
        mean_pretrained: mean(|s| s.pretrained),
        mean_scratch: mean(|s| s.scratch),
        mean_gain,
        std_gain,
        per_seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(index: usize, label: usize, trip: usize) -> TaskExample {
        TaskExample {
            index,
            label,
            vehicle_id: Arc::from(format!("veh{}", trip / 5)),
            trip_id: Arc::from(format!("trip{trip}")),
        }
    }

    #[test]
    fn balanced_weights_are_one() {
        assert_eq!(class_weights(&[50, 50]).unwrap(), vec![1.0, 1.0]);
        let w = class_weights(&[90, 10]).unwrap();
        let n: f64 = [90.0, 10.0].iter().zip(&w).map(|(c, w)| c * w).sum();
        assert!((n - 100.0).abs() < 1e-12);
        assert!(class_weights(&[3, 0]).is_none());
    }

    #[test]
    fn splits_are_trip_disjoint_and_stratified() {
        let mut examples = Vec::new();
        for trip in 0..200 {
            for w in 0..10 {
                let label = usize::from(w == 3 && trip % 4 == 0);
                examples.push(ex(trip * 10 + w, label, trip));
            }
        }
        let [train, val, test] = split_by_trip(examples, 2, [0.8, 0.1, 0.1], 1);
        assert_eq!(train.len() + val.len() + test.len(), 2000);
        let trips = |s: &[TaskExample]| s.iter().map(|e| e.trip_id.clone()).collect::<std::collections::HashSet<_>>();
        assert!(trips(&train).is_disjoint(&trips(&val)));
        assert!(trips(&train).is_disjoint(&trips(&test)));
        assert!(trips(&val).is_disjoint(&trips(&test)));
        assert_eq!(class_counts(&val, 2)[1], 5);
        assert_eq!(class_counts(&test, 2)[1], 5);
        assert!((train.len() as i64 - 1600).abs() <= 10);
    }

    #[test]
    fn subsample_keeps_every_class() {
        let examples: Vec<TaskExample> = (0..1000).map(|i| ex(i, usize::from(i % 100 == 0), i)).collect();
        let sub = stratified_subsample(&examples, 2, 100);
        let c = class_counts(&sub, 2);
        assert_eq!(c, vec![99, 1]);
    }
}

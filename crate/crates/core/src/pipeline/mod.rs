//! End-to-end runs on synthetic data: generate, calibrate, tokenize,
//! pretrain, fine-tune both tasks in the pretrained and scratch arms over
//! several seeds, evaluate, and write the reports.

pub mod manifest;
pub mod report;

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    compute_metrics, engineer_features, signal_channels, signal_matrix, train_cnn, train_glm, BaselineError,
    CnnConfig, GlmConfig, MetricReport, MetricsError,
};
use crate::calibration::{calibrate, CalibrationConfig, CalibrationError};
use crate::datagen::{generate_corpus, inject_collisions, write_labels, CollisionConfig, DatagenError, EventLabel, GeneratorConfig};
use crate::finetune::{
    Arm,     build_task_dataset, finetune, transfer_gain, FinetuneConfig, FinetuneError, FinetuneOutcome, TaskDataset,
    TaskKind, TaskSpec, TransferReport,
};
use crate::frames::{DecodedFrame, TripLog};
use crate::model::{save_checkpoint, CheckpointError, Model, ModelError};
use crate::pretrain::{write_metrics, MetricsRow, PretrainConfig, PretrainError, Pretrainer};
use crate::rng;
use crate::schema::{reference_schema, SignalSchema};
use crate::tokenizer::{write_token_file, SentinelMode, TokenFileError, TokenSequence, Tokenizer, TokenizerError};

pub use manifest::{list_files, sha256_file, verify_upstream, ManifestError, RunManifest, MANIFEST_FILE};
pub use report::{write_binary_table, write_multiclass_table, write_transfer_table, ReportRow};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("{path}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    TokenFile(#[from] TokenFileError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    use std::io::Write;
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serialisable") + "\n"))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> PipelineError + '_ {
    move |source| PipelineError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<(), PipelineError> {
    write_metrics(rows, create(path)?, true).map_err(csv_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub vehicles: usize,
    pub trips_per_vehicle: usize,
    pub trip_length_s: usize,
    /// Fraction of windows turned into collisions (0 leaves the corpus
    /// collision-free).
    pub collision_rate: f64,
}

impl CorpusConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            vehicles: self.vehicles,
            trips_per_vehicle: self.trips_per_vehicle,
            trip_length_s: self.trip_length_s,
            ..GeneratorConfig::default()
        }
    }

    pub fn collisions(&self) -> CollisionConfig {
        CollisionConfig {
            rate: self.collision_rate,
            ..CollisionConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub seed: u64,
    /// Collision-free corpus used for calibration and pretraining.
    pub pretrain_corpus: CorpusConfig,
    /// Downstream corpus for the binary task; its collision rate must
    /// leave enough negatives for every ratio.
    pub collision_corpus: CorpusConfig,
    /// Downstream corpus for the point-of-impact task.
    pub impact_corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub collision_finetune: FinetuneConfig,
    pub impact_finetune: FinetuneConfig,
    /// Training seeds; every arm runs once per seed.
    pub seeds: Vec<u64>,
    /// Ratio at which the binary task compares pretrained and scratch arms.
    pub transfer_ratio: f64,
    /// Further ratios run with the pretrained arm only.
    pub stress_ratios: Vec<f64>,
    pub baselines: bool,
    pub glm: GlmConfig,
    pub cnn: CnnConfig,
}

fn finetune_budget(steps: u64, batch_size: usize, lr: f64, eval_interval: u64, val_windows: usize) -> FinetuneConfig {
    FinetuneConfig {
        batch_size,
        steps,
        lr,
        warmup_steps: steps / 10,
        weight_decay: 0.01,
        clip_norm: 1.0,
        eval_interval,
        val_windows,
        seed: 0,
    }
}

impl DemoConfig {
    /// Small enough for tests: a few vehicles, a short pretraining run and
    /// a handful of fine-tuning steps.
    pub fn smoke(seed: u64) -> Self {
        let mut pretrain = PretrainConfig::tiny(seed);
        pretrain.steps = 30;
        pretrain.warmup_steps = 5;
        pretrain.eval_interval = 15;
        pretrain.eval_windows = 16;
        pretrain.holdout_fraction = 0.2;
        DemoConfig {
            seed,
            pretrain_corpus: CorpusConfig {
                vehicles: 6,
                trips_per_vehicle: 3,
                trip_length_s: 120,
                collision_rate: 0.0,
            },
            collision_corpus: CorpusConfig {
                vehicles: 12,
                trips_per_vehicle: 5,
                trip_length_s: 300,
                collision_rate: 0.008,
            },
            impact_corpus: CorpusConfig {
                vehicles: 6,
                trips_per_vehicle: 4,
                trip_length_s: 200,
                collision_rate: 0.2,
            },
            pretrain,
            collision_finetune: finetune_budget(12, 4, 1e-3, 6, 64),
            impact_finetune: finetune_budget(12, 4, 1e-3, 6, 64),
            seeds: vec![0, 1, 2],
            transfer_ratio: 10.0,
            stress_ratios: vec![50.0],
            baselines: true,
            glm: GlmConfig::default(),
            cnn: CnnConfig {
                steps: 40,
                ..CnnConfig::default()
            },
        }
    }

    /// The tiny-encoder budget used to check pretraining, transfer and the
    /// imbalance stress on synthetic data.
    pub fn standard(seed: u64) -> Self {
        DemoConfig {
            seed,
            pretrain_corpus: CorpusConfig {
                vehicles: 60,
                trips_per_vehicle: 10,
                trip_length_s: 300,
                collision_rate: 0.0,
            },
            collision_corpus: CorpusConfig {
                vehicles: 60,
                trips_per_vehicle: 10,
                trip_length_s: 500,
                collision_rate: 0.008,
            },
            impact_corpus: CorpusConfig {
                vehicles: 60,
                trips_per_vehicle: 10,
                trip_length_s: 500,
                collision_rate: 0.05,
            },
            pretrain: PretrainConfig::tiny(seed),
            collision_finetune: finetune_budget(150, 8, 5e-4, 50, 600),
            impact_finetune: finetune_budget(300, 8, 1e-3, 50, 600),
            seeds: vec![0, 1, 2],
            transfer_ratio: 10.0,
            stress_ratios: vec![100.0],
            baselines: true,
            glm: GlmConfig::default(),
            cnn: CnnConfig::default(),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "smoke" => Some(Self::smoke(seed)),
            "standard" => Some(Self::standard(seed)),
            _ => None,
        }
    }

    /// Replaces the root seed and the pretraining seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.seeds.is_empty() {
            return Err(PipelineError::Config("at least one training seed is needed".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(PipelineError::Config("training seeds must be distinct".into()));
        }
        if self.pretrain_corpus.collision_rate != 0.0 {
            return Err(PipelineError::Config("the pretraining corpus must be collision-free".into()));
        }
        for r in std::iter::once(self.transfer_ratio).chain(self.stress_ratios.iter().copied()) {
            if !(r > 0.0 && r.is_finite()) {
                return Err(PipelineError::Config(format!("ratio {r} must be positive")));
            }
        }
        self.pretrain.validate()?;
        self.collision_finetune.validate()?;
        self.impact_finetune.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub windows: usize,
    pub vocab_size: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: TaskKind,
    pub ratio: Option<f64>,
    /// `pretrained`, `scratch`, `glm` or `cnn`.
    pub model: String,
    pub seed: Option<u64>,
    pub best_step: Option<u64>,
    pub val_score: Option<f64>,
    pub test_score: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressPoint {
    pub ratio: f64,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub seed: u64,
    pub vocab_hash: String,
    pub pretrain: PretrainSummary,
    pub runs: Vec<RunRecord>,
    pub transfer: Vec<TransferReport>,
    /// Pretrained-arm binary score per ratio, transfer ratio first.
    pub stress: Vec<StressPoint>,
    /// Wall-clock seconds per stage; not serialised, so reruns compare equal.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl DemoSummary {
    pub fn runs_for<'a>(&'a self, task: TaskKind, ratio: Option<f64>, model: &'a str) -> impl Iterator<Item = &'a RunRecord> {
        self.runs
            .iter()
            .filter(move |r| r.task == task && r.ratio == ratio && r.model == model)
    }
}

/// A downstream corpus held in memory with its tokens and labels.
pub struct TaskCorpus {
    pub trips: Vec<TripLog>,
    pub tokens: Vec<TokenSequence>,
    pub labels: Vec<EventLabel>,
    /// (trip, window) of every token sequence.
    refs: Vec<(usize, usize)>,
}

impl TaskCorpus {
    pub fn new(schema: &SignalSchema, trips: Vec<TripLog>, tokens: Vec<TokenSequence>, labels: Vec<EventLabel>) -> Self {
        let fpw = schema.frames_per_window();
        let refs: Vec<(usize, usize)> = trips
            .iter()
            .enumerate()
            .flat_map(|(t, trip)| (0..trip.window_count(fpw)).map(move |w| (t, w)))
            .collect();
        assert_eq!(refs.len(), tokens.len(), "tokens must cover every window of the trips in order");
        TaskCorpus {
            trips,
            tokens,
            labels,
            refs,
        }
    }

    /// Raw frames of token window `index`.
    pub fn window(&self, index: usize, fpw: usize) -> &[DecodedFrame] {
        let (t, w) = self.refs[index];
        self.trips[t].window(w, fpw)
    }
}

pub fn build_task_corpus(
    schema: &SignalSchema,
    tokenizer: &Tokenizer,
    cfg: &CorpusConfig,
    seed: u64,
) -> Result<TaskCorpus, PipelineError> {
    let trips = generate_corpus(schema, &cfg.generator(), rng::derive_seed(seed, &[rng::label("trips")]))?;
    let (trips, labels) = inject_collisions(schema, trips, &cfg.collisions(), rng::derive_seed(seed, &[rng::label("inject")]))?;
    let tokens = tokenizer.tokenize_trips(&trips)?;
    Ok(TaskCorpus::new(schema, trips, tokens, labels))
}

fn task_key(spec: &TaskSpec) -> String {
    match spec.ratio {
        Some(r) => format!("{}-r{r}", spec.kind.name()),
        None => spec.kind.name().to_string(),
    }
}

fn save_run(dir: &Path, outcome: &FinetuneOutcome, kind: TaskKind, vocab_hash: &str) -> Result<(), PipelineError> {
    save_checkpoint(
        &dir.join("checkpoint"),
        &outcome.model,
        None,
        outcome.best_step,
        outcome.config.seed,
        vocab_hash,
    )?;
    write_metrics_file(&dir.join("metrics.csv"), &outcome.log)?;
    write_json(&dir.join("report.json"), &outcome.test_report)?;
    write_json(&dir.join("result.json"), &outcome.result())?;
    let path = dir.join("confusion.csv");
    outcome
        .test_confusion
        .write_csv(&kind.class_names(), create(&path)?)
        .map_err(csv_err(&path))
}

/// Fits the GLM once and the CNN once per seed on `data`, scoring the test
/// split.
fn run_baselines(
    schema: &SignalSchema,
    tokenizer: &Tokenizer,
    corpus: &TaskCorpus,
    data: &TaskDataset,
    cfg: &DemoConfig,
) -> Result<Vec<(String, Option<u64>, MetricReport)>, PipelineError> {
    let fpw = schema.frames_per_window();
    let k = data.n_classes();
    let labels = |split: &[crate::finetune::TaskExample]| split.iter().map(|e| e.label).collect::<Vec<_>>();
    let (train_y, test_y) = (labels(&data.train), labels(&data.test));
    let mut out = Vec::new();
    let feats = |split: &[crate::finetune::TaskExample]| {
        split
            .iter()
            .map(|e| engineer_features(corpus.window(e.index, fpw), schema).values)
            .collect::<Vec<_>>()
    };
    let glm = train_glm(&feats(&data.train), &train_y, k, Some(&data.class_weights), &cfg.glm)?;
    let (report, _) = compute_metrics(&test_y, &glm.predict(&feats(&data.test)), k)?;
    out.push(("glm".to_string(), None, report));
    let calib = tokenizer.calibration();
    let signals = |split: &[crate::finetune::TaskExample]| {
        split
            .iter()
            .map(|e| signal_matrix(corpus.window(e.index, fpw), schema, calib))
            .collect::<Vec<_>>()
    };
    let (train_x, test_x) = (signals(&data.train), signals(&data.test));
    debug_assert!(train_x.iter().all(|x| x.len() == fpw * signal_channels(schema)));
    for &seed in &cfg.seeds {
        let cnn_cfg = CnnConfig {
            seed,
            ..cfg.cnn.clone()
        };
        let net = train_cnn(&train_x, &train_y, fpw, k, Some(&data.class_weights), &cnn_cfg)?;
        let (report, _) = compute_metrics(&test_y, &net.predict(&test_x), k)?;
        out.push(("cnn".to_string(), Some(seed), report));
    }
    Ok(out)
}

/// Runs every stage under `out`, writing all artifacts there, and returns
/// the summary also stored as `reports/summary.json`. The run manifest is
/// left to the caller.
pub fn run_demo(cfg: &DemoConfig, out: &Path) -> Result<DemoSummary, PipelineError> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: String, timings: &mut Vec<(String, f64)>| {
        timings.push((name, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let schema = reference_schema();
    write_text(&out.join("schema.toml"), &schema.to_toml())?;

    log::info!("generating pretraining corpus");
    let pre_trips = generate_corpus(
        &schema,
        &cfg.pretrain_corpus.generator(),
        rng::derive_seed(seed, &[rng::label("pretrain-corpus")]),
    )?;
    let calib_cfg = CalibrationConfig {
        vehicles: cfg.pretrain_corpus.vehicles,
        trips_per_vehicle: cfg.pretrain_corpus.trips_per_vehicle,
        ..CalibrationConfig::default()
    };
    let calib = calibrate(&pre_trips, &schema, &calib_cfg, rng::derive_seed(seed, &[rng::label("calibration")]))?;
    write_text(&out.join("calibration.toml"), &calib.to_toml())?;
    let tokenizer = Tokenizer::new(schema.clone(), calib, SentinelMode::PerFeature)?;
    let vocab = tokenizer.vocab();
    write_text(&out.join("vocab.txt"), &vocab.to_text())?;
    let pre_tokens = tokenizer.tokenize_trips(&pre_trips)?;
    drop(pre_trips);
    let path = out.join("data/pretrain.tokens");
    write_token_file(&pre_tokens, create(&path)?)?;

    let mut corpora = Vec::new();
    for (name, c) in [("collision", &cfg.collision_corpus), ("impact", &cfg.impact_corpus)] {
        log::info!("generating {name} corpus");
        let tc = build_task_corpus(&schema, &tokenizer, c, rng::derive_seed(seed, &[rng::label(name)]))?;
        write_token_file(&tc.tokens, create(&out.join(format!("data/{name}.tokens")))?)?;
        let path = out.join(format!("data/{name}-labels.csv"));
        write_labels(&tc.labels, create(&path)?)?;
        corpora.push(tc);
    }
    let [collision, impact]: [TaskCorpus; 2] = corpora.try_into().ok().expect("two corpora");
    lap("data".into(), &mut timings);

    log::info!("pretraining");
    let pretrainer = Pretrainer::new(&pre_tokens, vocab, cfg.pretrain.clone())?;
    let pre_dir = out.join("pretrain");
    let pre = pretrainer.run(None, Some(&pre_dir))?;
    save_checkpoint(&pre_dir.join("checkpoint"), &pre.model, Some(&pre.optimizer), pre.step, cfg.pretrain.seed, vocab.hash())?;
    write_metrics_file(&pre_dir.join("metrics.csv"), &pre.log)?;
    let pretrain = PretrainSummary {
        windows: pre_tokens.len(),
        vocab_size: vocab.size(),
        steps: pre.step,
        final_loss: pre.log.last().map_or(f64::NAN, |r| r.loss),
        heldout_loss: pre.final_eval.loss,
        heldout_accuracy: pre.final_eval.accuracy(),
    };
    drop(pre_tokens);
    lap("pretrain".into(), &mut timings);
    let scratch_shape: crate::model::ModelConfig = pre.model.config().clone();

    let split_seed = rng::derive_seed(seed, &[rng::label("split")]);
    let mut plan: Vec<(TaskSpec, bool)> = vec![(TaskSpec::collision(cfg.transfer_ratio, split_seed), true)];
    plan.extend(cfg.stress_ratios.iter().map(|&r| (TaskSpec::collision(r, split_seed), false)));
    plan.push((TaskSpec::impact(split_seed), true));

    let mut runs = Vec::new();
    let mut transfer = Vec::new();
    for (spec, with_scratch) in plan {
        let (corpus, budget) = match spec.kind {
            TaskKind::Collision => (&collision, &cfg.collision_finetune),
            TaskKind::Impact => (&impact, &cfg.impact_finetune),
        };
        let data = build_task_dataset(&corpus.tokens, &corpus.labels, &spec)?;
        let key = task_key(&spec);
        let (mut pre_results, mut scratch_results) = (Vec::new(), Vec::new());
        for &s in &cfg.seeds {
            let run_cfg = FinetuneConfig {
                seed: s,
                ..budget.clone()
            };
            let arms: Vec<Result<&Model<f32>, &crate::model::ModelConfig>> = if with_scratch {
                vec![Ok(&pre.model), Err(&scratch_shape)]
            } else {
                vec![Ok(&pre.model)]
            };
            for init in arms {
                let o = finetune(&corpus.tokens, &data, init, &run_cfg)?;
                log::info!("{key} {} seed {s}: test {:.4}", o.arm.name(), o.test_score);
                save_run(&out.join(format!("finetune/{key}/{}-seed{s}", o.arm.name())), &o, spec.kind, vocab.hash())?;
                match o.arm {
                    Arm::Pretrained => pre_results.push(o.result()),
                    Arm::Scratch => scratch_results.push(o.result()),
                }
                runs.push(RunRecord {
                    task: spec.kind,
                    ratio: spec.ratio,
                    model: o.arm.name().to_string(),
                    seed: Some(s),
                    best_step: Some(o.best_step),
                    val_score: Some(o.best_val_score),
                    test_score: o.test_score,
                    report: o.test_report,
                });
            }
        }
        if with_scratch {
            transfer.push(transfer_gain(&pre_results, &scratch_results)?);
        }
        lap(format!("finetune {key}"), &mut timings);
        if cfg.baselines {
            log::info!("{key} baselines");
            for (model, s, report) in run_baselines(&schema, &tokenizer, corpus, &data, cfg)? {
                runs.push(RunRecord {
                    task: spec.kind,
                    ratio: spec.ratio,
                    test_score: spec.kind.score(&report),
                    model,
                    seed: s,
                    best_step: None,
                    val_score: None,
                    report,
                });
            }
            lap(format!("baselines {key}"), &mut timings);
        }
    }

    let stress = std::iter::once(cfg.transfer_ratio)
        .chain(cfg.stress_ratios.iter().copied())
        .map(|ratio| {
            let per_seed: Vec<f64> = runs
                .iter()
                .filter(|r| r.task == TaskKind::Collision && r.ratio == Some(ratio) && r.model == "pretrained")
                .map(|r| r.test_score)
                .collect();
            StressPoint {
                ratio,
                mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                per_seed,
            }
        })
        .collect();
    let summary = DemoSummary {
        seed,
        vocab_hash: vocab.hash().to_string(),
        pretrain,
        runs,
        transfer,
        stress,
        timings,
    };
    write_reports(out, &summary)?;
    Ok(summary)
}

fn report_rows(summary: &DemoSummary, task: TaskKind) -> Vec<ReportRow> {
    summary
        .runs
        .iter()
        .filter(|r| r.task == task)
        .map(|r| ReportRow {
            model: r.model.clone(),
            ratio: r.ratio,
            seed: r.seed,
            report: r.report.clone(),
        })
        .collect()
}

pub fn write_reports(out: &Path, summary: &DemoSummary) -> Result<(), PipelineError> {
    let dir = out.join("reports");
    let path = dir.join("collision.csv");
    write_binary_table(&report_rows(summary, TaskKind::Collision), create(&path)?).map_err(csv_err(&path))?;
    let path = dir.join("impact.csv");
    write_multiclass_table(
        &report_rows(summary, TaskKind::Impact),
        &TaskKind::Impact.class_names(),
        create(&path)?,
    )
    .map_err(csv_err(&path))?;
    let path = dir.join("transfer.csv");
    write_transfer_table(&summary.transfer, create(&path)?).map_err(csv_err(&path))?;
    write_json(&dir.join("summary.json"), summary)
}

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

use canlm::calibration::{calibrate, CalibrationConfig, CalibrationTable};
use canlm::datagen::{generate_corpus, inject_collisions, read_labels, write_labels, EventLabel, GeneratorConfig, CollisionConfig};
use canlm::finetune::{
    build_task_dataset, evaluate_examples, finetune, transfer_gain, ArmResult, FinetuneConfig, TaskKind, TaskSpec,
};
use canlm::frames::{read_trips, write_trips, TripLog};
use canlm::model::gradcheck::tiny_config;
use canlm::model::{gradient_check, load_checkpoint, save_checkpoint, Head};
use canlm::pipeline::{
    run_demo, verify_upstream, write_binary_table, write_json, write_metrics_file, write_multiclass_table,
    write_transfer_table, DemoConfig, ReportRow, RunManifest,
};
use canlm::pretrain::{EncoderShape, PretrainConfig, Pretrainer};
use canlm::rng;
use canlm::schema::{load_schema, reference_schema, SignalSchema};
use canlm::tokenizer::{dump_text, read_token_file, write_token_file, SentinelMode, TokenSequence, Tokenizer, Vocabulary};

use crate::error::{fail, Category};
use crate::{Cli, Command, Global, HeadArg, SentinelArg, SplitArg, TaskArg};

/// Reads an input file after checking it against its run manifest, if any.
fn read_input(path: &Path, manifest: &mut RunManifest) -> Result<Vec<u8>> {
    verify_upstream(path).with_context(|| format!("checking {}", path.display()))?;
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    manifest.add_input(path)?;
    Ok(bytes)
}

fn read_text(path: &Path, manifest: &mut RunManifest) -> Result<String> {
    String::from_utf8(read_input(path, manifest)?).with_context(|| format!("{} is not UTF-8", path.display()))
}

fn file_config<T: DeserializeOwned>(global: &Global) -> Result<Option<T>> {
    let Some(path) = &global.config else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(Some(cfg))
}

fn json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("configs serialise")
}

fn out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(io::BufWriter::new(f))
}

fn finish(manifest: RunManifest, out: &Path, start: Instant) -> Result<()> {
    let m = manifest.finish(out, start.elapsed().as_secs_f64())?;
    println!(
        "{}",
        serde_json::json!({"command": m.command, "out": out.display().to_string(), "files": m.outputs.len()})
    );
    Ok(())
}

fn schema_from(path: Option<&Path>, manifest: &mut RunManifest) -> Result<SignalSchema> {
    match path {
        Some(p) => Ok(load_schema(&read_text(p, manifest)?)?),
        None => Ok(reference_schema()),
    }
}

/// A tokenize output directory: schema, calibration, vocabulary, tokens
/// and optionally labels, cross-checked on load.
struct DataDir {
    tokenizer: Tokenizer,
    tokens: Vec<TokenSequence>,
    labels: Option<Vec<EventLabel>>,
}

impl DataDir {
    fn load(dir: &Path, manifest: &mut RunManifest) -> Result<Self> {
        let schema = load_schema(&read_text(&dir.join("schema.toml"), manifest)?)?;
        let calibration = CalibrationTable::from_toml(&read_text(&dir.join("calibration.toml"), manifest)?)?;
        let vocab = Vocabulary::load(&read_text(&dir.join("vocab.txt"), manifest)?, &schema, &calibration)?;
        let tokenizer = Tokenizer::with_vocabulary(schema, calibration, vocab)?;
        let tokens = read_token_file(&read_input(&dir.join("tokens.bin"), manifest)?[..])?;
        if let Some(s) = tokens.iter().find(|s| *s.vocab_hash != *tokenizer.vocab().hash()) {
            return Err(fail(
                Category::HashMismatch,
                format!(
                    "tokens were produced under vocabulary {}, the data directory holds {}",
                    s.vocab_hash,
                    tokenizer.vocab().hash()
                ),
            ));
        }
        let labels_path = dir.join("labels.csv");
        let labels = if labels_path.is_file() {
            Some(read_labels(&read_input(&labels_path, manifest)?[..])?)
        } else {
            None
        };
        Ok(DataDir {
            tokenizer,
            tokens,
            labels,
        })
    }

    fn labels(&self, dir: &Path) -> Result<&[EventLabel]> {
        self.labels.as_deref().ok_or_else(|| {
            fail(
                Category::MissingInput,
                format!("{} has no labels.csv; pass --labels to tokenize", dir.display()),
            )
        })
    }
}

fn task_spec(task: TaskArg, ratio: f64, split_seed: u64) -> TaskSpec {
    match task {
        TaskArg::Collision => TaskSpec::collision(ratio, split_seed),
        TaskArg::Impact => TaskSpec::impact(split_seed),
    }
}

fn report_table(out: &Path, kind: TaskKind, rows: &[ReportRow]) -> Result<()> {
    let path = out.join("table.csv");
    match kind {
        TaskKind::Collision => write_binary_table(rows, create(&path)?)?,
        TaskKind::Impact => write_multiclass_table(rows, &kind.class_names(), create(&path)?)?,
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let start = Instant::now();
    let seed = g.seed.unwrap_or(0);
    match &cli.command {
        Command::Generate {
            schema,
            vehicles,
            trips,
            seconds,
            collision_rate,
            out,
        } => {
            let gen = GeneratorConfig {
                vehicles: *vehicles,
                trips_per_vehicle: *trips,
                trip_length_s: *seconds,
                ..GeneratorConfig::default()
            };
            let col = CollisionConfig {
                rate: *collision_rate,
                ..CollisionConfig::default()
            };
            let cfg = serde_json::json!({
                "vehicles": vehicles, "trips_per_vehicle": trips, "trip_length_s": seconds,
                "collision_rate": collision_rate, "missing_rate": gen.missing_rate,
                "error_rate": gen.error_rate, "outlier_rate": gen.outlier_rate,
                "delta_v": [col.delta_v.0, col.delta_v.1], "angle_jitter_deg": col.angle_jitter_deg,
            });
            let mut manifest = RunManifest::new("generate", cfg, seed, g.deterministic);
            let schema = schema_from(schema.as_deref(), &mut manifest)?;
            let corpus = generate_corpus(&schema, &gen, seed)?;
            let (corpus, labels) = inject_collisions(&schema, corpus, &col, rng::derive_seed(seed, &[rng::label("inject")]))?;
            out_dir(out)?;
            write_file(&out.join("schema.toml"), schema.to_toml().as_bytes())?;
            write_trips(&schema, &corpus, create(&out.join("trips.csv"))?)?;
            write_labels(&labels, create(&out.join("labels.csv"))?)?;
            finish(manifest, out, start)
        }
        Command::Calibrate {
            trips,
            schema,
            sample_vehicles,
            sample_trips,
            out,
        } => {
            let mut manifest = RunManifest::new("calibrate", serde_json::Value::Null, seed, g.deterministic);
            let schema = schema_from(schema.as_deref(), &mut manifest)?;
            let corpus = read_trips(&schema, &read_input(trips, &mut manifest)?[..])?;
            let mut per_vehicle: BTreeMap<&str, usize> = BTreeMap::new();
            for t in &corpus {
                *per_vehicle.entry(&*t.vehicle_id).or_default() += 1;
            }
            let cfg = CalibrationConfig {
                vehicles: sample_vehicles.unwrap_or(per_vehicle.len()),
                trips_per_vehicle: sample_trips.unwrap_or_else(|| per_vehicle.values().copied().min().unwrap_or(0)),
                ..CalibrationConfig::default()
            };
            manifest.config = serde_json::json!({
                "sample_vehicles": sample_vehicles, "sample_trips": sample_trips,
                "trim_fraction": cfg.trim_fraction, "quantile_clip": cfg.quantile_clip,
            });
            let table = calibrate(&corpus, &schema, &cfg, seed)?;
            out_dir(out)?;
            write_file(&out.join("schema.toml"), schema.to_toml().as_bytes())?;
            write_file(&out.join("calibration.toml"), table.to_toml().as_bytes())?;
            finish(manifest, out, start)
        }
        Command::Tokenize {
            trips,
            calibration,
            schema,
            labels,
            sentinels,
            out,
        } => {
            let mode = match sentinels {
                SentinelArg::PerFeature => SentinelMode::PerFeature,
                SentinelArg::Shared => SentinelMode::Shared,
            };
            let cfg = serde_json::json!({ "sentinels": format!("{sentinels:?}") });
            let mut manifest = RunManifest::new("tokenize", cfg, seed, g.deterministic);
            let schema = schema_from(schema.as_deref(), &mut manifest)?;
            let table = CalibrationTable::from_toml(&read_text(calibration, &mut manifest)?)?;
            let corpus = read_trips(&schema, &read_input(trips, &mut manifest)?[..])?;
            let label_bytes = match labels {
                Some(p) => {
                    let bytes = read_input(p, &mut manifest)?;
                    read_labels(&bytes[..])?;
                    Some(bytes)
                }
                None => None,
            };
            let tokenizer = Tokenizer::new(schema, table, mode)?;
            let tokens = tokenizer.tokenize_trips(&corpus)?;
            out_dir(out)?;
            write_file(&out.join("schema.toml"), tokenizer.schema().to_toml().as_bytes())?;
            write_file(&out.join("calibration.toml"), tokenizer.calibration().to_toml().as_bytes())?;
            write_file(&out.join("vocab.txt"), tokenizer.vocab().to_text().as_bytes())?;
            write_token_file(&tokens, create(&out.join("tokens.bin"))?)?;
            if let Some(bytes) = label_bytes {
                write_file(&out.join("labels.csv"), &bytes)?;
            }
            finish(manifest, out, start)
        }
        Command::Detokenize { data, out } => {
            let mut manifest = RunManifest::new("detokenize", serde_json::Value::Null, seed, g.deterministic);
            let d = DataDir::load(data, &mut manifest)?;
            let mut trips: Vec<TripLog> = Vec::new();
            for seq in &d.tokens {
                let frames = d.tokenizer.detokenize(seq)?;
                match trips.last_mut() {
                    Some(t) if t.vehicle_id == seq.origin.vehicle_id && t.trip_id == seq.origin.trip_id => {
                        t.frames.extend(frames)
                    }
                    _ => trips.push(TripLog {
                        vehicle_id: seq.origin.vehicle_id.clone(),
                        trip_id: seq.origin.trip_id.clone(),
                        frames,
                    }),
                }
            }
            out_dir(out)?;
            write_trips(d.tokenizer.schema(), &trips, create(&out.join("trips.csv"))?)?;
            write_file(&out.join("tokens.txt"), dump_text(&d.tokens, d.tokenizer.vocab()).as_bytes())?;
            finish(manifest, out, start)
        }
        Command::Pretrain {
            data,
            steps,
            resume,
            out,
        } => {
            let mut cfg = file_config::<PretrainConfig>(g)?.unwrap_or_else(|| PretrainConfig::tiny(seed));
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            let mut manifest = RunManifest::new("pretrain", json(&cfg), cfg.seed, g.deterministic);
            let d = DataDir::load(data, &mut manifest)?;
            let vocab = d.tokenizer.vocab();
            let resume = match resume {
                Some(dir) => {
                    verify_upstream(&dir.join("weights.bin"))?;
                    manifest.add_input(&dir.join("weights.bin")).ok();
                    Some(load_checkpoint::<f32>(dir, Some(vocab.hash()))?)
                }
                None => None,
            };
            out_dir(out)?;
            let trainer = Pretrainer::new(&d.tokens, vocab, cfg.clone())?;
            let outcome = trainer.run(resume, Some(out))?;
            save_checkpoint(&out.join("checkpoint"), &outcome.model, Some(&outcome.optimizer), outcome.step, cfg.seed, vocab.hash())?;
            write_metrics_file(&out.join("metrics.csv"), &outcome.log)?;
            write_json(
                &out.join("summary.json"),
                &serde_json::json!({
                    "step": outcome.step,
                    "heldout_loss": outcome.final_eval.loss,
                    "heldout_accuracy": outcome.final_eval.accuracy(),
                    "heldout_scored": outcome.final_eval.scored,
                }),
            )?;
            finish(manifest, out, start)
        }
        Command::Finetune {
            task,
            ratio,
            ckpt,
            from_scratch,
            data,
            split_seed,
            steps,
            out,
        } => {
            let spec = task_spec(*task, *ratio, *split_seed);
            let defaults = DemoConfig::standard(0);
            let mut cfg = file_config::<FinetuneConfig>(g)?.unwrap_or_else(|| match spec.kind {
                TaskKind::Collision => defaults.collision_finetune.clone(),
                TaskKind::Impact => defaults.impact_finetune.clone(),
            });
            cfg.seed = seed;
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            let config = serde_json::json!({ "task": spec, "finetune": cfg, "from_scratch": from_scratch });
            let mut manifest = RunManifest::new("finetune", config, seed, g.deterministic);
            let d = DataDir::load(data, &mut manifest)?;
            let vocab = d.tokenizer.vocab();
            let dataset = build_task_dataset(&d.tokens, d.labels(data)?, &spec)?;
            let pretrained = match ckpt {
                Some(dir) => {
                    verify_upstream(&dir.join("weights.bin"))?;
                    manifest.add_input(&dir.join("weights.bin")).ok();
                    Some(load_checkpoint::<f32>(dir, Some(vocab.hash()))?.model)
                }
                None => None,
            };
            let window = d.tokens.first().map_or(0, |s| s.ids.len());
            let shape = match &pretrained {
                Some(m) => m.config().clone(),
                None => EncoderShape::tiny().to_config(vocab.size(), window + 1, Head::Mlm),
            };
            let init = match (&pretrained, from_scratch) {
                (Some(m), false) => Ok(m),
                (_, true) => Err(&shape),
                (None, false) => return Err(fail(Category::Usage, "--ckpt is required unless --from-scratch is given")),
            };
            let outcome = finetune(&d.tokens, &dataset, init, &cfg)?;
            out_dir(out)?;
            save_checkpoint(&out.join("checkpoint"), &outcome.model, None, outcome.best_step, seed, vocab.hash())?;
            write_metrics_file(&out.join("metrics.csv"), &outcome.log)?;
            write_json(&out.join("report.json"), &outcome.test_report)?;
            write_json(&out.join("result.json"), &outcome.result())?;
            outcome
                .test_confusion
                .write_csv(&spec.kind.class_names(), create(&out.join("confusion.csv"))?)?;
            let row = ReportRow {
                model: outcome.arm.name().to_string(),
                ratio: spec.ratio,
                seed: Some(seed),
                report: outcome.test_report.clone(),
            };
            report_table(out, spec.kind, &[row])?;
            finish(manifest, out, start)
        }
        Command::Evaluate {
            ckpt,
            data,
            task,
            ratio,
            split_seed,
            split,
            name,
            out,
        } => {
            let spec = task_spec(*task, *ratio, *split_seed);
            let config = serde_json::json!({ "task": spec, "split": format!("{split:?}").to_lowercase(), "name": name });
            let mut manifest = RunManifest::new("evaluate", config, seed, g.deterministic);
            let d = DataDir::load(data, &mut manifest)?;
            verify_upstream(&ckpt.join("weights.bin"))?;
            manifest.add_input(&ckpt.join("weights.bin")).ok();
            let model = load_checkpoint::<f32>(ckpt, Some(d.tokenizer.vocab().hash()))?.model;
            match model.config().head {
                Head::Classifier { n_classes } if n_classes == spec.kind.n_classes() => {}
                _ => {
                    return Err(fail(
                        Category::Validation,
                        format!("checkpoint head does not match the {} task", spec.kind.name()),
                    ))
                }
            }
            let dataset = build_task_dataset(&d.tokens, d.labels(data)?, &spec)?;
            let examples = match split {
                SplitArg::Train => &dataset.train,
                SplitArg::Val => &dataset.val,
                SplitArg::Test => &dataset.test,
            };
            let (report, confusion) = evaluate_examples(&model, &d.tokens, examples, spec.kind.n_classes())?;
            out_dir(out)?;
            write_json(&out.join("report.json"), &report)?;
            confusion.write_csv(&spec.kind.class_names(), create(&out.join("confusion.csv"))?)?;
            let row = ReportRow {
                model: name.clone(),
                ratio: spec.ratio,
                seed: g.seed,
                report,
            };
            report_table(out, spec.kind, &[row])?;
            print!("{}", fs::read_to_string(out.join("table.csv"))?);
            finish(manifest, out, start)
        }
        Command::Report { compare, out } => {
            let mut manifest = RunManifest::new("report", serde_json::json!({ "compare": compare }), seed, g.deterministic);
            let mut arms = Vec::new();
            for dir in compare {
                let mut results = Vec::new();
                for path in find_results(dir)? {
                    let r: ArmResult = serde_json::from_str(&read_text(&path, &mut manifest)?)
                        .with_context(|| format!("parsing {}", path.display()))?;
                    results.push(r);
                }
                if results.is_empty() {
                    return Err(fail(
                        Category::MissingInput,
                        format!("no result.json below {}", dir.display()),
                    ));
                }
                arms.push(results);
            }
            let report = transfer_gain(&arms[0], &arms[1])?;
            let mut table = Vec::new();
            write_transfer_table(std::slice::from_ref(&report), &mut table)?;
            io::stdout().write_all(&table)?;
            if let Some(out) = out {
                out_dir(out)?;
                write_file(&out.join("transfer.csv"), &table)?;
                write_json(&out.join("transfer.json"), &report)?;
                manifest.finish(out, start.elapsed().as_secs_f64())?;
            }
            Ok(())
        }
        Command::Gradcheck { head, out } => {
            let heads: Vec<Head> = match head {
                HeadArg::Mlm => vec![Head::Mlm],
                HeadArg::Classifier => vec![Head::Classifier { n_classes: 3 }],
                HeadArg::Both => vec![Head::Mlm, Head::Classifier { n_classes: 3 }],
            };
            let mut reports = Vec::new();
            for h in heads {
                let r = gradient_check(&tiny_config(h), seed)?;
                println!(
                    "{}",
                    serde_json::json!({
                        "head": r.head, "params": r.n_params, "max_rel_error": r.max_rel_error,
                        "tolerance": r.tolerance, "passed": r.passed(),
                    })
                );
                reports.push(r);
            }
            if let Some(out) = out {
                let manifest = RunManifest::new("gradcheck", serde_json::json!({ "head": format!("{head:?}") }), seed, g.deterministic);
                out_dir(out)?;
                write_json(&out.join("gradcheck.json"), &reports)?;
                manifest.finish(out, start.elapsed().as_secs_f64())?;
            }
            if let Some(bad) = reports.iter().find(|r| !r.passed()) {
                return Err(fail(
                    Category::Validation,
                    format!("gradient check failed: max relative error {:.3e}", bad.max_rel_error),
                ));
            }
            Ok(())
        }
        Command::Demo { preset, out } => {
            let mut cfg = match file_config::<DemoConfig>(g)? {
                Some(c) => c,
                None => DemoConfig::preset(preset, seed)
                    .ok_or_else(|| fail(Category::Usage, format!("unknown preset `{preset}` (smoke, standard)")))?,
            };
            if let Some(s) = g.seed {
                cfg = cfg.with_seed(s);
            }
            let manifest = RunManifest::new("demo", json(&cfg), cfg.seed, g.deterministic);
            out_dir(out)?;
            let summary = run_demo(&cfg, out)?;
            for t in &summary.transfer {
                log::info!("{} transfer gain {:+.4} ± {:.4}", t.task.name(), t.mean_gain, t.std_gain);
            }
            finish(manifest, out, start)
        }
    }
}

/// `dir/result.json`, or every `result.json` below `dir` in sorted order.
fn find_results(dir: &Path) -> Result<Vec<PathBuf>> {
    let direct = dir.join("result.json");
    if direct.is_file() {
        return Ok(vec![direct]);
    }
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "result.json") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

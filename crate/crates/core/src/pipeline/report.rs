//! Delimited metric tables: a binary layout (model, ratio, precision,
//! recall, F1 of the positive class) and a multiclass layout (per-class
//! rows followed by macro and weighted averages), plus transfer-gain tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::MetricReport;
use crate::finetune::TransferReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub ratio: Option<f64>,
    pub seed: Option<u64>,
    pub report: MetricReport,
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Groups rows by (model, ratio) in first-appearance order.
fn groups(rows: &[ReportRow]) -> Vec<Vec<&ReportRow>> {
    let mut out: Vec<Vec<&ReportRow>> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|g| g[0].model == r.model && g[0].ratio == r.ratio) {
            Some(g) => g.push(r),
            None => out.push(vec![r]),
        }
    }
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// One row per run, then a `mean` row per (model, ratio) group holding
/// more than one seed.
pub fn write_binary_table<W: Write>(rows: &[ReportRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "ratio", "seed", "precision", "recall", "f1", "support"])?;
    for g in groups(rows) {
        for r in &g {
            let p = r.report.positive();
            w.write_record([
                r.model.clone(),
                opt(r.ratio),
                opt(r.seed),
                fmt(p.precision),
                fmt(p.recall),
                fmt(p.f1),
                p.support.to_string(),
            ])?;
        }
        if g.len() > 1 {
            let p = |f: fn(&MetricReport) -> f64| fmt(mean(g.iter().map(|r| f(&r.report))));
            w.write_record([
                g[0].model.clone(),
                opt(g[0].ratio),
                "mean".into(),
                p(|r| r.positive().precision),
                p(|r| r.positive().recall),
                p(|r| r.positive().f1),
                g[0].report.positive().support.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-class rows, then `macro avg` and `weighted avg`, for every run.
pub fn write_multiclass_table<W: Write>(rows: &[ReportRow], class_names: &[&str], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "seed", "class", "precision", "recall", "f1", "support"])?;
    for r in rows {
        let m = &r.report;
        for (c, pc) in m.per_class.iter().enumerate() {
            let name = class_names.get(c).map_or_else(|| c.to_string(), |s| s.to_string());
            w.write_record([
                r.model.clone(),
                opt(r.seed),
                name,
                fmt(pc.precision),
                fmt(pc.recall),
                fmt(pc.f1),
                pc.support.to_string(),
            ])?;
        }
        for (name, a) in [("macro avg", &m.macro_avg), ("weighted avg", &m.weighted)] {
            w.write_record([
                r.model.clone(),
                opt(r.seed),
                name.into(),
                fmt(a.precision),
                fmt(a.recall),
                fmt(a.f1),
                m.total.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-seed pretrained/scratch scores and gains, then the mean and the
/// standard deviation of the gain per task.
pub fn write_transfer_table<W: Write>(reports: &[TransferReport], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "seed", "pretrained", "scratch", "gain"])?;
    for t in reports {
        for s in &t.per_seed {
            w.write_record([
                t.task.name().to_string(),
                s.seed.to_string(),
                fmt(s.pretrained),
                fmt(s.scratch),
                fmt(s.gain),
            ])?;
        }
        w.write_record([
            t.task.name().to_string(),
            "mean".into(),
            fmt(t.mean_pretrained),
            fmt(t.mean_scratch),
            fmt(t.mean_gain),
        ])?;
        w.write_record([
            t.task.name().to_string(),
            "std".into(),
            String::new(),
            String::new(),
            fmt(t.std_gain),
        ])?;
    }
    w.flush()?;
    Ok(())
}

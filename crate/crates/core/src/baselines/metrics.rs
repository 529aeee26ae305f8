//! Confusion matrices and precision / recall / F1 with macro and
//! support-weighted averages.

use std::io::Write;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("truth has {truth} labels but predictions have {pred}")]
    Length { truth: usize, pred: usize },
    #[error("label {label} outside 0..{k}")]
    Label { label: usize, k: usize },
    #[error("need at least one class")]
    NoClasses,
}

/// `counts[t * k + p]`: samples of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(truth: &[usize], pred: &[usize], k: usize) -> Result<Self, MetricsError> {
        if k == 0 {
            return Err(MetricsError::NoClasses);
        }
        if truth.len() != pred.len() {
            return Err(MetricsError::Length {
                truth: truth.len(),
                pred: pred.len(),
            });
        }
        let mut counts = vec![0u64; k * k];
        for (&t, &p) in truth.iter().zip(pred) {
            if let Some(&label) = [t, p].iter().find(|&&l| l >= k) {
                return Err(MetricsError::Label { label, k });
            }
            counts[t * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, class)).sum()
    }

    /// Rows = true class, columns = predicted, with a header row.
    pub fn write_csv<W: Write>(&self, names: &[&str], out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let name = |i: usize| names.get(i).map_or_else(|| i.to_string(), |s| s.to_string());
        let mut header = vec!["true\\pred".to_string()];
        header.extend((0..self.k).map(name));
        w.write_record(&header)?;
        for t in 0..self.k {
            let mut rec = vec![name(t)];
            rec.extend((0..self.k).map(|p| self.get(t, p).to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a ratio had a zero denominator and was defined as 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub accuracy: f64,
    pub total: u64,
}

impl MetricReport {
    /// Metrics of class 1, the positive class of a binary task.
    pub fn positive(&self) -> &ClassMetrics {
        &self.per_class[1.min(self.per_class.len() - 1)]
    }

    pub fn any_undefined(&self) -> bool {
        self.per_class.iter().any(|c| c.undefined)
    }
}

fn ratio(num: u64, den: u64, undefined: &mut bool) -> f64 {
    if den == 0 {
        *undefined = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report_from_confusion(cm: &ConfusionMatrix) -> MetricReport {
    let k = cm.k;
    let total = cm.total();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let mut undefined = false;
            let precision = ratio(tp, cm.predicted(c), &mut undefined);
            let recall = ratio(tp, cm.support(c), &mut undefined);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                undefined = true;
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cm.support(c),
                undefined,
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let wmean = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|c| c.support as f64 * f(c)).sum::<f64>() / total as f64
        }
    };
    let correct: u64 = (0..k).map(|c| cm.get(c, c)).sum();
    MetricReport {
        macro_avg: Averages {
            precision: mean(|c| c.precision),
            recall: mean(|c| c.recall),
            f1: mean(|c| c.f1),
        },
        weighted: Averages {
            precision: wmean(|c| c.precision),
            recall: wmean(|c| c.recall),
            f1: wmean(|c| c.f1),
        },
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        total,
        per_class,
    }
}

pub fn compute_metrics(truth: &[usize], pred: &[usize], k: usize) -> Result<(MetricReport, ConfusionMatrix), MetricsError> {
    let cm = ConfusionMatrix::new(truth, pred, k)?;
    Ok((report_from_confusion(&cm), cm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_matrix(rows: &[&[usize]]) -> (Vec<usize>, Vec<usize>) {
        let mut t = Vec::new();
        let mut p = Vec::new();
        for (ti, row) in rows.iter().enumerate() {
            for (pi, &n) in row.iter().enumerate() {
                t.extend(std::iter::repeat_n(ti, n));
                p.extend(std::iter::repeat_n(pi, n));
            }
        }
        (t, p)
    }

    #[test]
    fn binary_example_by_hand() {
        let (t, p) = from_matrix(&[&[90, 10], &[5, 95]]);
        let (r, cm) = compute_metrics(&t, &p, 2).unwrap();
        assert_eq!(cm.total(), 200);
        let pos = r.positive();
        assert!((pos.precision - 95.0 / 105.0).abs() < 1e-15);
        assert_eq!(pos.recall, 0.95);
        let f1 = 2.0 * (95.0 / 105.0) * 0.95 / (95.0 / 105.0 + 0.95);
        assert!((pos.f1 - f1).abs() < 1e-15);
        assert!((pos.f1 - 0.9268).abs() < 5e-5);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let t = vec![0, 1, 2, 2, 1];
        let (r, _) = compute_metrics(&t, &t, 3).unwrap();
        assert!(r.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!(r.macro_avg.f1, 1.0);
        assert_eq!(r.weighted.f1, 1.0);
    }

    #[test]
    fn weighted_f1_uses_supports() {
        let (t, p) = from_matrix(&[&[6, 2, 2], &[3, 12, 5], &[7, 13, 50]]);
        let (r, _) = compute_metrics(&t, &p, 3).unwrap();
        let want = 0.1 * r.per_class[0].f1 + 0.2 * r.per_class[1].f1 + 0.7 * r.per_class[2].f1;
        assert!((r.weighted.f1 - want).abs() < 1e-15);
    }

    #[test]
    fn empty_classes_are_flagged_not_nan() {
        let (r, _) = compute_metrics(&[0, 0], &[0, 0], 2).unwrap();
        assert!(r.per_class[1].undefined);
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!(!r.macro_avg.f1.is_nan());
    }

    #[test]
    fn bad_inputs() {
        assert_eq!(
            compute_metrics(&[0], &[0, 1], 2).unwrap_err(),
            MetricsError::Length { truth: 1, pred: 2 }
        );
        assert_eq!(compute_metrics(&[0], &[2], 2).unwrap_err(), MetricsError::Label { label: 2, k: 2 });
    }
}

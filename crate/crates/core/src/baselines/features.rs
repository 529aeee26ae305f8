//! Hand-engineered window aggregates for the GLM and normalised signal
//! matrices for the CNN. Both consume decoded frames, not tokens.

use crate::calibration::{is_valid_reading, CalibrationTable};
use crate::frames::{DecodedFrame, RawValue};
use crate::schema::{FeatureKind, SignalSchema};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// Readings ignored because they were sentinels or invalid.
    pub skipped: usize,
}

/// Column names of [`engineer_features`], in order.
pub fn feature_names(schema: &SignalSchema) -> Vec<String> {
    let mut out = Vec::new();
    for i in schema.continuous_indices() {
        let n = &schema.features()[i].name;
        for agg in ["min", "max", "mean", "max_abs_diff"] {
            out.push(format!("{n}.{agg}"));
        }
    }
    for i in schema.enumerated_indices() {
        let n = &schema.features()[i].name;
        out.push(format!("{n}.mode"));
        out.push(format!("{n}.transitions"));
    }
    out
}

/// Per continuous feature: min, max, mean and the largest absolute
/// one-step difference between consecutive valid readings. Per enumerated
/// feature: the modal state index (lowest on ties) and the number of state
/// changes between consecutive valid readings. A feature with no valid
/// reading contributes zeros.
pub fn engineer_features(window: &[DecodedFrame], schema: &SignalSchema) -> FeatureVector {
    let mut values = Vec::new();
    let mut skipped = 0;
    for i in schema.continuous_indices() {
        let spec = &schema.features()[i];
        let mut xs: Vec<Option<f64>> = Vec::with_capacity(window.len());
        for f in window {
            match f.values[i] {
                RawValue::Number(x) if is_valid_reading(spec, x) => xs.push(Some(x)),
                _ => {
                    skipped += 1;
                    xs.push(None);
                }
            }
        }
        let valid: Vec<f64> = xs.iter().flatten().copied().collect();
        if valid.is_empty() {
            values.extend([0.0; 4]);
            continue;
        }
        let min = valid.iter().copied().fold(f64::INFINITY, f64::min);
        let max = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = valid.iter().sum::<f64>() / valid.len() as f64;
        let diff = xs
            .windows(2)
            .filter_map(|w| Some((w[1]? - w[0]?).abs()))
            .fold(0.0, f64::max);
        values.extend([min, max, mean, diff]);
    }
    for i in schema.enumerated_indices() {
        let n_states = schema.features()[i].states().len();
        let mut counts = vec![0usize; n_states];
        let mut prev: Option<u16> = None;
        let mut transitions = 0;
        for f in window {
            match f.values[i] {
                RawValue::State(s) if (s as usize) < n_states => {
                    counts[s as usize] += 1;
                    if prev.is_some_and(|p| p != s) {
                        transitions += 1;
                    }
                    prev = Some(s);
                }
                _ => skipped += 1,
            }
        }
        let mode = (0..n_states).fold(0, |best, s| if counts[s] > counts[best] { s } else { best });
        values.push(mode as f64);
        values.push(transitions as f64);
    }
    FeatureVector { values, skipped }
}

/// `[time, channels]` row-major matrix: continuous features scaled by their
/// empirical bounds (not clamped, so out-of-range pulses stay visible),
/// then enumerated features as integer state codes. Invalid continuous
/// readings become 0, invalid states -1.
pub fn signal_matrix(window: &[DecodedFrame], schema: &SignalSchema, calib: &CalibrationTable) -> Vec<f64> {
    let cont: Vec<(usize, f64, f64)> = schema
        .continuous_indices()
        .map(|i| {
            let spec = &schema.features()[i];
            match calib.get(&spec.name) {
                Some(c) if c.range() > 0.0 => (i, c.emp_min, c.range()),
                _ => (i, 0.0, 1.0),
            }
        })
        .collect();
    let enums: Vec<usize> = schema.enumerated_indices().collect();
    let mut out = Vec::with_capacity(window.len() * (cont.len() + enums.len()));
    for f in window {
        for &(i, lo, range) in &cont {
            out.push(match f.values[i] {
                RawValue::Number(x) if is_valid_reading(&schema.features()[i], x) => (x - lo) / range,
                _ => 0.0,
            });
        }
        for &i in &enums {
            let n = match &schema.features()[i].kind {
                FeatureKind::Enumerated { states } => states.len(),
                _ => 0,
            };
            out.push(match f.values[i] {
                RawValue::State(s) if (s as usize) < n => s as f64,
                _ => -1.0,
            });
        }
    }
    out
}

pub fn signal_channels(schema: &SignalSchema) -> usize {
    schema.continuous_indices().count() + schema.enumerated_indices().count()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::schema::{FeatureSpec, IdentifierRole};

    fn schema() -> SignalSchema {
        SignalSchema::from_ordered(
            vec![
                FeatureSpec::identifier("vin", IdentifierRole::Vehicle),
                FeatureSpec::continuous("speed", "km/h", 0.0, 250.0),
                FeatureSpec::enumerated("gear", &["P", "R", "N", "D"]),
            ],
            1.0,
            4,
        )
        .unwrap()
    }

    fn frames(values: &[(RawValue, RawValue)]) -> Vec<DecodedFrame> {
        values
            .iter()
            .enumerate()
            .map(|(t, &(a, b))| DecodedFrame {
                timestamp: t as f64,
                vehicle_id: Arc::from("v"),
                trip_id: Arc::from("t"),
                values: vec![RawValue::Missing, a, b],
            })
            .collect()
    }

    #[test]
    fn aggregates_by_hand() {
        use RawValue::*;
        let w = frames(&[
            (Number(10.0), State(0)),
            (Number(14.0), State(3)),
            (Error, State(3)),
            (Number(11.0), State(0)),
        ]);
        let f = engineer_features(&w, &schema());
        assert_eq!(f.values, vec![10.0, 14.0, 35.0 / 3.0, 4.0, 0.0, 2.0]);
        assert_eq!(f.skipped, 1);
        assert_eq!(f.values.len(), 4 + 2);
        assert_eq!(feature_names(&schema()).len(), 6);
    }

    #[test]
    fn constant_window_has_no_differences() {
        use RawValue::*;
        let w = frames(&[(Number(5.0), State(2)); 4]);
        let f = engineer_features(&w, &schema());
        assert_eq!(f.values[3], 0.0);
        assert_eq!(f.values[5], 0.0);
    }
}

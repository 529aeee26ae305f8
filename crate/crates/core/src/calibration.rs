//! Per-feature quantization calibration for continuous signals.
//!
//! For every continuous feature we estimate empirical min/max bounds (used for
//! [0, 1] scaling), the trimmed mean absolute one-step difference `delta`,
//! its range-normalized form `r = delta / (emp_max - emp_min)`, and finally a
//! uniform bin count looked up from a threshold ladder: calm signals get fine
//! bins, jumpy signals coarse ones.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::frames::{RawValue, TripLog};
use crate::rng;
use crate::schema::{FeatureKind, FeatureSpec, SignalSchema};

pub const CALIBRATION_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("insufficient calibration data for: {}", .0.join(", "))]
    InsufficientData(Vec<String>),
    #[error("series of length {0} has no one-step differences")]
    SeriesTooShort(usize),
    #[error("invalid bin ladder: {0}")]
    InvalidLadder(String),
    #[error("invalid calibration parameter: {0}")]
    InvalidParameter(String),
    #[error("calibration was built for schema {found}, expected {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("malformed calibration document: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderStep {
    pub max_r: f64,
    pub bins: u32,
}

/// Ordered `(r upper bound, bin count)` steps; the last step is the catch-all.
#[derive(Debug, Clone, PartialEq)]
pub struct BinLadder {
    steps: Vec<LadderStep>,
}

impl Default for BinLadder {
    fn default() -> Self {
        BinLadder::new(vec![
            LadderStep { max_r: 0.01, bins: 256 },
            LadderStep { max_r: 0.05, bins: 128 },
            LadderStep { max_r: 0.15, bins: 64 },
            LadderStep { max_r: 0.35, bins: 32 },
            LadderStep { max_r: f64::INFINITY, bins: 16 },
        ])
        .expect("default ladder is valid")
    }
}

impl BinLadder {
    pub fn new(steps: Vec<LadderStep>) -> Result<Self, CalibrationError> {
        if steps.is_empty() {
            return Err(CalibrationError::InvalidLadder("no steps".into()));
        }
        for w in steps.windows(2) {
            if !(w[0].max_r < w[1].max_r) {
                return Err(CalibrationError::InvalidLadder(
                    "r bounds must be strictly increasing".into(),
                ));
            }
            if !(w[0].bins > w[1].bins) {
                return Err(CalibrationError::InvalidLadder(
                    "bin counts must be strictly decreasing".into(),
                ));
            }
        }
        if steps.iter().any(|s| s.bins == 0 || s.max_r.is_nan() || s.max_r < 0.0) {
            return Err(CalibrationError::InvalidLadder(
                "bins must be positive and bounds non-negative".into(),
            ));
        }
        Ok(BinLadder { steps })
    }

    pub fn steps(&self) -> &[LadderStep] {
        &self.steps
    }

    /// Bin count of the first step whose bound covers `r`.
    pub fn bin_count(&self, r: f64) -> u32 {
        self.steps
            .iter()
            .find(|s| r <= s.max_r)
            .unwrap_or_else(|| self.steps.last().expect("ladder non-empty"))
            .bins
    }

    pub fn finest(&self) -> u32 {
        self.steps[0].bins
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCalibration {
    pub feature: String,
    pub emp_min: f64,
    pub emp_max: f64,
    pub delta: f64,
    pub r: f64,
    pub bin_count: u32,
}

impl FeatureCalibration {
    pub fn range(&self) -> f64 {
        self.emp_max - self.emp_min
    }

    pub fn bin_width(&self) -> f64 {
        self.range() / self.bin_count as f64
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub vehicles: usize,
    pub trips_per_vehicle: usize,
    /// Fraction of one-step differences dropped from each tail before averaging.
    pub trim_fraction: f64,
    /// Quantile used for the empirical bounds; 0 keeps the exact extremes.
    pub quantile_clip: f64,
    pub ladder: BinLadder,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            vehicles: 100,
            trips_per_vehicle: 15,
            trim_fraction: 0.005,
            quantile_clip: 0.0,
            ladder: BinLadder::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    pub schema_hash: String,
    pub trim_fraction: f64,
    pub quantile_clip: f64,
    pub ladder: BinLadder,
    /// Continuous features in schema order.
    pub features: Vec<FeatureCalibration>,
}

/// True when `x` is a usable measurement for `feature`: a finite number inside
/// the static sensor range that is not a declared invalid code.
pub fn is_valid_reading(feature: &FeatureSpec, x: f64) -> bool {
    match &feature.kind {
        FeatureKind::Continuous {
            static_min,
            static_max,
            invalid_values,
        } => x.is_finite() && x >= *static_min && x <= *static_max && !invalid_values.contains(&x),
        _ => false,
    }
}

/// Nearest-rank quantile of an ascending slice: the value at rank
/// `max(1, ceil(p * n))`.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Empirical `(min, max)` bounds from raw readings. Readings that are not
/// valid (outside the static range, invalid codes, non-finite) are dropped;
/// the `quantile_clip` and `1 - quantile_clip` nearest-rank quantiles of the
/// rest are returned, clamped into the static range.
pub fn estimate_empirical_bounds(
    feature: &FeatureSpec,
    values: &[f64],
    quantile_clip: f64,
) -> Result<(f64, f64), CalibrationError> {
    if !(0.0..0.5).contains(&quantile_clip) {
        return Err(CalibrationError::InvalidParameter(format!(
            "quantile_clip {quantile_clip} outside [0, 0.5)"
        )));
    }
    let (smin, smax) = feature.static_range().ok_or_else(|| {
        CalibrationError::InvalidParameter(format!("`{}` is not continuous", feature.name))
    })?;
    let mut valid: Vec<f64> = values
        .iter()
        .copied()
        .filter(|&x| is_valid_reading(feature, x))
        .collect();
    if valid.is_empty() {
        return Err(CalibrationError::InsufficientData(vec![feature.name.clone()]));
    }
    valid.sort_by(f64::total_cmp);
    let lo = nearest_rank(&valid, quantile_clip).clamp(smin, smax);
    let hi = nearest_rank(&valid, 1.0 - quantile_clip).clamp(smin, smax);
    Ok((lo, hi))
}

/// Trimmed mean of absolute differences: sorts `diffs`, drops
/// `floor(trim_fraction * M)` values from each tail, averages the rest.
pub fn trimmed_mean(diffs: &mut [f64], trim_fraction: f64) -> f64 {
    diffs.sort_by(f64::total_cmp);
    let m = diffs.len();
    let k = (trim_fraction * m as f64).floor() as usize;
    let kept = &diffs[k..m - k];
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// `delta` (trimmed mean |x[t+1] - x[t]|) and `r = delta / range` for one
/// time-ordered series; `r` is 0 when the range is empty.
pub fn temporal_variation(
    series: &[f64],
    trim_fraction: f64,
    range: f64,
) -> Result<(f64, f64), CalibrationError> {
    if series.len() < 2 {
        return Err(CalibrationError::SeriesTooShort(series.len()));
    }
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(CalibrationError::InvalidParameter(format!(
            "trim_fraction {trim_fraction} outside [0, 0.5)"
        )));
    }
    let mut diffs: Vec<f64> = series.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let delta = trimmed_mean(&mut diffs, trim_fraction);
    let r = if range > 0.0 { delta / range } else { 0.0 };
    Ok((delta, r))
}

/// Picks up to `config.vehicles` vehicles and `config.trips_per_vehicle`
/// trips each, deterministically for `seed`. Returned trips have their
/// frames in timestamp order.
fn sample_trips<'a>(trips: &'a [TripLog], config: &CalibrationConfig, seed: u64) -> Vec<Vec<&'a crate::frames::DecodedFrame>> {
    let mut by_vehicle: BTreeMap<&str, Vec<&TripLog>> = BTreeMap::new();
    for t in trips {
        by_vehicle.entry(&t.vehicle_id).or_default().push(t);
    }
    let mut vehicles: Vec<&str> = by_vehicle.keys().copied().collect();
    if vehicles.len() < config.vehicles {
        log::warn!(
            "calibration asked for {} vehicles but only {} available; using all",
            config.vehicles,
            vehicles.len()
        );
    }
    let mut rng = rng::stream(seed, &[rng::label("calibration")]);
    vehicles.shuffle(&mut rng);
    vehicles.truncate(config.vehicles);
    vehicles.sort_unstable();

    let mut short = 0usize;
    let mut out = Vec::new();
    for v in vehicles {
        let mut vt = by_vehicle[v].clone();
        vt.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
        if vt.len() < config.trips_per_vehicle {
            short += 1;
        }
        vt.shuffle(&mut rng);
        vt.truncate(config.trips_per_vehicle);
        vt.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
        for t in vt {
            let mut frames: Vec<_> = t.frames.iter().collect();
            frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            out.push(frames);
        }
    }
    if short > 0 {
        log::warn!(
            "{short} sampled vehicles have fewer than {} trips; using all of theirs",
            config.trips_per_vehicle
        );
    }
    out
}

fn calibrate_feature(
    spec: &FeatureSpec,
    index: usize,
    sample: &[Vec<&crate::frames::DecodedFrame>],
    config: &CalibrationConfig,
) -> Result<FeatureCalibration, String> {
    let reading = |v: &RawValue| match *v {
        RawValue::Number(x) if is_valid_reading(spec, x) => Some(x),
        _ => None,
    };
    let values: Vec<f64> = sample
        .iter()
        .flat_map(|t| t.iter().filter_map(|f| reading(&f.values[index])))
        .collect();
    let (lo, hi) = estimate_empirical_bounds(spec, &values, config.quantile_clip)
        .map_err(|_| spec.name.clone())?;

    if hi <= lo {
        return Ok(FeatureCalibration {
            feature: spec.name.clone(),
            emp_min: lo,
            emp_max: hi,
            delta: 0.0,
            r: 0.0,
            bin_count: 1,
        });
    }

    let mut diffs = Vec::new();
    for trip in sample {
        let mut prev: Option<f64> = None;
        for f in trip {
            let cur = reading(&f.values[index]).map(|x| x.clamp(lo, hi));
            if let (Some(a), Some(b)) = (prev, cur) {
                diffs.push((b - a).abs());
            }
            prev = cur;
        }
    }
    if diffs.is_empty() {
        return Err(spec.name.clone());
    }
    let delta = trimmed_mean(&mut diffs, config.trim_fraction);
    let r = delta / (hi - lo);
    Ok(FeatureCalibration {
        feature: spec.name.clone(),
        emp_min: lo,
        emp_max: hi,
        delta,
        r,
        bin_count: config.ladder.bin_count(r),
    })
}

/// Builds the calibration table from a trip corpus. Pure in
/// `(trips, schema, config, seed)`.
pub fn calibrate(
    trips: &[TripLog],
    schema: &SignalSchema,
    config: &CalibrationConfig,
    seed: u64,
) -> Result<CalibrationTable, CalibrationError> {
    if !(0.0..0.5).contains(&config.trim_fraction) {
        return Err(CalibrationError::InvalidParameter(format!(
            "trim_fraction {} outside [0, 0.5)",
            config.trim_fraction
        )));
    }
    if trips.is_empty() {
        return Err(CalibrationError::InsufficientData(
            schema
                .continuous_indices()
                .map(|i| schema.features()[i].name.clone())
                .collect(),
        ));
    }
    let sample = sample_trips(trips, config, seed);
    let indices: Vec<usize> = schema.continuous_indices().collect();
    let results: Vec<_> = indices
        .par_iter()
        .map(|&i| calibrate_feature(&schema.features()[i], i, &sample, config))
        .collect();

    let mut features = Vec::with_capacity(results.len());
    let mut missing = Vec::new();
    for r in results {
        match r {
            Ok(c) => features.push(c),
            Err(name) => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(CalibrationError::InsufficientData(missing));
    }
    Ok(CalibrationTable {
        schema_hash: schema.hash(),
        trim_fraction: config.trim_fraction,
        quantile_clip: config.quantile_clip,
        ladder: config.ladder.clone(),
        features,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationDoc {
    calibration_version: u32,
    schema_hash: String,
    trim_fraction: f64,
    quantile_clip: f64,
    ladder: Vec<LadderStep>,
    feature: Vec<FeatureCalibration>,
}

impl CalibrationTable {
    pub fn get(&self, feature: &str) -> Option<&FeatureCalibration> {
        self.features.iter().find(|f| f.feature == feature)
    }

    /// Calibration for each schema position (`None` for non-continuous).
    pub fn per_position(&self, schema: &SignalSchema) -> Result<Vec<Option<&FeatureCalibration>>, CalibrationError> {
        self.check_schema(schema)?;
        Ok(schema
            .features()
            .iter()
            .map(|f| if f.is_continuous() { self.get(&f.name) } else { None })
            .collect())
    }

    /// Verifies the table was built for `schema` and covers exactly its
    /// continuous features.
    pub fn check_schema(&self, schema: &SignalSchema) -> Result<(), CalibrationError> {
        let expected = schema.hash();
        if self.schema_hash != expected {
            return Err(CalibrationError::SchemaMismatch {
                expected,
                found: self.schema_hash.clone(),
            });
        }
        let want: BTreeSet<&str> = schema
            .continuous_indices()
            .map(|i| schema.features()[i].name.as_str())
            .collect();
        let have: BTreeSet<&str> = self.features.iter().map(|f| f.feature.as_str()).collect();
        if want != have {
            return Err(CalibrationError::Parse(
                "calibrated features differ from the schema's continuous features".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        let doc = CalibrationDoc {
            calibration_version: CALIBRATION_VERSION,
            schema_hash: self.schema_hash.clone(),
            trim_fraction: self.trim_fraction,
            quantile_clip: self.quantile_clip,
            ladder: self.ladder.steps().to_vec(),
            feature: self.features.clone(),
        };
        toml::to_string(&doc).expect("calibration serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self, CalibrationError> {
        let doc: CalibrationDoc =
            toml::from_str(text).map_err(|e| CalibrationError::Parse(e.to_string()))?;
        if doc.calibration_version != CALIBRATION_VERSION {
            return Err(CalibrationError::Parse(format!(
                "unsupported calibration_version {}",
                doc.calibration_version
            )));
        }
        let ladder = BinLadder::new(doc.ladder)?;
        for f in &doc.feature {
            if !(f.emp_min <= f.emp_max) || f.bin_count == 0 {
                return Err(CalibrationError::Parse(format!(
                    "feature `{}` has inconsistent bounds or bins",
                    f.feature
                )));
            }
        }
        Ok(CalibrationTable {
            schema_hash: doc.schema_hash,
            trim_fraction: doc.trim_fraction,
            quantile_clip: doc.quantile_clip,
            ladder,
            features: doc.feature,
        })
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::DecodedFrame;
    use crate::schema::IdentifierRole;
    use std::sync::Arc;

    fn speed() -> FeatureSpec {
        FeatureSpec::continuous("speed", "km/h", 0.0, 250.0)
    }

    #[test]
    fn exact_and_clipped_bounds() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(estimate_empirical_bounds(&speed(), &v, 0.0).unwrap(), (0.0, 100.0));
        assert_eq!(estimate_empirical_bounds(&speed(), &v, 0.05).unwrap(), (5.0, 95.0));
        assert_eq!(estimate_empirical_bounds(&speed(), &[7.0; 9], 0.0).unwrap(), (7.0, 7.0));
    }

    #[test]
    fn bounds_drop_out_of_range_readings() {
        let f = speed().with_invalid_values(&[200.0]);
        let v = [-3.0, 10.0, 20.0, 200.0, 900.0, f64::NAN];
        assert_eq!(estimate_empirical_bounds(&f, &v, 0.0).unwrap(), (10.0, 20.0));
        let err = estimate_empirical_bounds(&f, &[900.0], 0.0).unwrap_err();
        assert!(matches!(err, CalibrationError::InsufficientData(n) if n == ["speed"]));
    }

    #[test]
    fn temporal_variation_examples() {
        let alt: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        assert_eq!(temporal_variation(&alt, 0.005, 1.0).unwrap(), (1.0, 1.0));
        let ramp: Vec<f64> = (0..10).map(f64::from).collect();
        let (d, r) = temporal_variation(&ramp, 0.005, 9.0).unwrap();
        assert_eq!(d, 1.0);
        assert!((r - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(temporal_variation(&[5.0; 4], 0.005, 0.0).unwrap(), (0.0, 0.0));
        assert!(matches!(
            temporal_variation(&[1.0], 0.005, 1.0),
            Err(CalibrationError::SeriesTooShort(1))
        ));
    }

    #[test]
    fn trimming_excludes_a_spike() {
        // 400 diffs; floor(0.005 * 400) = 2 dropped per tail.
        let mut s: Vec<f64> = (0..401).map(|i| (i % 2) as f64 * 0.5).collect();
        let (base, _) = temporal_variation(&s, 0.005, 1.0).unwrap();
        s[200] = 1e6;
        let (spiked, _) = temporal_variation(&s, 0.005, 1.0).unwrap();
        assert!(base <= spiked);
        assert!((spiked - base).abs() < 1e-2);
    }

    #[test]
    fn ladder_lookup() {
        let l = BinLadder::default();
        assert_eq!(l.bin_count(0.001), 256);
        assert_eq!(l.bin_count(0.0), 256);
        assert_eq!(l.bin_count(0.01), 256);
        assert_eq!(l.bin_count(0.02), 128);
        assert_eq!(l.bin_count(0.1), 64);
        assert_eq!(l.bin_count(0.3), 32);
        assert_eq!(l.bin_count(1.0), 16);
        assert_eq!(l.finest(), 256);
    }

    #[test]
    fn ladder_validation() {
        let bad = BinLadder::new(vec![
            LadderStep { max_r: 0.1, bins: 64 },
            LadderStep { max_r: 0.05, bins: 32 },
        ]);
        assert!(bad.is_err());
        let bad = BinLadder::new(vec![
            LadderStep { max_r: 0.1, bins: 64 },
            LadderStep { max_r: 0.5, bins: 64 },
        ]);
        assert!(bad.is_err());
    }

    fn toy_corpus(broken: bool) -> (SignalSchema, Vec<TripLog>) {
        let schema = SignalSchema::from_ordered(
            vec![
                FeatureSpec::identifier("vin", IdentifierRole::Vehicle),
                FeatureSpec::identifier("trip", IdentifierRole::Trip),
                FeatureSpec::continuous("speed", "km/h", 0.0, 250.0),
                FeatureSpec::continuous("temp", "degC", -40.0, 100.0),
                FeatureSpec::continuous("const", "", 0.0, 10.0),
                FeatureSpec::enumerated("gear", &["P", "D"]),
            ],
            1.0,
            10,
        )
        .unwrap();
        let mut trips = Vec::new();
        for v in 0..5 {
            for t in 0..4 {
                let vid: Arc<str> = Arc::from(format!("v{v}"));
                let tid: Arc<str> = Arc::from(format!("t{t}"));
                let frames = (0..30)
                    .map(|i| DecodedFrame {
                        timestamp: i as f64,
                        vehicle_id: vid.clone(),
                        trip_id: tid.clone(),
                        values: vec![
                            RawValue::Missing,
                            RawValue::Missing,
                            RawValue::Number(((i * 7 + v * 3 + t) % 50) as f64),
                            if broken {
                                RawValue::Error
                            } else {
                                RawValue::Number(20.0 + 0.1 * i as f64)
                            },
                            RawValue::Number(3.0),
                            RawValue::State((i % 2) as u16),
                        ],
                    })
                    .collect();
                trips.push(TripLog {
                    vehicle_id: vid,
                    trip_id: tid,
                    frames,
                });
            }
        }
        (schema, trips)
    }

    #[test]
    fn calibrate_covers_continuous_features_and_is_deterministic() {
        let (schema, trips) = toy_corpus(false);
        let cfg = CalibrationConfig {
            vehicles: 3,
            trips_per_vehicle: 2,
            ..Default::default()
        };
        let a = calibrate(&trips, &schema, &cfg, 11).unwrap();
        let b = calibrate(&trips, &schema, &cfg, 11).unwrap();
        assert_eq!(a.to_toml(), b.to_toml());
        let names: Vec<_> = a.features.iter().map(|f| f.feature.as_str()).collect();
        assert_eq!(names, ["speed", "temp", "const"]);
        let c = a.get("const").unwrap();
        assert_eq!((c.r, c.bin_count), (0.0, 1));
        let temp = a.get("temp").unwrap();
        assert!((temp.delta - 0.1).abs() < 1e-9);
        a.check_schema(&schema).unwrap();
    }

    #[test]
    fn calibrate_reports_dead_feature() {
        let (schema, trips) = toy_corpus(true);
        let err = calibrate(&trips, &schema, &CalibrationConfig::default(), 1).unwrap_err();
        assert!(matches!(err, CalibrationError::InsufficientData(n) if n == ["temp"]));
    }

    #[test]
    fn table_round_trips_exactly() {
        let (schema, trips) = toy_corpus(false);
        let table = calibrate(&trips, &schema, &CalibrationConfig::default(), 3).unwrap();
        let text = table.to_toml();
        let back = CalibrationTable::from_toml(&text).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.to_toml(), text);
        assert!(text.contains("max_r = inf"));
    }
}

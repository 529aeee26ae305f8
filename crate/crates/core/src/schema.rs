//! Signal schema: the ordered declaration of decoded CAN features.
//!
//! Everything downstream (calibration, vocabulary layout, token block
//! structure, the synthetic generator) is driven by a [`SignalSchema`].
//! The on-disk form is a small TOML document:
//!
//! ```toml
//! schema_version = 1
//! frame_rate_hz = 1.0
//! window_seconds = 10
//!
//! [[feature]]
//! name = "speed"
//! kind = "continuous"
//! unit = "km/h"
//! position = 2
//! static_min = 0.0
//! static_max = 250.0
//!
//! [[feature]]
//! name = "gear"
//! kind = "enumerated"
//! unit = ""
//! position = 3
//! states = ["P", "R", "N", "D"]
//!
//! [[feature]]
//! name = "vehicle_id"
//! kind = "identifier"
//! unit = ""
//! position = 0
//! role = "vehicle"
//! ```

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

/// Current on-disk schema format version.
pub const SCHEMA_VERSION: u32 = 1;

/// Which context boundary a symbolic identifier marks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IdentifierRole {
    Vehicle,
    Trip,
}

impl IdentifierRole {
    fn as_str(self) -> &'static str {
        match self {
            IdentifierRole::Vehicle => "vehicle",
            IdentifierRole::Trip => "trip",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    /// Real-valued signal with static sensor range limits. Readings equal to
    /// one of `invalid_values` are decoder error codes, not measurements.
    Continuous {
        static_min: f64,
        static_max: f64,
        invalid_values: Vec<f64>,
    },
    Enumerated {
        states: Vec<String>,
    },
    /// Context identifier (VIN, trip id); its values never enter the vocabulary.
    SymbolicIdentifier { role: IdentifierRole },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    pub unit: String,
    pub position: usize,
}

impl FeatureSpec {
    pub fn continuous(name: &str, unit: &str, static_min: f64, static_max: f64) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Continuous {
                static_min,
                static_max,
                invalid_values: Vec::new(),
            },
            unit: unit.to_string(),
            position: 0,
        }
    }

    pub fn enumerated(name: &str, states: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Enumerated {
                states: states.iter().map(|s| s.to_string()).collect(),
            },
            unit: String::new(),
            position: 0,
        }
    }

    pub fn identifier(name: &str, role: IdentifierRole) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::SymbolicIdentifier { role },
            unit: String::new(),
            position: 0,
        }
    }

    pub fn with_invalid_values(mut self, values: &[f64]) -> Self {
        if let FeatureKind::Continuous { invalid_values, .. } = &mut self.kind {
            invalid_values.extend_from_slice(values);
        }
        self
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.kind, FeatureKind::Continuous { .. })
    }

    pub fn is_enumerated(&self) -> bool {
        matches!(self.kind, FeatureKind::Enumerated { .. })
    }

    pub fn is_identifier(&self) -> bool {
        matches!(self.kind, FeatureKind::SymbolicIdentifier { .. })
    }

    pub fn static_range(&self) -> Option<(f64, f64)> {
        match self.kind {
            FeatureKind::Continuous {
                static_min,
                static_max,
                ..
            } => Some((static_min, static_max)),
            _ => None,
        }
    }

    pub fn states(&self) -> &[String] {
        match &self.kind {
            FeatureKind::Enumerated { states } => states,
            _ => &[],
        }
    }

    pub fn state_index(&self, state: &str) -> Option<usize> {
        self.states().iter().position(|s| s == state)
    }
}

/// Problems attributable to a single feature declaration.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureIssue {
    DuplicateName,
    NonContiguousPosition(usize),
    EmptyRange { min: f64, max: f64 },
    UnknownKind(String),
    UnknownRole(String),
    DuplicateRole(&'static str),
    EmptyStates,
    DuplicateState(String),
    MissingField(&'static str),
}

impl fmt::Display for FeatureIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureIssue::DuplicateName => write!(f, "duplicate feature name"),
            FeatureIssue::NonContiguousPosition(p) => write!(
                f,
                "position {p} breaks the contiguous 0-based ordering"
            ),
            FeatureIssue::EmptyRange { min, max } => {
                write!(f, "static_min ({min}) must be below static_max ({max})")
            }
            FeatureIssue::UnknownKind(k) => write!(f, "unknown kind tag `{k}`"),
            FeatureIssue::UnknownRole(r) => write!(f, "unknown identifier role `{r}`"),
            FeatureIssue::DuplicateRole(r) => write!(f, "second identifier with role `{r}`"),
            FeatureIssue::EmptyStates => write!(f, "enumeration has no states"),
            FeatureIssue::DuplicateState(s) => write!(f, "duplicate state `{s}`"),
            FeatureIssue::MissingField(field) => write!(f, "missing field `{field}`"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("malformed schema document: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    UnsupportedVersion(u32),
    #[error("invalid timing: {0}")]
    Timing(String),
    #[error("feature `{name}`{}: {issue}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Feature {
        name: String,
        line: Option<usize>,
        issue: FeatureIssue,
    },
}

impl SchemaError {
    pub fn issue(&self) -> Option<&FeatureIssue> {
        match self {
            SchemaError::Feature { issue, .. } => Some(issue),
            _ => None,
        }
    }
}

/// Immutable, validated feature declaration. Features are stored in
/// serialization order, so `features[i].position == i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSchema {
    features: Vec<FeatureSpec>,
    frame_rate_hz: f64,
    window_seconds: u32,
}

impl SignalSchema {
    /// Builds a schema from features listed in serialization order; positions
    /// are assigned from list order.
    pub fn from_ordered(
        mut features: Vec<FeatureSpec>,
        frame_rate_hz: f64,
        window_seconds: u32,
    ) -> Result<Self, SchemaError> {
        for (i, f) in features.iter_mut().enumerate() {
            f.position = i;
        }
        Self::new(features, frame_rate_hz, window_seconds)
    }

    /// Builds a schema from features carrying explicit positions.
    pub fn new(
        features: Vec<FeatureSpec>,
        frame_rate_hz: f64,
        window_seconds: u32,
    ) -> Result<Self, SchemaError> {
        let lines = vec![None; features.len()];
        Self::validated(features, frame_rate_hz, window_seconds, &lines)
    }

    fn validated(
        mut features: Vec<FeatureSpec>,
        frame_rate_hz: f64,
        window_seconds: u32,
        lines: &[Option<usize>],
    ) -> Result<Self, SchemaError> {
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(SchemaError::Timing(format!(
                "frame_rate_hz must be positive, got {frame_rate_hz}"
            )));
        }
        if window_seconds == 0 {
            return Err(SchemaError::Timing("window_seconds must be positive".into()));
        }
        let frames = frame_rate_hz * window_seconds as f64;
        if (frames - frames.round()).abs() > 1e-9 || frames.round() < 1.0 {
            return Err(SchemaError::Timing(format!(
                "window of {window_seconds} s at {frame_rate_hz} Hz is not a whole number of frames"
            )));
        }
        if features.is_empty() {
            return Err(SchemaError::Parse("schema declares no features".into()));
        }

        let err = |i: usize, f: &FeatureSpec, issue| SchemaError::Feature {
            name: f.name.clone(),
            line: lines[i],
            issue,
        };

        let mut names = HashSet::new();
        let mut roles = HashSet::new();
        for (i, f) in features.iter().enumerate() {
            if !names.insert(f.name.as_str()) {
                return Err(err(i, f, FeatureIssue::DuplicateName));
            }
            match &f.kind {
                FeatureKind::Continuous {
                    static_min,
                    static_max,
                    ..
                } => {
                    if !(static_min < static_max) {
                        return Err(err(
                            i,
                            f,
                            FeatureIssue::EmptyRange {
                                min: *static_min,
                                max: *static_max,
                            },
                        ));
                    }
                }
                FeatureKind::Enumerated { states } => {
                    if states.is_empty() {
                        return Err(err(i, f, FeatureIssue::EmptyStates));
                    }
                    let mut seen = HashSet::new();
                    for s in states {
                        if !seen.insert(s.as_str()) {
                            return Err(err(i, f, FeatureIssue::DuplicateState(s.clone())));
                        }
                    }
                }
                FeatureKind::SymbolicIdentifier { role } => {
                    if !roles.insert(*role) {
                        return Err(err(i, f, FeatureIssue::DuplicateRole(role.as_str())));
                    }
                }
            }
        }

        let n = features.len();
        let mut seen = vec![false; n];
        for (i, f) in features.iter().enumerate() {
            if f.position >= n || seen[f.position] {
                return Err(err(i, f, FeatureIssue::NonContiguousPosition(f.position)));
            }
            seen[f.position] = true;
        }
        features.sort_by_key(|f| f.position);

        Ok(SignalSchema {
            features,
            frame_rate_hz,
            window_seconds,
        })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn window_seconds(&self) -> u32 {
        self.window_seconds
    }

    /// Tokens per time step: the leading `<TS>` plus one per feature.
    pub fn block_len(&self) -> usize {
        1 + self.features.len()
    }

    pub fn frames_per_window(&self) -> usize {
        (self.frame_rate_hz * self.window_seconds as f64).round() as usize
    }

    pub fn window_token_len(&self) -> usize {
        self.frames_per_window() * self.block_len()
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn identifier_index(&self, role: IdentifierRole) -> Option<usize> {
        self.features.iter().position(
            |f| matches!(f.kind, FeatureKind::SymbolicIdentifier { role: r } if r == role),
        )
    }

    pub fn continuous_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_continuous())
            .map(|(i, _)| i)
    }

    pub fn enumerated_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_enumerated())
            .map(|(i, _)| i)
    }

    /// Canonical TOML rendering; `load_schema(&s.to_toml())` reproduces `s`.
    pub fn to_toml(&self) -> String {
        let doc = SchemaDocOut {
            schema_version: SCHEMA_VERSION,
            frame_rate_hz: self.frame_rate_hz,
            window_seconds: self.window_seconds,
            feature: self.features.iter().map(FeatureDocOut::from).collect(),
        };
        toml::to_string(&doc).expect("schema serializes to TOML")
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[derive(Serialize)]
struct SchemaDocOut {
    schema_version: u32,
    frame_rate_hz: f64,
    window_seconds: u32,
    feature: Vec<FeatureDocOut>,
}

#[derive(Serialize)]
struct FeatureDocOut {
    name: String,
    kind: &'static str,
    unit: String,
    position: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    static_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    static_max: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    invalid_values: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    states: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    role: Option<&'static str>,
}

impl From<&FeatureSpec> for FeatureDocOut {
    fn from(f: &FeatureSpec) -> Self {
        let mut doc = FeatureDocOut {
            name: f.name.clone(),
            kind: "",
            unit: f.unit.clone(),
            position: f.position,
            static_min: None,
            static_max: None,
            invalid_values: Vec::new(),
            states: None,
            role: None,
        };
        match &f.kind {
            FeatureKind::Continuous {
                static_min,
                static_max,
                invalid_values,
            } => {
                doc.kind = "continuous";
                doc.static_min = Some(*static_min);
                doc.static_max = Some(*static_max);
                doc.invalid_values = invalid_values.clone();
            }
            FeatureKind::Enumerated { states } => {
                doc.kind = "enumerated";
                doc.states = Some(states.clone());
            }
            FeatureKind::SymbolicIdentifier { role } => {
                doc.kind = "identifier";
                doc.role = Some(role.as_str());
            }
        }
        doc
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaDocIn {
    schema_version: u32,
    frame_rate_hz: f64,
    window_seconds: u32,
    #[serde(default)]
    feature: Vec<FeatureDocIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureDocIn {
    name: Spanned<String>,
    kind: String,
    #[serde(default)]
    unit: String,
    position: usize,
    static_min: Option<f64>,
    static_max: Option<f64>,
    #[serde(default)]
    invalid_values: Vec<f64>,
    states: Option<Vec<String>>,
    role: Option<String>,
}

fn line_of(source: &str, byte_offset: usize) -> usize {
    source[..byte_offset.min(source.len())]
        .bytes()
        .filter(|&b| b == b'\n')
        .count()
        + 1
}

/// Parses and validates a schema document.
pub fn load_schema(source: &str) -> Result<SignalSchema, SchemaError> {
    let doc: SchemaDocIn = toml::from_str(source).map_err(|e| SchemaError::Parse(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(SchemaError::UnsupportedVersion(doc.schema_version));
    }

    let mut features = Vec::with_capacity(doc.feature.len());
    let mut lines = Vec::with_capacity(doc.feature.len());
    for f in doc.feature {
        let line = line_of(source, f.name.span().start);
        let name = f.name.into_inner();
        let err = |issue| SchemaError::Feature {
            name: name.clone(),
            line: Some(line),
            issue,
        };
        let kind = match f.kind.as_str() {
            "continuous" => FeatureKind::Continuous {
                static_min: f
                    .static_min
                    .ok_or_else(|| err(FeatureIssue::MissingField("static_min")))?,
                static_max: f
                    .static_max
                    .ok_or_else(|| err(FeatureIssue::MissingField("static_max")))?,
                invalid_values: f.invalid_values,
            },
            "enumerated" => FeatureKind::Enumerated {
                states: f
                    .states
                    .ok_or_else(|| err(FeatureIssue::MissingField("states")))?,
            },
            "identifier" => {
                let role = f
                    .role
                    .ok_or_else(|| err(FeatureIssue::MissingField("role")))?;
                let role = match role.as_str() {
                    "vehicle" => IdentifierRole::Vehicle,
                    "trip" => IdentifierRole::Trip,
                    other => return Err(err(FeatureIssue::UnknownRole(other.to_string()))),
                };
                FeatureKind::SymbolicIdentifier { role }
            }
            other => return Err(err(FeatureIssue::UnknownKind(other.to_string()))),
        };
        features.push(FeatureSpec {
            name,
            kind,
            unit: f.unit,
            position: f.position,
        });
        lines.push(Some(line));
    }

    SignalSchema::validated(features, doc.frame_rate_hz, doc.window_seconds, &lines)
}

/// The bundled 44-feature synthetic schema, 1 Hz with 10 s windows.
///
/// Features are grouped by domain: identifiers, vehicle dynamics, driver
/// behaviour, safety indicators, vehicle state and context. The synthetic
/// generator in [`crate::datagen`] knows how to drive every one of them.
pub fn reference_schema() -> SignalSchema {
    use FeatureSpec as F;
    let off_on = &["Off", "On"];
    let door = &["Closed", "Open"];
    let features = vec![
        F::identifier("vehicle_id", IdentifierRole::Vehicle),
        F::identifier("trip_id", IdentifierRole::Trip),
        // vehicle dynamics
        F::continuous("speed", "km/h", 0.0, 250.0).with_invalid_values(&[511.0]),
        F::continuous("accel_longitudinal", "m/s^2", -100.0, 100.0),
        F::continuous("accel_lateral", "m/s^2", -100.0, 100.0),
        F::continuous("yaw_rate", "deg/s", -150.0, 150.0),
        F::continuous("engine_rpm", "rpm", 0.0, 8000.0).with_invalid_values(&[16383.0]),
        F::continuous("steering_angle", "deg", -720.0, 720.0),
        // driver behaviour
        F::continuous("throttle_position", "%", 0.0, 100.0),
        F::continuous("brake_pressure", "bar", 0.0, 200.0),
        F::enumerated("brake_switch", off_on),
        F::enumerated("gear", &["P", "R", "N", "1", "2", "3", "4", "5", "6"]),
        F::enumerated("turn_signal", &["Off", "Left", "Right", "Hazard"]),
        F::enumerated("cruise_control", &["Off", "Standby", "Active"]),
        F::enumerated("horn", off_on),
        F::enumerated("wiper", &["Off", "Low", "High"]),
        F::enumerated("headlights", &["Off", "Low", "High"]),
        F::enumerated("fog_lights", off_on),
        F::enumerated("parking_brake", &["Released", "Applied"]),
        F::enumerated("hill_hold", off_on),
        // safety indicators
        F::enumerated("airbag_deployed", off_on),
        F::enumerated("collision_warning", off_on),
        F::enumerated("abs_active", off_on),
        F::enumerated("esc_active", off_on),
        F::enumerated("tcs_active", off_on),
        F::enumerated("seatbelt_driver", &["Unbuckled", "Buckled"]),
        F::enumerated("seatbelt_passenger", &["Unbuckled", "Buckled"]),
        F::enumerated("lane_departure_warning", off_on),
        F::enumerated("emergency_brake_assist", off_on),
        // vehicle state and context
        F::enumerated("door_front_left", door),
        F::enumerated("door_front_right", door),
        F::enumerated("door_rear_left", door),
        F::enumerated("door_rear_right", door),
        F::enumerated("window_driver", door),
        F::enumerated("trunk", door),
        F::enumerated("ignition", &["Off", "Acc", "On"]),
        F::enumerated("occupancy", &["1", "2", "3", "4", "5"]),
        F::enumerated("drive_mode", &["Eco", "Normal", "Sport"]),
        F::enumerated("hvac_mode", &["Off", "Heat", "Cool", "Auto"]),
        F::enumerated("rear_defrost", off_on),
        F::enumerated("check_engine", off_on),
        F::enumerated("low_fuel_warning", off_on),
        F::continuous("fuel_level", "%", 0.0, 100.0),
        F::continuous("coolant_temp", "degC", -40.0, 150.0).with_invalid_values(&[215.0]),
    ];
    SignalSchema::from_ordered(features, 1.0, 10).expect("reference schema is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SignalSchema {
        SignalSchema::from_ordered(
            vec![
                FeatureSpec::continuous("speed", "km/h", 0.0, 250.0),
                FeatureSpec::enumerated("gear", &["P", "R", "N", "D"]),
            ],
            1.0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn reference_has_44_features_and_450_tokens() {
        let s = reference_schema();
        assert_eq!(s.feature_count(), 44);
        assert_eq!(s.block_len(), 45);
        assert_eq!(s.window_token_len(), 450);
        let ids = s.features().iter().filter(|f| f.is_identifier()).count();
        assert_eq!(ids, 2);
        assert!(s.continuous_indices().count() > 0);
        assert!(s.enumerated_indices().count() > 0);
    }

    #[test]
    fn reference_round_trips_through_text() {
        let s = reference_schema();
        let text = s.to_toml();
        let back = load_schema(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.block_len(), 45);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn toy_window_length() {
        assert_eq!(toy().window_token_len(), 3);
    }

    #[test]
    fn duplicate_name_reports_line() {
        let text = r#"schema_version = 1
frame_rate_hz = 1.0
window_seconds = 1

[[feature]]
name = "speed"
kind = "continuous"
position = 0
static_min = 0.0
static_max = 1.0

[[feature]]
name = "speed"
kind = "enumerated"
position = 1
states = ["a"]
"#;
        let err = load_schema(text).unwrap_err();
        match err {
            SchemaError::Feature { name, line, issue } => {
                assert_eq!(name, "speed");
                assert_eq!(line, Some(13));
                assert_eq!(issue, FeatureIssue::DuplicateName);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_bad_declarations() {
        let base = |body: &str| {
            format!("schema_version = 1\nframe_rate_hz = 1.0\nwindow_seconds = 1\n\n{body}")
        };
        let cases = [
            (
                "[[feature]]\nname = \"x\"\nkind = \"continuous\"\nposition = 0\nstatic_min = 5.0\nstatic_max = 5.0\n",
                "static_min",
            ),
            (
                "[[feature]]\nname = \"x\"\nkind = \"bogus\"\nposition = 0\n",
                "unknown kind",
            ),
            (
                "[[feature]]\nname = \"x\"\nkind = \"enumerated\"\nposition = 1\nstates = [\"a\"]\n",
                "position 1",
            ),
            (
                "[[feature]]\nname = \"x\"\nkind = \"enumerated\"\nposition = 0\nstates = [\"a\", \"a\"]\n",
                "duplicate state",
            ),
        ];
        for (body, needle) in cases {
            let msg = load_schema(&base(body)).unwrap_err().to_string();
            assert!(msg.contains(needle), "{msg} lacks {needle}");
            assert!(msg.contains("line 6"), "{msg}");
        }
    }

    #[test]
    fn rejects_wrong_version_and_fractional_windows() {
        let text = "schema_version = 9\nframe_rate_hz = 1.0\nwindow_seconds = 1\n";
        assert!(matches!(
            load_schema(text),
            Err(SchemaError::UnsupportedVersion(9))
        ));
        let r = SignalSchema::from_ordered(
            vec![FeatureSpec::enumerated("a", &["x"])],
            0.3,
            1,
        );
        assert!(matches!(r, Err(SchemaError::Timing(_))));
    }
}

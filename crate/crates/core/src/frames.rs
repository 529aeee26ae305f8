//! Decoded frames, trip logs, and the newline-delimited trip file format.
//!
//! A trip file is CSV with a header row. The header must name `timestamp`
//! and every schema feature (any order; identifier features carry the
//! vehicle/trip ids). Cell encodings:
//!
//! | cell        | meaning                                   |
//! |-------------|-------------------------------------------|
//! | *(empty)*   | missing value                             |
//! | `ERR`       | decoder error marker                      |
//! | `OUT`       | reading discarded as out of sensor range  |
//! | number      | continuous reading                        |
//! | state name  | enumerated state                          |
//!
//! Rows are grouped into trips by consecutive `(vehicle_id, trip_id)`.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::schema::{FeatureKind, IdentifierRole, SignalSchema};

pub const ERROR_MARKER: &str = "ERR";
pub const OUTLIER_MARKER: &str = "OUT";

/// One decoded reading. Enumerated states are indices into the feature's
/// declared state list; an index past the end is an unknown state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RawValue {
    Number(f64),
    State(u16),
    Error,
    Outlier,
    Missing,
}

impl RawValue {
    pub fn as_number(self) -> Option<f64> {
        match self {
            RawValue::Number(x) => Some(x),
            _ => None,
        }
    }
}

/// All schema features at one time step. `values` is indexed by schema
/// position; identifier slots are unused and hold [`RawValue::Missing`].
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    pub timestamp: f64,
    pub vehicle_id: Arc<str>,
    pub trip_id: Arc<str>,
    pub values: Vec<RawValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripLog {
    pub vehicle_id: Arc<str>,
    pub trip_id: Arc<str>,
    pub frames: Vec<DecodedFrame>,
}

impl TripLog {
    /// Number of whole windows the trip holds.
    pub fn window_count(&self, frames_per_window: usize) -> usize {
        self.frames.len() / frames_per_window
    }

    pub fn window(&self, index: usize, frames_per_window: usize) -> &[DecodedFrame] {
        &self.frames[index * frames_per_window..(index + 1) * frames_per_window]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FrameIoError {
    #[error("trip file: {0}")]
    Csv(#[from] csv::Error),
    #[error("trip file header lacks column `{0}`")]
    MissingColumn(String),
    #[error("trip file line {line}: bad timestamp `{text}`")]
    BadTimestamp { line: u64, text: String },
    #[error("trip file line {line}: expected {expected} fields, found {found}")]
    RaggedRow {
        line: u64,
        expected: usize,
        found: usize,
    },
}

fn format_value(schema: &SignalSchema, feature: usize, value: RawValue) -> String {
    match value {
        RawValue::Number(x) => format!("{x}"),
        RawValue::State(i) => match schema.features()[feature].states().get(i as usize) {
            Some(name) => name.clone(),
            None => ERROR_MARKER.to_string(),
        },
        RawValue::Error => ERROR_MARKER.to_string(),
        RawValue::Outlier => OUTLIER_MARKER.to_string(),
        RawValue::Missing => String::new(),
    }
}

/// Parses one cell for a feature. Unknown state names and unparsable numbers
/// decode to [`RawValue::Error`].
pub fn parse_value(schema: &SignalSchema, feature: usize, cell: &str) -> RawValue {
    match cell {
        "" => RawValue::Missing,
        ERROR_MARKER => RawValue::Error,
        OUTLIER_MARKER => RawValue::Outlier,
        _ => match &schema.features()[feature].kind {
            FeatureKind::Continuous { .. } => match cell.parse::<f64>() {
                Ok(x) if x.is_finite() => RawValue::Number(x),
                _ => RawValue::Error,
            },
            FeatureKind::Enumerated { states } => match states.iter().position(|s| s == cell) {
                Some(i) => RawValue::State(i as u16),
                None => RawValue::Error,
            },
            FeatureKind::SymbolicIdentifier { .. } => RawValue::Missing,
        },
    }
}

pub fn write_trips<W: Write>(
    schema: &SignalSchema,
    trips: &[TripLog],
    out: W,
) -> Result<(), FrameIoError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend(schema.features().iter().map(|f| f.name.clone()));
    w.write_record(&header)?;

    let vehicle = schema.identifier_index(IdentifierRole::Vehicle);
    let trip = schema.identifier_index(IdentifierRole::Trip);
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for t in trips {
        for frame in &t.frames {
            row.clear();
            row.push(format!("{}", frame.timestamp));
            for (i, v) in frame.values.iter().enumerate() {
                if Some(i) == vehicle {
                    row.push(frame.vehicle_id.to_string());
                } else if Some(i) == trip {
                    row.push(frame.trip_id.to_string());
                } else {
                    row.push(format_value(schema, i, *v));
                }
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trips<R: Read>(schema: &SignalSchema, input: R) -> Result<Vec<TripLog>, FrameIoError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FrameIoError::MissingColumn(name.to_string()))
    };
    let ts_col = column("timestamp")?;
    let cols = schema
        .features()
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>, _>>()?;
    let vehicle = schema.identifier_index(IdentifierRole::Vehicle).map(|i| cols[i]);
    let trip = schema.identifier_index(IdentifierRole::Trip).map(|i| cols[i]);

    let mut trips: Vec<TripLog> = Vec::new();
    let empty: Arc<str> = Arc::from("");
    let mut record = csv::StringRecord::new();
    while r.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != header.len() {
            return Err(FrameIoError::RaggedRow {
                line,
                expected: header.len(),
                found: record.len(),
            });
        }
        let ts_text = &record[ts_col];
        let timestamp: f64 = ts_text
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| FrameIoError::BadTimestamp {
                line,
                text: ts_text.to_string(),
            })?;
        let vid = vehicle.map(|c| &record[c]).unwrap_or("");
        let tid = trip.map(|c| &record[c]).unwrap_or("");

        let same = trips
            .last()
            .is_some_and(|t| &*t.vehicle_id == vid && &*t.trip_id == tid);
        if !same {
            let v: Arc<str> = if vid.is_empty() { empty.clone() } else { Arc::from(vid) };
            let t: Arc<str> = if tid.is_empty() { empty.clone() } else { Arc::from(tid) };
            trips.push(TripLog {
                vehicle_id: v,
                trip_id: t,
                frames: Vec::new(),
            });
        }
        let current = trips.last_mut().expect("trip pushed above");
        let values = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if schema.features()[i].is_identifier() {
                    RawValue::Missing
                } else {
                    parse_value(schema, i, &record[c])
                }
            })
            .collect();
        current.frames.push(DecodedFrame {
            timestamp,
            vehicle_id: current.vehicle_id.clone(),
            trip_id: current.trip_id.clone(),
            values,
        });
    }
    Ok(trips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::FeatureSpec;

    fn schema() -> SignalSchema {
        SignalSchema::from_ordered(
            vec![
                FeatureSpec::identifier("vin", IdentifierRole::Vehicle),
                FeatureSpec::identifier("trip", IdentifierRole::Trip),
                FeatureSpec::continuous("speed", "km/h", 0.0, 250.0),
                FeatureSpec::enumerated("gear", &["P", "R", "N", "D"]),
            ],
            1.0,
            2,
        )
        .unwrap()
    }

    fn frame(ts: f64, v: &str, t: &str, values: Vec<RawValue>) -> DecodedFrame {
        DecodedFrame {
            timestamp: ts,
            vehicle_id: Arc::from(v),
            trip_id: Arc::from(t),
            values,
        }
    }

    #[test]
    fn trip_file_round_trip() {
        let s = schema();
        let m = RawValue::Missing;
        let trips = vec![
            TripLog {
                vehicle_id: Arc::from("v1"),
                trip_id: Arc::from("t1"),
                frames: vec![
                    frame(0.0, "v1", "t1", vec![m, m, RawValue::Number(12.5), RawValue::State(3)]),
                    frame(1.0, "v1", "t1", vec![m, m, RawValue::Error, RawValue::Missing]),
                ],
            },
            TripLog {
                vehicle_id: Arc::from("v1"),
                trip_id: Arc::from("t2"),
                frames: vec![frame(
                    5.0,
                    "v1",
                    "t2",
                    vec![m, m, RawValue::Outlier, RawValue::State(1)],
                )],
            },
        ];
        let mut buf = Vec::new();
        write_trips(&s, &trips, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("timestamp,vin,trip,speed,gear\n"));
        assert!(text.contains("0,v1,t1,12.5,D\n"));
        assert!(text.contains("1,v1,t1,ERR,\n"));
        let back = read_trips(&s, buf.as_slice()).unwrap();
        assert_eq!(back, trips);
    }

    #[test]
    fn unknown_state_and_garbage_number_become_errors() {
        let s = schema();
        assert_eq!(parse_value(&s, 3, "X"), RawValue::Error);
        assert_eq!(parse_value(&s, 2, "fast"), RawValue::Error);
        assert_eq!(parse_value(&s, 2, "NaN"), RawValue::Error);
        assert_eq!(parse_value(&s, 3, "R"), RawValue::State(1));
    }

    #[test]
    fn missing_column_is_reported() {
        let s = schema();
        let text = "timestamp,vin,trip,speed\n0,a,b,1\n";
        let err = read_trips(&s, text.as_bytes()).unwrap_err();
        assert!(matches!(err, FrameIoError::MissingColumn(c) if c == "gear"));
    }
}

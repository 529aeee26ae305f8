//! Unified vocabulary and bidirectional frame ↔ token conversion.
//!
//! Id layout is a pure function of `(schema, calibration, sentinel mode)`:
//!
//! 1. specials: `<PAD>`, `<CLS>`, `<MASK>`, `<TS>`, then meta `<NEW_CAR>`, `<NEW_TRIP>`
//! 2. shared sentinels `<OUTLIER>`, `<ERROR>`, `<NULL>` (shared mode only)
//! 3. for each non-identifier feature in schema order: its bins ascending
//!    (continuous) or states in declared order (enumerated), followed by its
//!    own `OUTLIER`/`ERROR`/`NULL` sentinels in per-feature mode.
//!
//! A window of `n` frames serializes to `n` blocks of `<TS>` followed by one
//! token per schema feature in schema order.

mod store;

pub use store::{read_token_file, write_token_file, dump_text, TokenFileError, TOKEN_FILE_MAGIC};

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::calibration::{is_valid_reading, CalibrationError, CalibrationTable, FeatureCalibration};
use crate::frames::{DecodedFrame, RawValue, TripLog};
use crate::schema::{FeatureKind, FeatureSpec, IdentifierRole, SignalSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Cls,
    Mask,
    Ts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Meta {
    NewCar,
    NewTrip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SentinelKind {
    Outlier,
    Error,
    Null,
}

impl SentinelKind {
    const ALL: [SentinelKind; 3] = [SentinelKind::Outlier, SentinelKind::Error, SentinelKind::Null];

    fn tag(self) -> &'static str {
        match self {
            SentinelKind::Outlier => "<OUTLIER>",
            SentinelKind::Error => "<ERROR>",
            SentinelKind::Null => "<NULL>",
        }
    }

    fn offset(self) -> u32 {
        match self {
            SentinelKind::Outlier => 0,
            SentinelKind::Error => 1,
            SentinelKind::Null => 2,
        }
    }
}

/// A vocabulary symbol. Feature references are schema positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Special(Special),
    Meta(Meta),
    Bin { feature: u16, bin: u16 },
    State { feature: u16, state: u16 },
    /// `feature` is `None` for shared sentinels.
    Sentinel { feature: Option<u16>, kind: SentinelKind },
}

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const TS_ID: u32 = 3;
pub const NEW_CAR_ID: u32 = 4;
pub const NEW_TRIP_ID: u32 = 5;
const SPECIAL_COUNT: u32 = 6;

/// Whether sentinel tokens are distinct per feature or shared by all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SentinelMode {
    #[default]
    PerFeature,
    Shared,
}

impl SentinelMode {
    fn as_str(self) -> &'static str {
        match self {
            SentinelMode::PerFeature => "per-feature",
            SentinelMode::Shared => "shared",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("stale calibration: {0}")]
    StaleCalibration(#[from] CalibrationError),
    #[error("vocabulary {found} does not match the one derived from schema and calibration ({expected})")]
    StaleVocabulary { expected: String, found: String },
    #[error("sequence was produced under schema {found}, expected {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("window needs {expected} frames, got {found}")]
    WrongFrameCount { expected: usize, found: usize },
    #[error("frame {index}: timestamp {timestamp} is not {expected} s after its predecessor")]
    Timestamps {
        index: usize,
        timestamp: f64,
        expected: f64,
    },
    #[error("frame {index} has {found} values, schema declares {expected}")]
    FrameWidth {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed token sequence at position {position}: {reason}")]
    Structure { position: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlockKind {
    Bins,
    States,
}

#[derive(Debug, Clone)]
struct FeatureBlock {
    feature: u16,
    kind: BlockKind,
    base: u32,
    values: u32,
    /// First of the three per-feature sentinel ids.
    sentinels: Option<u32>,
}

impl FeatureBlock {
    fn end(&self) -> u32 {
        self.base + self.values + if self.sentinels.is_some() { 3 } else { 0 }
    }
}

/// Bijective token ↔ id map.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    mode: SentinelMode,
    blocks: Vec<FeatureBlock>,
    block_of_position: Vec<Option<usize>>,
    size: u32,
    names: Vec<String>,
    schema_hash: String,
    calibration_hash: String,
    hash: String,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.hash == other.hash
    }
}

impl Vocabulary {
    /// Deterministic id assignment from schema and calibration.
    pub fn build(
        schema: &SignalSchema,
        calibration: &CalibrationTable,
        mode: SentinelMode,
    ) -> Result<Self, TokenizerError> {
        let per_pos = calibration.per_position(schema)?;
        let mut names: Vec<String> = ["<PAD>", "<CLS>", "<MASK>", "<TS>", "<NEW_CAR>", "<NEW_TRIP>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if mode == SentinelMode::Shared {
            names.extend(SentinelKind::ALL.iter().map(|k| k.tag().to_string()));
        }
        let mut blocks = Vec::new();
        let mut block_of_position = vec![None; schema.feature_count()];
        for (pos, f) in schema.features().iter().enumerate() {
            let (kind, values) = match &f.kind {
                FeatureKind::Continuous { .. } => {
                    let c = per_pos[pos].expect("continuous feature calibrated");
                    (BlockKind::Bins, c.bin_count)
                }
                FeatureKind::Enumerated { states } => (BlockKind::States, states.len() as u32),
                FeatureKind::SymbolicIdentifier { .. } => continue,
            };
            let base = names.len() as u32;
            match kind {
                BlockKind::Bins => names.extend((0..values).map(|b| format!("{}#{b}", f.name))),
                BlockKind::States => names.extend(f.states().iter().map(|s| format!("{}={s}", f.name))),
            }
            let sentinels = match mode {
                SentinelMode::PerFeature => {
                    let s = names.len() as u32;
                    names.extend(SentinelKind::ALL.iter().map(|k| format!("{}{}", f.name, k.tag())));
                    Some(s)
                }
                SentinelMode::Shared => None,
            };
            block_of_position[pos] = Some(blocks.len());
            blocks.push(FeatureBlock {
                feature: pos as u16,
                kind,
                base,
                values,
                sentinels,
            });
        }
        let mut vocab = Vocabulary {
            mode,
            blocks,
            block_of_position,
            size: names.len() as u32,
            names,
            schema_hash: schema.hash(),
            calibration_hash: calibration.hash(),
            hash: String::new(),
        };
        vocab.hash = hex::encode(Sha256::digest(vocab.to_text().as_bytes()));
        Ok(vocab)
    }

    /// Rebuilds the vocabulary from its inputs and checks it against a
    /// previously serialized listing.
    pub fn load(
        text: &str,
        schema: &SignalSchema,
        calibration: &CalibrationTable,
    ) -> Result<Self, TokenizerError> {
        let mode = if text.lines().any(|l| l == "# sentinels=shared") {
            SentinelMode::Shared
        } else {
            SentinelMode::PerFeature
        };
        let vocab = Self::build(schema, calibration, mode)?;
        if vocab.to_text() != text {
            return Err(TokenizerError::StaleVocabulary {
                expected: vocab.hash.clone(),
                found: hex::encode(Sha256::digest(text.as_bytes())),
            });
        }
        Ok(vocab)
    }

    /// Tab-separated `id name` listing with a hash header.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# canlm vocabulary v1\n# schema_hash={}\n# calibration_hash={}\n# sentinels={}\n",
            self.schema_hash,
            self.calibration_hash,
            self.mode.as_str()
        );
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&format!("{i}\t{n}\n"));
        }
        out
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn calibration_hash(&self) -> &str {
        &self.calibration_hash
    }

    pub fn sentinel_mode(&self) -> SentinelMode {
        self.mode
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    /// First id that is neither special nor meta nor a shared sentinel.
    pub fn first_feature_id(&self) -> u32 {
        self.blocks.first().map(|b| b.base).unwrap_or(self.size)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < SPECIAL_COUNT
    }

    /// Id range `[start, end)` of all tokens belonging to a schema position.
    pub fn feature_id_range(&self, position: usize) -> Option<(u32, u32)> {
        let b = &self.blocks[self.block_of_position.get(position).copied().flatten()?];
        Some((b.base, b.end()))
    }

    /// Schema position owning a token id (`None` for specials, meta and
    /// shared sentinels).
    pub fn feature_of(&self, id: u32) -> Option<usize> {
        let i = self.blocks.partition_point(|b| b.end() <= id);
        self.blocks
            .get(i)
            .filter(|b| id >= b.base)
            .map(|b| b.feature as usize)
    }

    pub fn id(&self, token: Token) -> Option<u32> {
        let block = |feature: u16| {
            self.block_of_position
                .get(feature as usize)
                .copied()
                .flatten()
                .map(|i| &self.blocks[i])
        };
        match token {
            Token::Special(s) => Some(match s {
                Special::Pad => PAD_ID,
                Special::Cls => CLS_ID,
                Special::Mask => MASK_ID,
                Special::Ts => TS_ID,
            }),
            Token::Meta(Meta::NewCar) => Some(NEW_CAR_ID),
            Token::Meta(Meta::NewTrip) => Some(NEW_TRIP_ID),
            Token::Bin { feature, bin } => {
                let b = block(feature)?;
                (b.kind == BlockKind::Bins && (bin as u32) < b.values).then(|| b.base + bin as u32)
            }
            Token::State { feature, state } => {
                let b = block(feature)?;
                (b.kind == BlockKind::States && (state as u32) < b.values)
                    .then(|| b.base + state as u32)
            }
            Token::Sentinel { feature, kind } => match self.mode {
                SentinelMode::Shared => Some(SPECIAL_COUNT + kind.offset()),
                SentinelMode::PerFeature => {
                    let b = block(feature?)?;
                    b.sentinels.map(|s| s + kind.offset())
                }
            },
        }
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        if id >= self.size {
            return None;
        }
        match id {
            PAD_ID => return Some(Token::Special(Special::Pad)),
            CLS_ID => return Some(Token::Special(Special::Cls)),
            MASK_ID => return Some(Token::Special(Special::Mask)),
            TS_ID => return Some(Token::Special(Special::Ts)),
            NEW_CAR_ID => return Some(Token::Meta(Meta::NewCar)),
            NEW_TRIP_ID => return Some(Token::Meta(Meta::NewTrip)),
            _ => {}
        }
        if self.mode == SentinelMode::Shared && id < SPECIAL_COUNT + 3 {
            return Some(Token::Sentinel {
                feature: None,
                kind: SentinelKind::ALL[(id - SPECIAL_COUNT) as usize],
            });
        }
        let b = &self.blocks[self.blocks.partition_point(|b| b.end() <= id)];
        let off = id - b.base;
        if off < b.values {
            Some(match b.kind {
                BlockKind::Bins => Token::Bin {
                    feature: b.feature,
                    bin: off as u16,
                },
                BlockKind::States => Token::State {
                    feature: b.feature,
                    state: off as u16,
                },
            })
        } else {
            Some(Token::Sentinel {
                feature: Some(b.feature),
                kind: SentinelKind::ALL[(off - b.values) as usize],
            })
        }
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vocabulary of {} tokens ({})", self.size, &self.hash[..12])
    }
}

/// Where a window came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Origin {
    pub vehicle_id: Arc<str>,
    pub trip_id: Arc<str>,
    pub start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub schema_hash: Arc<str>,
    pub vocab_hash: Arc<str>,
    pub origin: Origin,
}

/// Uniform bin of `x` after clamping into the empirical bounds.
pub fn bin_index(calib: &FeatureCalibration, x: f64) -> u32 {
    let n = calib.bin_count;
    let range = calib.range();
    if range <= 0.0 {
        return 0;
    }
    let u = ((x - calib.emp_min) / range).clamp(0.0, 1.0);
    ((u * n as f64).floor() as u32).min(n - 1)
}

/// Midpoint of a bin in raw units.
pub fn bin_midpoint(calib: &FeatureCalibration, bin: u32) -> f64 {
    calib.emp_min + (bin as f64 + 0.5) * calib.range() / calib.bin_count as f64
}

/// Maps one reading of a continuous or enumerated feature to its token.
/// Never fails: anything unusable becomes a sentinel. `calib` must be given
/// for continuous features.
pub fn tokenize_value(
    feature: &FeatureSpec,
    raw: RawValue,
    calib: Option<&FeatureCalibration>,
) -> Token {
    let pos = feature.position as u16;
    let sentinel = |kind| Token::Sentinel {
        feature: Some(pos),
        kind,
    };
    match (&feature.kind, raw) {
        (_, RawValue::Missing) => sentinel(SentinelKind::Null),
        (_, RawValue::Error) => sentinel(SentinelKind::Error),
        (_, RawValue::Outlier) => sentinel(SentinelKind::Outlier),
        (FeatureKind::Continuous { invalid_values, .. }, RawValue::Number(x)) => {
            if !x.is_finite() || invalid_values.contains(&x) {
                sentinel(SentinelKind::Error)
            } else if !is_valid_reading(feature, x) {
                sentinel(SentinelKind::Outlier)
            } else {
                let c = calib.expect("continuous features need a calibration");
                Token::Bin {
                    feature: pos,
                    bin: bin_index(c, x) as u16,
                }
            }
        }
        (FeatureKind::Enumerated { states }, RawValue::State(s)) if (s as usize) < states.len() => {
            Token::State { feature: pos, state: s }
        }
        (FeatureKind::SymbolicIdentifier { .. }, _) => Token::Special(Special::Pad),
        _ => sentinel(SentinelKind::Error),
    }
}

/// Schema + calibration + vocabulary, cross-checked once; all tokenization
/// goes through here.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    schema: SignalSchema,
    calibration: CalibrationTable,
    vocab: Vocabulary,
    calib_index: Vec<Option<usize>>,
    schema_hash: Arc<str>,
    vocab_hash: Arc<str>,
}

impl Tokenizer {
    pub fn new(
        schema: SignalSchema,
        calibration: CalibrationTable,
        mode: SentinelMode,
    ) -> Result<Self, TokenizerError> {
        let vocab = Vocabulary::build(&schema, &calibration, mode)?;
        Self::with_vocabulary(schema, calibration, vocab)
    }

    pub fn with_vocabulary(
        schema: SignalSchema,
        calibration: CalibrationTable,
        vocab: Vocabulary,
    ) -> Result<Self, TokenizerError> {
        let expected = Vocabulary::build(&schema, &calibration, vocab.sentinel_mode())?;
        if expected.hash() != vocab.hash() {
            return Err(TokenizerError::StaleVocabulary {
                expected: expected.hash().to_string(),
                found: vocab.hash().to_string(),
            });
        }
        let calib_index = schema
            .features()
            .iter()
            .map(|f| calibration.features.iter().position(|c| c.feature == f.name))
            .collect();
        Ok(Tokenizer {
            schema_hash: Arc::from(schema.hash()),
            vocab_hash: Arc::from(vocab.hash()),
            schema,
            calibration,
            vocab,
            calib_index,
        })
    }

    pub fn schema(&self) -> &SignalSchema {
        &self.schema
    }

    pub fn calibration(&self) -> &CalibrationTable {
        &self.calibration
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn calibration_at(&self, position: usize) -> Option<&FeatureCalibration> {
        self.calib_index[position].map(|i| &self.calibration.features[i])
    }

    pub fn tokenize_value(&self, position: usize, raw: RawValue) -> Token {
        tokenize_value(&self.schema.features()[position], raw, self.calibration_at(position))
    }

    pub fn token_id(&self, position: usize, raw: RawValue) -> u32 {
        self.vocab
            .id(self.tokenize_value(position, raw))
            .expect("tokenize_value only yields vocabulary tokens")
    }

    /// Serializes one window. `prev_context` is the `(vehicle, trip)` of the
    /// frame preceding the window in the stream, if any.
    pub fn tokenize_window(
        &self,
        frames: &[DecodedFrame],
        prev_context: Option<(&str, &str)>,
    ) -> Result<TokenSequence, TokenizerError> {
        let expected = self.schema.frames_per_window();
        if frames.len() != expected {
            return Err(TokenizerError::WrongFrameCount {
                expected,
                found: frames.len(),
            });
        }
        let step = 1.0 / self.schema.frame_rate_hz();
        for (i, w) in frames.windows(2).enumerate() {
            let dt = w[1].timestamp - w[0].timestamp;
            if !(dt > 0.0) || (dt - step).abs() > 1e-6 * step.max(1.0) {
                return Err(TokenizerError::Timestamps {
                    index: i + 1,
                    timestamp: w[1].timestamp,
                    expected: step,
                });
            }
        }

        let n_features = self.schema.feature_count();
        let mut ids = Vec::with_capacity(self.schema.window_token_len());
        let mut ctx: Option<(&str, &str)> = prev_context;
        for (i, frame) in frames.iter().enumerate() {
            if frame.values.len() != n_features {
                return Err(TokenizerError::FrameWidth {
                    index: i,
                    expected: n_features,
                    found: frame.values.len(),
                });
            }
            let car_changed = ctx.is_none_or(|(v, _)| v != &*frame.vehicle_id);
            let trip_changed = car_changed || ctx.is_none_or(|(_, t)| t != &*frame.trip_id);
            ids.push(TS_ID);
            for (pos, f) in self.schema.features().iter().enumerate() {
                let id = match f.kind {
                    FeatureKind::SymbolicIdentifier {
                        role: IdentifierRole::Vehicle,
                    } => {
                        if car_changed {
                            NEW_CAR_ID
                        } else {
                            PAD_ID
                        }
                    }
                    FeatureKind::SymbolicIdentifier {
                        role: IdentifierRole::Trip,
                    } => {
                        if trip_changed {
                            NEW_TRIP_ID
                        } else {
                            PAD_ID
                        }
                    }
                    _ => self.token_id(pos, frame.values[pos]),
                };
                ids.push(id);
            }
            ctx = Some((&frame.vehicle_id, &frame.trip_id));
        }
        Ok(TokenSequence {
            ids,
            schema_hash: self.schema_hash.clone(),
            vocab_hash: self.vocab_hash.clone(),
            origin: Origin {
                vehicle_id: frames[0].vehicle_id.clone(),
                trip_id: frames[0].trip_id.clone(),
                start: frames[0].timestamp,
            },
        })
    }

    /// Every whole window of every trip, in stream order. Each window's
    /// context is the frame that precedes it in the stream, so the first
    /// window of a trip opens with `<NEW_TRIP>` (and `<NEW_CAR>` when the
    /// vehicle changes).
    pub fn tokenize_trips(&self, trips: &[TripLog]) -> Result<Vec<TokenSequence>, TokenizerError> {
        let fpw = self.schema.frames_per_window();
        let jobs: Vec<(usize, usize)> = trips
            .iter()
            .enumerate()
            .flat_map(|(t, trip)| (0..trip.window_count(fpw)).map(move |w| (t, w)))
            .collect();
        jobs.par_iter()
            .map(|&(t, w)| {
                let prev = if w > 0 {
                    let f = &trips[t].frames[w * fpw - 1];
                    Some((&*f.vehicle_id, &*f.trip_id))
                } else if t > 0 {
                    trips[t - 1].frames.last().map(|f| (&*f.vehicle_id, &*f.trip_id))
                } else {
                    None
                };
                self.tokenize_window(trips[t].window(w, fpw), prev)
            })
            .collect()
    }

    /// Approximate inverse of [`Tokenizer::tokenize_window`]: bins decode to
    /// their midpoints, states exactly, sentinels to their markers.
    pub fn detokenize(&self, seq: &TokenSequence) -> Result<Vec<DecodedFrame>, TokenizerError> {
        if *seq.vocab_hash != *self.vocab.hash() {
            return Err(TokenizerError::StaleVocabulary {
                expected: self.vocab.hash().to_string(),
                found: seq.vocab_hash.to_string(),
            });
        }
        let block = self.schema.block_len();
        if !seq.ids.len().is_multiple_of(block) || seq.ids.is_empty() {
            return Err(TokenizerError::Structure {
                position: seq.ids.len(),
                reason: format!("length {} is not a multiple of {block}", seq.ids.len()),
            });
        }
        let step = 1.0 / self.schema.frame_rate_hz();
        let mut frames = Vec::with_capacity(seq.ids.len() / block);
        for (b, chunk) in seq.ids.chunks(block).enumerate() {
            let at = b * block;
            if chunk[0] != TS_ID {
                return Err(TokenizerError::Structure {
                    position: at,
                    reason: "block does not open with <TS>".into(),
                });
            }
            let mut values = Vec::with_capacity(block - 1);
            for (pos, &id) in chunk[1..].iter().enumerate() {
                let bad = |what: &str| TokenizerError::Structure {
                    position: at + 1 + pos,
                    reason: format!(
                        "{} `{}` in slot of feature `{}`",
                        what,
                        self.vocab.name(id).unwrap_or("?"),
                        self.schema.features()[pos].name
                    ),
                };
                let token = self.vocab.token(id).ok_or_else(|| bad("unknown id"))?;
                let value = match (&self.schema.features()[pos].kind, token) {
                    (FeatureKind::SymbolicIdentifier { role }, t) => {
                        let ok = match (role, t) {
                            (_, Token::Special(Special::Pad)) => true,
                            (IdentifierRole::Vehicle, Token::Meta(Meta::NewCar)) => true,
                            (IdentifierRole::Trip, Token::Meta(Meta::NewTrip)) => true,
                            _ => false,
                        };
                        if !ok {
                            return Err(bad("token"));
                        }
                        RawValue::Missing
                    }
                    (_, Token::Sentinel { feature, kind })
                        if feature.is_none_or(|f| f as usize == pos) =>
                    {
                        match kind {
                            SentinelKind::Outlier => RawValue::Outlier,
                            SentinelKind::Error => RawValue::Error,
                            SentinelKind::Null => RawValue::Missing,
                        }
                    }
                    (FeatureKind::Continuous { .. }, Token::Bin { feature, bin })
                        if feature as usize == pos =>
                    {
                        let c = self.calibration_at(pos).expect("calibrated");
                        RawValue::Number(bin_midpoint(c, bin as u32))
                    }
                    (FeatureKind::Enumerated { .. }, Token::State { feature, state })
                        if feature as usize == pos =>
                    {
                        RawValue::State(state)
                    }
                    _ => return Err(bad("token")),
                };
                values.push(value);
            }
            frames.push(DecodedFrame {
                timestamp: seq.origin.start + b as f64 * step,
                vehicle_id: seq.origin.vehicle_id.clone(),
                trip_id: seq.origin.trip_id.clone(),
                values,
            });
        }
        Ok(frames)
    }
}

#[cfg(test)]
mod tests;

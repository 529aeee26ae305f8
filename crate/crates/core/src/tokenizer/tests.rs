use super::*;
use crate::calibration::{BinLadder, CalibrationTable, FeatureCalibration};
use crate::schema::FeatureSpec;

fn schema() -> SignalSchema {
    SignalSchema::from_ordered(
        vec![
            FeatureSpec::identifier("vin", IdentifierRole::Vehicle),
            FeatureSpec::identifier("trip", IdentifierRole::Trip),
            FeatureSpec::continuous("speed", "km/h", 0.0, 250.0).with_invalid_values(&[222.0]),
            FeatureSpec::enumerated("gear", &["P", "R", "N", "D"]),
        ],
        1.0,
        3,
    )
    .unwrap()
}

fn calibration(s: &SignalSchema) -> CalibrationTable {
    CalibrationTable {
        schema_hash: s.hash(),
        trim_fraction: 0.005,
        quantile_clip: 0.0,
        ladder: BinLadder::default(),
        features: vec![FeatureCalibration {
            feature: "speed".into(),
            emp_min: 0.0,
            emp_max: 100.0,
            delta: 20.0,
            r: 0.2,
            bin_count: 4,
        }],
    }
}

fn tokenizer(mode: SentinelMode) -> Tokenizer {
    let s = schema();
    let c = calibration(&s);
    Tokenizer::new(s, c, mode).unwrap()
}

fn frame(ts: f64, v: &str, t: &str, speed: RawValue, gear: RawValue) -> DecodedFrame {
    DecodedFrame {
        timestamp: ts,
        vehicle_id: Arc::from(v),
        trip_id: Arc::from(t),
        values: vec![RawValue::Missing, RawValue::Missing, speed, gear],
    }
}

#[test]
fn vocabulary_layout() {
    let tk = tokenizer(SentinelMode::PerFeature);
    let v = tk.vocab();
    // 6 specials, 4 bins + 3 sentinels, 4 states + 3 sentinels
    assert_eq!(v.size(), 20);
    assert_eq!(v.name(6), Some("speed#0"));
    assert_eq!(v.name(10), Some("speed<OUTLIER>"));
    assert_eq!(v.name(13), Some("gear=P"));
    assert_eq!(v.name(19), Some("gear<NULL>"));
    assert_eq!(v.first_feature_id(), 6);
    assert_eq!(v.feature_id_range(2), Some((6, 13)));
    assert_eq!(v.feature_of(12), Some(2));
    assert_eq!(v.feature_of(13), Some(3));
    assert_eq!(v.feature_of(5), None);

    let shared = tokenizer(SentinelMode::Shared);
    assert_eq!(shared.vocab().size(), 6 + 3 + 4 + 4);
    assert_ne!(shared.vocab().hash(), v.hash());
}

#[test]
fn ids_and_tokens_are_a_bijection() {
    for mode in [SentinelMode::PerFeature, SentinelMode::Shared] {
        let tk = tokenizer(mode);
        let v = tk.vocab();
        for id in 0..v.size() as u32 {
            let t = v.token(id).unwrap();
            assert_eq!(v.id(t), Some(id), "{mode:?} {id}");
        }
        assert_eq!(v.token(v.size() as u32), None);
    }
}

#[test]
fn value_examples() {
    let tk = tokenizer(SentinelMode::PerFeature);
    let bin = |b| Token::Bin { feature: 2, bin: b };
    let sent = |f, kind| Token::Sentinel {
        feature: Some(f),
        kind,
    };
    assert_eq!(tk.tokenize_value(2, RawValue::Number(0.0)), bin(0));
    assert_eq!(tk.tokenize_value(2, RawValue::Number(24.9)), bin(0));
    assert_eq!(tk.tokenize_value(2, RawValue::Number(25.0)), bin(1));
    assert_eq!(tk.tokenize_value(2, RawValue::Number(100.0)), bin(3));
    // valid for the sensor but past the calibrated bounds: clamped
    assert_eq!(tk.tokenize_value(2, RawValue::Number(180.0)), bin(3));
    assert_eq!(tk.tokenize_value(2, RawValue::Number(-1.0)), sent(2, SentinelKind::Outlier));
    assert_eq!(tk.tokenize_value(2, RawValue::Number(251.0)), sent(2, SentinelKind::Outlier));
    assert_eq!(tk.tokenize_value(2, RawValue::Number(222.0)), sent(2, SentinelKind::Error));
    assert_eq!(tk.tokenize_value(2, RawValue::Number(f64::NAN)), sent(2, SentinelKind::Error));
    assert_eq!(tk.tokenize_value(2, RawValue::Outlier), sent(2, SentinelKind::Outlier));
    assert_eq!(tk.tokenize_value(2, RawValue::Missing), sent(2, SentinelKind::Null));
    assert_eq!(tk.tokenize_value(3, RawValue::State(1)), Token::State { feature: 3, state: 1 });
    assert_eq!(tk.tokenize_value(3, RawValue::State(4)), sent(3, SentinelKind::Error));
    assert_eq!(tk.tokenize_value(3, RawValue::Number(1.0)), sent(3, SentinelKind::Error));
}

#[test]
fn window_blocks_and_meta_tokens() {
    let tk = tokenizer(SentinelMode::PerFeature);
    let n = RawValue::Number;
    let frames = vec![
        frame(10.0, "a", "1", n(10.0), RawValue::State(0)),
        frame(11.0, "a", "1", n(60.0), RawValue::State(3)),
        frame(12.0, "a", "2", RawValue::Missing, RawValue::Error),
    ];
    let seq = tk.tokenize_window(&frames, None).unwrap();
    assert_eq!(
        seq.ids,
        vec![
            TS_ID, NEW_CAR_ID, NEW_TRIP_ID, 6, 13, //
            TS_ID, PAD_ID, PAD_ID, 8, 16, //
            TS_ID, PAD_ID, NEW_TRIP_ID, 12, 18,
        ]
    );
    assert_eq!(&*seq.origin.vehicle_id, "a");
    assert_eq!(seq.origin.start, 10.0);

    let cont = tk.tokenize_window(&frames, Some(("a", "1"))).unwrap();
    assert_eq!(&cont.ids[1..3], &[PAD_ID, PAD_ID]);
    let new_trip = tk.tokenize_window(&frames, Some(("a", "0"))).unwrap();
    assert_eq!(&new_trip.ids[1..3], &[PAD_ID, NEW_TRIP_ID]);
    let new_car = tk.tokenize_window(&frames, Some(("b", "1"))).unwrap();
    assert_eq!(&new_car.ids[1..3], &[NEW_CAR_ID, NEW_TRIP_ID]);
}

#[test]
fn window_rejects_bad_input() {
    let tk = tokenizer(SentinelMode::PerFeature);
    let n = RawValue::Number(1.0);
    let g = RawValue::State(0);
    let short = vec![frame(0.0, "a", "1", n, g)];
    assert!(matches!(
        tk.tokenize_window(&short, None),
        Err(TokenizerError::WrongFrameCount { expected: 3, found: 1 })
    ));
    let disordered = vec![frame(0.0, "a", "1", n, g), frame(2.0, "a", "1", n, g), frame(1.0, "a", "1", n, g)];
    assert!(matches!(
        tk.tokenize_window(&disordered, None),
        Err(TokenizerError::Timestamps { index: 1, .. })
    ));
}

#[test]
fn detokenize_recovers_midpoints_and_markers() {
    let tk = tokenizer(SentinelMode::PerFeature);
    let n = RawValue::Number;
    let frames = vec![
        frame(5.0, "a", "1", n(10.0), RawValue::State(2)),
        frame(6.0, "a", "1", n(300.0), RawValue::Missing),
        frame(7.0, "a", "1", n(99.0), RawValue::State(9)),
    ];
    let seq = tk.tokenize_window(&frames, None).unwrap();
    let back = tk.detokenize(&seq).unwrap();
    assert_eq!(back.len(), 3);
    assert_eq!(back[0].values[2], n(12.5));
    assert_eq!(back[0].values[3], RawValue::State(2));
    assert_eq!(back[1].values[2], RawValue::Outlier);
    assert_eq!(back[1].values[3], RawValue::Missing);
    assert_eq!(back[2].values[2], n(87.5));
    assert_eq!(back[2].values[3], RawValue::Error);
    assert_eq!(back[2].timestamp, 7.0);
    assert_eq!(&*back[2].trip_id, "1");
    assert_eq!(tk.tokenize_window(&back, None).unwrap().ids, seq.ids);
}

#[test]
fn detokenize_reports_structural_errors() {
    let tk = tokenizer(SentinelMode::PerFeature);
    let n = RawValue::Number(1.0);
    let g = RawValue::State(0);
    let frames = vec![frame(0.0, "a", "1", n, g), frame(1.0, "a", "1", n, g), frame(2.0, "a", "1", n, g)];
    let seq = tk.tokenize_window(&frames, None).unwrap();

    let mut bad = seq.clone();
    bad.ids[8] = 14; // gear state in the speed slot
    assert!(matches!(tk.detokenize(&bad), Err(TokenizerError::Structure { position: 8, .. })));
    let mut bad = seq.clone();
    bad.ids[5] = PAD_ID;
    assert!(matches!(tk.detokenize(&bad), Err(TokenizerError::Structure { position: 5, .. })));
    let mut bad = seq.clone();
    bad.ids.pop();
    assert!(matches!(tk.detokenize(&bad), Err(TokenizerError::Structure { .. })));
    let mut bad = seq;
    bad.vocab_hash = Arc::from("0");
    assert!(matches!(tk.detokenize(&bad), Err(TokenizerError::StaleVocabulary { .. })));
}

#[test]
fn vocabulary_text_round_trip_and_staleness() {
    let s = schema();
    let c = calibration(&s);
    for mode in [SentinelMode::PerFeature, SentinelMode::Shared] {
        let v = Vocabulary::build(&s, &c, mode).unwrap();
        let text = v.to_text();
        let back = Vocabulary::load(&text, &s, &c).unwrap();
        assert_eq!(back.to_text(), text);
        assert_eq!(back, v);
    }
    let text = Vocabulary::build(&s, &c, SentinelMode::PerFeature).unwrap().to_text();
    let mut c2 = c.clone();
    c2.features[0].bin_count = 8;
    assert!(matches!(
        Vocabulary::load(&text, &s, &c2),
        Err(TokenizerError::StaleVocabulary { .. })
    ));
}

#[test]
fn mismatched_calibration_is_rejected() {
    let s = schema();
    let mut c = calibration(&s);
    c.schema_hash = "deadbeef".into();
    assert!(matches!(
        Tokenizer::new(s, c, SentinelMode::PerFeature),
        Err(TokenizerError::StaleCalibration(_))
    ));
}

#[test]
fn token_file_round_trip() {
    let tk = tokenizer(SentinelMode::PerFeature);
    let n = RawValue::Number;
    let mk = |v: &str, t0: f64| {
        let frames: Vec<_> = (0..3)
            .map(|i| frame(t0 + i as f64, v, "9", n(i as f64 * 30.0), RawValue::State(i)))
            .collect();
        tk.tokenize_window(&frames, None).unwrap()
    };
    let seqs = vec![mk("a", 0.0), mk("b", 3.0)];
    let mut buf = Vec::new();
    write_token_file(&seqs, &mut buf).unwrap();
    assert_eq!(&buf[..8], TOKEN_FILE_MAGIC);
    let back = read_token_file(buf.as_slice()).unwrap();
    assert_eq!(back, seqs);

    assert!(matches!(
        read_token_file(&buf[..buf.len() - 2]),
        Err(TokenFileError::Truncated { .. })
    ));
    let dump = dump_text(&seqs, tk.vocab());
    assert!(dump.starts_with("a 9 0\t<TS> <NEW_CAR> <NEW_TRIP> speed#0 gear=P <TS>"));
    assert_eq!(dump.lines().count(), 2);
}

use std::collections::HashSet;
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;

use canlm::baselines::compute_metrics;
use canlm::calibration::{calibrate, temporal_variation, CalibrationConfig, FeatureCalibration};
use canlm::datagen::{generate_corpus, inject_collisions, rebalance, CollisionConfig, EventLabel, GeneratorConfig};
use canlm::frames::{RawValue, TripLog};
use canlm::model::IGNORE;
use canlm::pretrain::{apply_masking, MaskingPolicy};
use canlm::rng;
use canlm::schema::reference_schema;
use canlm::tokenizer::{
    bin_index, bin_midpoint, read_token_file, write_token_file, SentinelMode, Tokenizer, CLS_ID, PAD_ID, TS_ID,
};

fn calibration(emp_min: f64, range: f64, bin_count: u32) -> FeatureCalibration {
    FeatureCalibration {
        feature: "x".into(),
        emp_min,
        emp_max: emp_min + range,
        delta: 0.0,
        r: 0.0,
        bin_count,
    }
}

fn small_corpus() -> &'static (Vec<TripLog>, Tokenizer) {
    static CORPUS: OnceLock<(Vec<TripLog>, Tokenizer)> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let schema = reference_schema();
        let gen = GeneratorConfig {
            vehicles: 3,
            trips_per_vehicle: 2,
            trip_length_s: 60,
            ..GeneratorConfig::default()
        };
        let trips = generate_corpus(&schema, &gen, 11).unwrap();
        let table = calibrate(&trips, &schema, &CalibrationConfig::default(), 11).unwrap();
        let tk = Tokenizer::new(schema, table, SentinelMode::PerFeature).unwrap();
        (trips, tk)
    })
}

fn brute_metrics(truth: &[usize], pred: &[usize], k: usize) -> (Vec<[f64; 3]>, f64) {
    let mut out = Vec::new();
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
        let fneg = truth.iter().zip(pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        out.push([prec, rec, f1]);
    }
    let macro_f1 = out.iter().map(|m| m[2]).sum::<f64>() / k as f64;
    (out, macro_f1)
}

proptest! {
    #[test]
    fn bins_reconstruct_within_half_a_width(
        emp_min in -1e3f64..1e3,
        range in 1e-3f64..1e4,
        bins in 1u32..512,
        u in 0.0f64..=1.0,
    ) {
        let c = calibration(emp_min, range, bins);
        let x = emp_min + u * range;
        let b = bin_index(&c, x);
        prop_assert!(b < bins);
        let err = (bin_midpoint(&c, b) - x).abs();
        prop_assert!(err <= c.bin_width() / 2.0 * (1.0 + 1e-9), "err {err} width {}", c.bin_width());
    }

    #[test]
    fn bin_index_is_monotone_and_clamped(
        emp_min in -1e3f64..1e3,
        range in 1e-3f64..1e4,
        bins in 1u32..512,
        a in -2.0f64..3.0,
        b in -2.0f64..3.0,
    ) {
        let c = calibration(emp_min, range, bins);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bin_index(&c, emp_min + lo * range) <= bin_index(&c, emp_min + hi * range));
        prop_assert_eq!(bin_index(&c, emp_min - range), 0);
        prop_assert_eq!(bin_index(&c, emp_min + 2.0 * range), bins - 1);
    }

    #[test]
    fn temporal_variation_matches_oracle(
        series in prop::collection::vec(-1e3f64..1e3, 2..400),
        trim in 0.0f64..0.2,
    ) {
        let mut d: Vec<f64> = series.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let k = (trim * d.len() as f64).floor() as usize;
        let kept = &d[k..d.len() - k];
        let want = kept.iter().sum::<f64>() / kept.len() as f64;
        let (delta, r) = temporal_variation(&series, trim, 10.0).unwrap();
        prop_assert!((delta - want).abs() <= 1e-12 * want.abs().max(1e-300));
        prop_assert!((r - want / 10.0).abs() <= 1e-12 * r.abs().max(1e-300));
    }

    #[test]
    fn masking_touches_only_selected_maskable_positions(
        ids in prop::collection::vec(0u32..40, 1..300),
        seed in any::<u64>(),
    ) {
        let policy = MaskingPolicy::default();
        let mut rng = rng::stream(seed, &[]);
        let m = apply_masking(&ids, &policy, 6..40, &mut rng);
        let maskable = ids.iter().filter(|&&i| i != PAD_ID && i != CLS_ID).count();
        prop_assert_eq!(m.stats.maskable, maskable);
        let expected = if maskable == 0 { 0 } else { ((0.15 * maskable as f64).round() as usize).max(1) };
        prop_assert_eq!(m.stats.selected, expected);
        prop_assert_eq!(m.stats.masked + m.stats.random + m.stats.kept, expected);
        let mut labelled = 0;
        for (i, (&orig, (&inp, &lab))) in ids.iter().zip(m.input.iter().zip(&m.labels)).enumerate() {
            if lab == IGNORE {
                prop_assert_eq!(inp, orig, "unselected position {} changed", i);
            } else {
                prop_assert!(orig != PAD_ID && orig != CLS_ID, "non-maskable position {} selected", i);
                prop_assert_eq!(lab, orig);
                labelled += 1;
            }
        }
        prop_assert_eq!(labelled, expected);
    }

    #[test]
    fn metrics_match_brute_force(
        k in 2usize..=10,
        pairs in prop::collection::vec((0usize..10, 0usize..10), 1..200),
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
        let (report, cm) = compute_metrics(&truth, &pred, k).unwrap();
        let (per_class, macro_f1) = brute_metrics(&truth, &pred, k);
        for (c, m) in per_class.iter().enumerate() {
            prop_assert_eq!(report.per_class[c].precision, m[0]);
            prop_assert_eq!(report.per_class[c].recall, m[1]);
            prop_assert_eq!(report.per_class[c].f1, m[2]);
            prop_assert_eq!(cm.support(c), truth.iter().filter(|&&t| t == c).count() as u64);
        }
        prop_assert!((report.macro_avg.f1 - macro_f1).abs() < 1e-15);
        let acc = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
        prop_assert_eq!(report.accuracy, acc);
    }

    #[test]
    fn rebalance_keeps_positives_and_nests(
        flags in prop::collection::vec(prop::bool::weighted(0.1), 20..400),
        seed in any::<u64>(),
        lo in 0.5f64..3.0,
        extra in 0.0f64..3.0,
    ) {
        let labels: Vec<EventLabel> = flags
            .iter()
            .enumerate()
            .map(|(i, &c)| EventLabel {
                vehicle_id: Arc::from("v"),
                trip_id: Arc::from("t"),
                window: i,
                impact: c.then_some(canlm::datagen::Impact::Front),
            })
            .collect();
        let pos = flags.iter().filter(|&&c| c).count();
        let neg = flags.len() - pos;
        prop_assume!(pos > 0 && neg > 0);
        let hi = lo + extra;
        prop_assume!((hi * pos as f64).round() as usize <= neg);
        let small = rebalance(&labels, lo, seed).unwrap();
        let large = rebalance(&labels, hi, seed).unwrap();
        for keep in [&small, &large] {
            prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(keep.iter().filter(|&&i| flags[i]).count(), pos);
        }
        prop_assert_eq!(small.len() - pos, (lo * pos as f64).round() as usize);
        let big: HashSet<usize> = large.iter().copied().collect();
        prop_assert!(small.iter().all(|i| big.contains(i)));
    }
}

#[test]
fn generated_windows_have_the_block_structure() {
    let (trips, tk) = small_corpus();
    let seqs = tk.tokenize_trips(trips).unwrap();
    let schema = tk.schema();
    assert_eq!(seqs.len(), trips.iter().map(|t| t.window_count(schema.frames_per_window())).sum::<usize>());
    let block = schema.block_len();
    for s in &seqs {
        assert_eq!(s.ids.len(), schema.window_token_len());
        for (i, &id) in s.ids.iter().enumerate() {
            assert_eq!(id == TS_ID, i % block == 0, "position {i}");
            assert!((id as usize) < tk.vocab().size());
        }
    }
}

#[test]
fn detokenize_then_tokenize_is_identity() {
    let (trips, tk) = small_corpus();
    let seqs = tk.tokenize_trips(trips).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let frames = tk.detokenize(s).unwrap();
        let prev = (i > 0).then(|| (&*seqs[i - 1].origin.vehicle_id, &*seqs[i - 1].origin.trip_id));
        let again = tk.tokenize_window(&frames, prev).unwrap();
        assert_eq!(again.ids, s.ids, "window {i}");
    }
}

#[test]
fn detokenized_numbers_lie_within_half_a_bin() {
    let (trips, tk) = small_corpus();
    let fpw = tk.schema().frames_per_window();
    let seqs = tk.tokenize_trips(trips).unwrap();
    let mut checked = 0;
    let mut k = 0;
    for t in trips {
        for w in 0..t.window_count(fpw) {
            let back = tk.detokenize(&seqs[k]).unwrap();
            k += 1;
            for (orig, dec) in t.window(w, fpw).iter().zip(&back) {
                for (pos, (a, b)) in orig.values.iter().zip(&dec.values).enumerate() {
                    if let (RawValue::Number(x), RawValue::Number(y)) = (a, b) {
                        let c = tk.calibration_at(pos).unwrap();
                        if (c.emp_min..=c.emp_max).contains(x) {
                            assert!((x - y).abs() <= c.bin_width() / 2.0 * (1.0 + 1e-9));
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 3_000, "only {checked} readings checked");
}

#[test]
fn token_file_round_trips_generated_windows() {
    let (trips, tk) = small_corpus();
    let seqs = tk.tokenize_trips(trips).unwrap();
    let mut buf = Vec::new();
    write_token_file(&seqs, &mut buf).unwrap();
    assert_eq!(read_token_file(&buf[..]).unwrap(), seqs);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let schema = reference_schema();
    let gen = GeneratorConfig {
        vehicles: 2,
        trips_per_vehicle: 2,
        trip_length_s: 40,
        ..GeneratorConfig::default()
    };
    let col = CollisionConfig {
        rate: 0.2,
        ..CollisionConfig::default()
    };
    let run = |seed| inject_collisions(&schema, generate_corpus(&schema, &gen, seed).unwrap(), &col, seed).unwrap();
    let (a, la) = run(4);
    let (b, lb) = run(4);
    let (c, _) = run(5);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_ne!(a, c);
    assert_eq!(la.iter().filter(|l| l.is_collision()).count(), (0.2 * la.len() as f64).round() as usize);
}

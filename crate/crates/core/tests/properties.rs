//! Property tests: randomized invariants checked against independent models.
//!
//! Each property states a contract the rest of the system leans on — queue
//! retention, bias-curve shape, mapping-matrix algebra, bank refresh
//! normalization, synthetic-bundle well-formedness, and record-file
//! round-tripping — and checks it over proptest-generated inputs.

use proptest::prelude::*;

use protoadapt_core::datagen::{generate, SynthSpec};
use protoadapt_core::engine::{refresh_bank, PredictionRecord};
use protoadapt_core::evalmetrics::bias_sweep;
use protoadapt_core::math::{self, Mat};
use protoadapt_core::prototypes::{mapped_unseen_prototypes, mapping_matrix};
use protoadapt_core::queue::ConfidenceQueue;
use protoadapt_core::space::build_composition_space;
use protoadapt_core::{Error, Manifest, Pair, World};

// ---------------------------------------------------------------------------
// Queue retention
// ---------------------------------------------------------------------------

proptest! {
    /// After any sequence of sentinel prefills and regular offers, the queue
    /// holds exactly the lowest-entropy offers (earliest arrival winning
    /// ties), with surviving sentinels only in otherwise-unused slots.
    #[test]
    fn queue_retains_lowest_entropies(
        capacity in 1usize..12,
        prefill in 0usize..14,
        raw_offers in prop::collection::vec(0u32..40, 0..120),
    ) {
        let mut q = ConfidenceQueue::new(capacity);
        let mut kept_sentinels = 0usize;
        for _ in 0..prefill {
            if q.insert_sentinel(vec![f64::INFINITY, -1.0]) {
                kept_sentinels += 1;
            }
        }
        prop_assert_eq!(kept_sentinels, prefill.min(capacity));

        // Coarse grid so duplicate entropies are common.
        // Second payload component is arrival+1 so the mean can never be the
        // zero vector (which would make the prototype degenerate).
        let offers: Vec<f64> = raw_offers.iter().map(|&v| v as f64 / 8.0).collect();
        for (i, &h) in offers.iter().enumerate() {
            q.insert(h, vec![h, i as f64 + 1.0]);
        }

        // Independent model: stable sort by entropy, truncate to capacity.
        let mut model: Vec<(f64, usize)> =
            offers.iter().copied().enumerate().map(|(i, h)| (h, i)).collect();
        model.sort_by(|a, b| a.0.total_cmp(&b.0));
        model.truncate(capacity);
        let expected_sentinels = kept_sentinels.min(capacity - model.len());

        let entries = q.entries();
        prop_assert_eq!(entries.len(), model.len() + expected_sentinels);
        for (entry, (h, arrival)) in entries.iter().zip(&model) {
            prop_assert!(!entry.sentinel);
            prop_assert_eq!(entry.entropy, *h);
            // The feature payload travels with its entropy, and ties resolve
            // to the earliest arrival exactly as the stable sort predicts.
            prop_assert_eq!(entry.feature[0], *h);
            prop_assert_eq!(entry.feature[1], *arrival as f64 + 1.0);
        }
        for entry in &entries[model.len()..] {
            prop_assert!(entry.sentinel);
        }

        // Ascending entropy order within the queue.
        for w in entries.windows(2) {
            prop_assert!(w[0].entropy <= w[1].entropy);
        }

        // The prototype is a unit vector whenever anything is stored (the
        // +inf sentinel payload here forces None via non-finite mean, so
        // only check the sentinel-free case).
        if expected_sentinels == 0 && !entries.is_empty() {
            let proto = q.visual_prototype().expect("non-empty queue");
            prop_assert!((math::l2_norm(&proto) - 1.0).abs() < 1e-9);
        }
    }
}

// ---------------------------------------------------------------------------
// Bias sweep
// ---------------------------------------------------------------------------

fn tiny_space() -> protoadapt_core::CompositionSpace {
    let manifest = Manifest {
        attributes: vec!["a0".into(), "a1".into()],
        objects: vec!["o0".into(), "o1".into()],
        seen_pairs: vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)],
        unseen_pairs: vec![Pair::new(1, 1)],
        world: World::default(),
        files: None,
    };
    build_composition_space(&manifest, None).expect("valid manifest")
}

fn record(idx: usize, unseen_true: bool, correct: bool, bs: f64, bu: f64) -> PredictionRecord {
    let seen = Pair::new(0, 0);
    let unseen = Pair::new(1, 1);
    let true_pair = if unseen_true { unseen } else { seen };
    // Wrong predictions point at the other pair on the same side.
    let best_seen = if !unseen_true && !correct {
        Pair::new(0, 1)
    } else {
        seen
    };
    PredictionRecord {
        sample_index: idx,
        true_pair,
        pseudo_pair: true_pair,
        entropy: 0.5,
        best_seen_pair: best_seen,
        best_seen_logit: bs,
        best_unseen_pair: unseen,
        best_unseen_logit: bu,
        loss_pe: 0.0,
        loss_mcrl: 0.0,
        rolled_back: false,
    }
}

proptest! {
    /// Sweeping the seen-side bias trades seen accuracy for unseen accuracy
    /// monotonically, and the induced area/HM stay in [0, 1].
    #[test]
    fn bias_curve_is_monotone_with_bounded_auc(
        raw in prop::collection::vec(
            (any::<bool>(), any::<bool>(), -12i32..=12, -12i32..=12),
            2..60,
        ),
    ) {
        let space = tiny_space();
        let mut records = vec![
            record(0, false, true, 1.0, 0.0),
            record(1, true, true, 0.0, 1.0),
        ];
        for (i, &(unseen_true, correct, bs, bu)) in raw.iter().enumerate() {
            records.push(record(
                i + 2,
                unseen_true,
                correct,
                bs as f64 / 4.0,
                bu as f64 / 4.0,
            ));
        }
        let curve = bias_sweep(&records, &space).expect("both sides present");

        prop_assert!((0.0..=1.0).contains(&curve.auc));
        prop_assert!((0.0..=1.0).contains(&curve.best_hm));
        prop_assert!((0.0..=1.0).contains(&curve.seen_best));
        prop_assert!((0.0..=1.0).contains(&curve.unseen_best));
        for w in curve.points.windows(2) {
            prop_assert!(w[0].bias <= w[1].bias);
            prop_assert!(w[0].unseen_accuracy <= w[1].unseen_accuracy + 1e-12);
            prop_assert!(w[0].seen_accuracy >= w[1].seen_accuracy - 1e-12);
        }
        let first = curve.points.first().expect("curve has points");
        let last = curve.points.last().expect("curve has points");
        prop_assert!((last.unseen_accuracy - curve.unseen_best).abs() < 1e-12);
        prop_assert!((first.seen_accuracy - curve.seen_best).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Mapping algebra
// ---------------------------------------------------------------------------

fn unit_bank(rows: Vec<Vec<f64>>) -> Option<Mat> {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let mut m = Mat::from_vec(rows.len(), d, flat).ok()?;
    m.l2_normalize_rows().ok()?;
    Some(m)
}

proptest! {
    /// Every mapping column is a probability distribution over seen classes,
    /// and mapped prototypes come out unit-norm (or fail loudly on exact
    /// cancellation).
    #[test]
    fn mapping_columns_are_distributions(
        seen_rows in prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, 3), 1..6),
        unseen_rows in prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, 3), 1..4),
        tau_m in 0.05f64..1.0,
    ) {
        let (Some(t_seen), Some(t_unseen)) = (unit_bank(seen_rows), unit_bank(unseen_rows)) else {
            // A zero-norm random row: nothing to test.
            return Ok(());
        };
        let mapping = mapping_matrix(&t_seen, &t_unseen, tau_m).expect("valid banks");
        prop_assert_eq!(mapping.rows(), t_seen.rows());
        prop_assert_eq!(mapping.cols(), t_unseen.rows());
        for u in 0..mapping.cols() {
            let mut sum = 0.0;
            for s in 0..mapping.rows() {
                let w = mapping.row(s)[u];
                prop_assert!(w >= 0.0);
                sum += w;
            }
            prop_assert!((sum - 1.0).abs() < 1e-9, "column {u} sums to {sum}");
        }

        match mapped_unseen_prototypes(&mapping, &t_seen) {
            Ok(mapped) => {
                prop_assert_eq!(mapped.rows(), t_unseen.rows());
                for r in 0..mapped.rows() {
                    prop_assert!((math::l2_norm(mapped.row(r)) - 1.0).abs() < 1e-9);
                }
            }
            // Convex combinations of unit rows can cancel to zero norm;
            // that must surface as the typed error, not as a NaN row.
            Err(Error::ZeroNormRow { .. }) => {}
            Err(other) => prop_assert!(false, "unexpected error: {other}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Bank refresh
// ---------------------------------------------------------------------------

proptest! {
    /// Refreshing with deltas yields unit rows and reports the
    /// pre-normalization norms; zero-delta rows pass through bit-for-bit.
    #[test]
    fn refresh_bank_normalizes_only_moved_rows(
        rows in prop::collection::vec(
            (prop::collection::vec(-2.0f64..2.0, 4), prop::collection::vec(-1.0f64..1.0, 4), any::<bool>(), 0.0f64..2.0),
            1..8),
    ) {
        let n = rows.len();
        let base_flat: Vec<f64> = rows.iter().flat_map(|(b, _, _, _)| b.clone()).collect();
        let delta_flat: Vec<f64> = rows
            .iter()
            .flat_map(|(_, d, zero, _)| {
                if *zero { vec![0.0; 4] } else { d.clone() }
            })
            .collect();
        let weights: Vec<f64> = rows.iter().map(|(_, _, _, w)| *w).collect();
        let base = Mat::from_vec(n, 4, base_flat).unwrap();
        let delta = Mat::from_vec(n, 4, delta_flat).unwrap();

        // delta: None leaves every row untouched bit-for-bit.
        let (frozen, _) = refresh_bank(&base, None, &weights).unwrap();
        for c in 0..n {
            for k in 0..4 {
                prop_assert_eq!(frozen.row(c)[k].to_bits(), base.row(c)[k].to_bits());
            }
        }

        match refresh_bank(&base, Some(&delta), &weights) {
            Ok((bank, norms)) => {
                for (c, (b, d, zero, w)) in rows.iter().enumerate() {
                    let moved: Vec<f64> = if *zero {
                        b.clone()
                    } else {
                        b.iter().zip(d).map(|(x, y)| x + w * y).collect()
                    };
                    prop_assert!((norms[c] - math::l2_norm(&moved)).abs() < 1e-12);
                    if *zero || d.iter().all(|&x| x == 0.0) {
                        for (got, want) in bank.row(c).iter().zip(b) {
                            prop_assert_eq!(got.to_bits(), want.to_bits());
                        }
                    } else {
                        prop_assert!((math::l2_norm(bank.row(c)) - 1.0).abs() < 1e-12);
                    }
                }
            }
            // A moved row may land on (near-)zero norm; the typed runtime
            // error is the contract for that collapse.
            Err(Error::Runtime(_)) => {}
            Err(other) => prop_assert!(false, "unexpected error: {other}"),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic bundles
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    /// Generated bundles are well-formed: unit text rows, labels inside the
    /// right pair sets, exact row counts, and full determinism per seed.
    #[test]
    fn synth_bundles_are_well_formed(
        attributes in 2usize..5,
        objects in 2usize..5,
        dim in 4usize..16,
        seen_fraction in 0.4f64..0.9,
        tail_exponent in 0.0f64..1.5,
        test_samples in 10usize..60,
        seed in 0u64..1000,
    ) {
        let spec = SynthSpec {
            attributes,
            objects,
            dim,
            seen_fraction,
            tail_exponent,
            test_samples,
            train_per_seen: 3,
            seed,
            ..SynthSpec::default()
        };
        // Tiny grids can make the requested seen fraction impossible (every
        // attribute and object must appear among the seen pairs); those specs
        // are rejected by validation and carry nothing to test.
        prop_assume!(spec.validate().is_ok());
        let bundle = generate(&spec).expect("valid spec");
        let space = build_composition_space(&bundle.manifest, None).expect("valid manifest");

        prop_assert_eq!(bundle.text.rows(), space.candidate_count());
        prop_assert_eq!(bundle.text.cols(), dim);
        for r in 0..bundle.text.rows() {
            prop_assert!((math::l2_norm(bundle.text.row(r)) - 1.0).abs() < 1e-9);
        }

        // Training rows cover exactly the seen pairs, train_per_seen each.
        prop_assert_eq!(bundle.train_features.rows(), bundle.train_labels.len());
        for pair in &bundle.train_labels {
            let idx = space.candidate_index(*pair).expect("label in candidates");
            prop_assert!(space.is_seen(idx), "train label {pair:?} must be seen");
        }
        for &pair in space.seen_pairs() {
            let count = bundle.train_labels.iter().filter(|&&p| p == pair).count();
            prop_assert_eq!(count, 3, "seen pair {:?}", pair);
        }

        // Test stream has the requested length and stays inside the world.
        prop_assert_eq!(bundle.test_features.rows(), test_samples);
        prop_assert_eq!(bundle.test_labels.len(), test_samples);
        for pair in &bundle.test_labels {
            prop_assert!(space.candidate_index(*pair).is_some());
        }
        for r in 0..bundle.test_features.rows() {
            prop_assert!((math::l2_norm(bundle.test_features.row(r)) - 1.0).abs() < 1e-9);
        }

        // Same spec, same bundle — bit for bit.
        let again = generate(&spec).expect("valid spec");
        prop_assert_eq!(
            serde_json::to_value(&again.manifest).unwrap(),
            serde_json::to_value(&bundle.manifest).unwrap()
        );
        prop_assert_eq!(&again.text, &bundle.text);
        prop_assert_eq!(&again.train_features, &bundle.train_features);
        prop_assert_eq!(&again.test_features, &bundle.test_features);
        prop_assert_eq!(&again.test_labels, &bundle.test_labels);
    }
}

// ---------------------------------------------------------------------------
// Record round-trip
// ---------------------------------------------------------------------------

proptest! {
    /// Records written as JSON lines read back exactly, floats included.
    #[test]
    fn record_files_roundtrip_exactly(
        raw in prop::collection::vec(
            (0usize..1000, any::<bool>(), -1e6f64..1e6, -1e6f64..1e6, 0.0f64..10.0, any::<bool>()),
            1..40),
    ) {
        let records: Vec<PredictionRecord> = raw
            .iter()
            .enumerate()
            .map(|(i, &(idx, unseen_true, bs, bu, h, rolled))| {
                let mut r = record(idx, unseen_true, true, bs, bu);
                r.sample_index = i;
                r.entropy = h;
                r.loss_pe = h * 0.5;
                r.loss_mcrl = bs * 1e-7;
                r.rolled_back = rolled;
                r
            })
            .collect();
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("records.jsonl");
        protoadapt_core::io::write_records(&path, &records).expect("write");
        let back = protoadapt_core::io::read_records(&path).expect("read");
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in back.iter().zip(&records) {
            prop_assert_eq!(a, b);
            // Bit-exact floats, not merely equal-comparing ones.
            prop_assert_eq!(a.best_seen_logit.to_bits(), b.best_seen_logit.to_bits());
            prop_assert_eq!(a.entropy.to_bits(), b.entropy.to_bits());
        }
    }
}

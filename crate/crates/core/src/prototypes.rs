//! Prototype store: admission entropy, the seen→unseen textual mapping, and
//! queue warm-starting.

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::queue::ConfidenceQueue;
use crate::space::CompositionSpace;
use crate::space::Pair;

/// Softmax over cosine similarities at temperature `tau`, plus its Shannon
/// entropy (nats). Rows of `prototypes` and `feature` must be unit-norm, so
/// cosine reduces to the dot product.
pub fn prediction_entropy(feature: &[f64], prototypes: &Mat, tau: f64) -> Result<(f64, Vec<f64>)> {
    if prototypes.rows() == 0 {
        return Err(Error::Input("no prototypes".into()));
    }
    if feature.len() != prototypes.cols() {
        return Err(Error::Shape(format!(
            "feature dim {} vs prototype dim {}",
            feature.len(),
            prototypes.cols()
        )));
    }
    if !feature.iter().all(|x| x.is_finite()) {
        return Err(Error::Input("non-finite feature".into()));
    }
    let logits: Vec<f64> = (0..prototypes.rows())
        .map(|c| math::dot(feature, prototypes.row(c)) / tau)
        .collect();
    let p = math::softmax(&logits);
    Ok((math::entropy(&p), p))
}

/// Seen→unseen mapping: column `u` is the softmax, over seen classes, of
/// cos(t_s, t_u)/tau_m. Shape |seen| × |unseen|; every column sums to 1.
pub fn mapping_matrix(t_seen: &Mat, t_unseen: &Mat, tau_m: f64) -> Result<Mat> {
    if t_seen.rows() == 0 || t_unseen.rows() == 0 {
        return Err(Error::Input(
            "mapping needs at least one seen and one unseen prototype".into(),
        ));
    }
    if t_seen.cols() != t_unseen.cols() {
        return Err(Error::Shape("seen/unseen prototype dims differ".into()));
    }
    let (ns, nu) = (t_seen.rows(), t_unseen.rows());
    let mut m = Mat::zeros(ns, nu);
    for u in 0..nu {
        let sims: Vec<f64> = (0..ns)
            .map(|s| math::dot(t_seen.row(s), t_unseen.row(u)) / tau_m)
            .collect();
        let col = math::softmax(&sims);
        for (s, w) in col.iter().enumerate() {
            m.row_mut(s)[u] = *w;
        }
    }
    Ok(m)
}

/// Mapped unseen visual prototypes: v_u = normalize(Mᵀ v_s), one row per
/// unseen class.
pub fn mapped_unseen_prototypes(mapping: &Mat, v_seen: &Mat) -> Result<Mat> {
    if mapping.rows() != v_seen.rows() {
        return Err(Error::Shape(format!(
            "mapping has {} seen rows, prototypes have {}",
            mapping.rows(),
            v_seen.rows()
        )));
    }
    let (nu, d) = (mapping.cols(), v_seen.cols());
    let mut out = Mat::zeros(nu, d);
    for u in 0..nu {
        let row = out.row_mut(u);
        for s in 0..mapping.rows() {
            let w = mapping.row(s)[u];
            let vs = v_seen.row(s);
            for k in 0..d {
                row[k] += w * vs[k];
            }
        }
    }
    out.l2_normalize_rows()?;
    Ok(out)
}

/// Build the per-candidate queue bank and optionally warm it:
/// seen classes get their K lowest-admission-entropy training features,
/// unseen classes get one sentinel carrying the mapped prototype.
/// Returns the queues plus human-readable warnings (e.g. a seen class with
/// no training features).
pub fn warm_start_queues(
    space: &CompositionSpace,
    text: &Mat,
    train_features: &Mat,
    train_labels: &[Pair],
    config: &EngineConfig,
) -> Result<(Vec<ConfidenceQueue>, Vec<String>)> {
    if train_features.rows() != train_labels.len() {
        return Err(Error::Shape(format!(
            "{} training features vs {} labels",
            train_features.rows(),
            train_labels.len()
        )));
    }
    if text.rows() != space.candidate_count() {
        return Err(Error::Shape(format!(
            "{} textual prototypes vs {} candidates",
            text.rows(),
            space.candidate_count()
        )));
    }
    let k = config.queue_capacity;
    let mut queues: Vec<ConfidenceQueue> = (0..space.candidate_count())
        .map(|_| ConfidenceQueue::new(k))
        .collect();
    let mut warnings = Vec::new();

    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); space.candidate_count()];
    if config.switches.warmstart_seen {
        for (i, label) in train_labels.iter().enumerate() {
            let c = space.candidate_index(*label).ok_or_else(|| {
                Error::Input(format!(
                    "train label ({}, {}) is not a candidate pair",
                    label.attr, label.obj
                ))
            })?;
            if !space.is_seen(c) {
                return Err(Error::Input(format!(
                    "train label ({}, {}) is not a seen pair",
                    label.attr, label.obj
                )));
            }
            let (h, _) = prediction_entropy(train_features.row(i), text, config.tau)?;
            per_class[c].push((h, i));
        }
        for &c in space.seen_candidate_indices() {
            if per_class[c].is_empty() {
                warnings.push(format!(
                    "seen class {} has no training features; leaving its queue empty",
                    space.pair_label(space.candidates()[c])
                ));
                continue;
            }
            per_class[c].sort_by(|a, b| a.0.total_cmp(&b.0));
            for &(h, i) in per_class[c].iter().take(k) {
                queues[c].insert(h, train_features.row(i).to_vec());
            }
        }
    }

    if config.switches.warmstart_unseen {
        let seen_idx = space.seen_candidate_indices();
        let unseen_idx = space.unseen_candidate_indices();
        let d = text.cols();
        let mut t_seen = Mat::zeros(seen_idx.len(), d);
        let mut v_seen = Mat::zeros(seen_idx.len(), d);
        for (r, &c) in seen_idx.iter().enumerate() {
            t_seen.row_mut(r).copy_from_slice(text.row(c));
            // Seen visual prototypes come from the freshly warmed queues;
            // with seen warm-start off they fall back to the textual rows.
            match queues[c].visual_prototype() {
                Some(v) => v_seen.row_mut(r).copy_from_slice(&v),
                None => v_seen.row_mut(r).copy_from_slice(text.row(c)),
            }
        }
        let mut t_unseen = Mat::zeros(unseen_idx.len(), d);
        for (r, &c) in unseen_idx.iter().enumerate() {
            t_unseen.row_mut(r).copy_from_slice(text.row(c));
        }
        let mapping = mapping_matrix(&t_seen, &t_unseen, config.tau_m)?;
        let mapped = mapped_unseen_prototypes(&mapping, &v_seen)?;
        for (r, &c) in unseen_idx.iter().enumerate() {
            queues[c].insert_sentinel(mapped.row(r).to_vec());
        }
    }

    Ok((queues, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{build_composition_space, Manifest, World};

    fn unit_rows(rows: &[Vec<f64>]) -> Mat {
        let mut m = Mat::from_rows(rows).unwrap();
        m.l2_normalize_rows().unwrap();
        m
    }

    #[test]
    fn entropy_of_uniform_dots_is_ln_n() {
        let protos = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = vec![std::f64::consts::FRAC_1_SQRT_2; 2];
        let (h, p) = prediction_entropy(&f, &protos, 1.0).unwrap();
        assert!((h - 2.0_f64.ln()).abs() < 1e-12);
        assert!((p[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_frozen_two_class_case() {
        // dots (1, 0) at tau = 1: p = (e/(e+1), 1/(e+1)), h = 0.5822031088882179.
        let protos = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (h, p) = prediction_entropy(&[1.0, 0.0], &protos, 1.0).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((h - 0.582_203_108_888_217_9).abs() < 1e-12);
    }

    #[test]
    fn lower_tau_sharpens() {
        let protos = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (h1, _) = prediction_entropy(&[1.0, 0.0], &protos, 1.0).unwrap();
        let (h2, _) = prediction_entropy(&[1.0, 0.0], &protos, 0.1).unwrap();
        assert!(h2 < h1);
    }

    #[test]
    fn entropy_rejects_bad_input() {
        let protos = unit_rows(&[vec![1.0, 0.0]]);
        assert!(prediction_entropy(&[f64::NAN, 0.0], &protos, 1.0).is_err());
        assert!(prediction_entropy(&[1.0, 0.0, 0.0], &protos, 1.0).is_err());
    }

    #[test]
    fn mapping_single_seen_is_all_ones() {
        let t_seen = unit_rows(&[vec![1.0, 0.0]]);
        let t_unseen = unit_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]]);
        let m = mapping_matrix(&t_seen, &t_unseen, 0.5).unwrap();
        assert_eq!(m.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn mapping_frozen_two_seen_case() {
        // Cosines (0.9, 0.1)/n against axis-aligned seen rows; tau_m = 0.1/n
        // makes the logits exactly (9, 1) → softmax ≈ (0.99966465, 0.00033535).
        let e = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let u = unit_rows(&[vec![0.9, 0.1]]);
        let norm = (0.9_f64 * 0.9 + 0.1 * 0.1).sqrt();
        let m = mapping_matrix(&e, &u, 0.1 / norm).unwrap();
        assert!((m.row(0)[0] - 0.999_664_649_869_534_1).abs() < 1e-9);
        assert!((m.row(1)[0] - 3.353_501_304_664_781e-4).abs() < 1e-9);
        let col_sum: f64 = m.row(0)[0] + m.row(1)[0];
        assert!((col_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn columns_sum_to_one() {
        let t_seen = unit_rows(&[
            vec![1.0, 0.2, 0.0],
            vec![0.0, 1.0, 0.3],
            vec![0.5, 0.5, 0.5],
        ]);
        let t_unseen = unit_rows(&[vec![0.3, 0.3, 1.0], vec![1.0, 0.0, 0.1]]);
        let m = mapping_matrix(&t_seen, &t_unseen, 0.07).unwrap();
        for u in 0..m.cols() {
            let s: f64 = (0..m.rows()).map(|r| m.row(r)[u]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn selector_column_copies_the_seen_prototype() {
        let v_seen = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut m = Mat::zeros(2, 1);
        m.row_mut(0)[0] = 1.0;
        let out = mapped_unseen_prototypes(&m, &v_seen).unwrap();
        assert_eq!(out.row(0), v_seen.row(0));
    }

    #[test]
    fn even_mix_of_orthonormal_rows() {
        let v_seen = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut m = Mat::zeros(2, 1);
        m.row_mut(0)[0] = 0.5;
        m.row_mut(1)[0] = 0.5;
        let out = mapped_unseen_prototypes(&m, &v_seen).unwrap();
        let s = 0.5_f64.sqrt();
        assert!((out.row(0)[0] - s).abs() < 1e-12 && (out.row(0)[1] - s).abs() < 1e-12);
    }

    fn small_space() -> CompositionSpace {
        let m = Manifest {
            attributes: vec!["a0".into(), "a1".into()],
            objects: vec!["o0".into(), "o1".into()],
            seen_pairs: vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)],
            unseen_pairs: vec![Pair::new(1, 1)],
            world: World::Closed,
            files: None,
        };
        build_composition_space(&m, None).unwrap()
    }

    fn small_text() -> Mat {
        unit_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ])
    }

    #[test]
    fn warm_start_keeps_k_lowest_and_sentinels_unseen() {
        let space = small_space();
        let text = small_text();
        let cfg = EngineConfig {
            queue_capacity: 2,
            tau: 0.5,
            ..EngineConfig::default()
        };
        // Five features for class 0 at varying alignment, one for class 1, none for class 2.
        let feats = unit_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.5, 0.0],
            vec![1.0, 0.1, 0.0],
            vec![1.0, 0.9, 0.3],
            vec![1.0, 0.05, 0.0],
            vec![0.1, 1.0, 0.0],
        ]);
        let labels = vec![
            Pair::new(0, 0),
            Pair::new(0, 0),
            Pair::new(0, 0),
            Pair::new(0, 0),
            Pair::new(0, 0),
            Pair::new(0, 1),
        ];
        let (queues, warnings) = warm_start_queues(&space, &text, &feats, &labels, &cfg).unwrap();
        assert_eq!(queues[0].len(), 2);
        // Retained = the two lowest admission entropies among the five offers.
        let mut hs: Vec<f64> = (0..5)
            .map(|i| prediction_entropy(feats.row(i), &text, cfg.tau).unwrap().0)
            .collect();
        hs.sort_by(f64::total_cmp);
        let got: Vec<f64> = queues[0].entries().iter().map(|e| e.entropy).collect();
        assert_eq!(got, &hs[..2]);
        assert_eq!(queues[1].len(), 1);
        // Class 2 had no features → warning, empty queue.
        assert!(queues[2].is_empty());
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("no training features"));
        // Unseen class got exactly one sentinel.
        assert_eq!(queues[3].len(), 1);
        assert!(queues[3].entries()[0].sentinel);
    }

    #[test]
    fn warm_start_is_pure() {
        let space = small_space();
        let text = small_text();
        let cfg = EngineConfig::default();
        let feats = unit_rows(&[
            vec![1.0, 0.1, 0.0],
            vec![0.2, 1.0, 0.0],
            vec![0.0, 0.3, 1.0],
        ]);
        let labels = vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)];
        let (q1, _) = warm_start_queues(&space, &text, &feats, &labels, &cfg).unwrap();
        let (q2, _) = warm_start_queues(&space, &text, &feats, &labels, &cfg).unwrap();
        for (a, b) in q1.iter().zip(&q2) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.entries().iter().zip(b.entries()) {
                assert_eq!(x.entropy.to_bits(), y.entropy.to_bits());
                let xb: Vec<u64> = x.feature.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.feature.iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn warm_start_rejects_unseen_train_label() {
        let space = small_space();
        let text = small_text();
        let cfg = EngineConfig::default();
        let feats = unit_rows(&[vec![1.0, 0.0, 0.0]]);
        let labels = vec![Pair::new(1, 1)];
        assert!(warm_start_queues(&space, &text, &feats, &labels, &cfg).is_err());
    }

    #[test]
    fn warm_start_switches_disable_each_half() {
        let space = small_space();
        let text = small_text();
        let mut cfg = EngineConfig::default();
        cfg.switches.warmstart_seen = false;
        let feats = unit_rows(&[vec![1.0, 0.1, 0.0]]);
        let labels = vec![Pair::new(0, 0)];
        let (q, _) = warm_start_queues(&space, &text, &feats, &labels, &cfg).unwrap();
        assert!(q[0].is_empty());
        assert_eq!(q[3].len(), 1); // unseen sentinel still present
        cfg.switches.warmstart_unseen = false;
        let (q, _) = warm_start_queues(&space, &text, &feats, &labels, &cfg).unwrap();
        assert!(q.iter().all(|x| x.is_empty()));
    }
}

//! Offline evaluation over prediction records: the seen/unseen bias sweep
//! (AUC, best harmonic mean), long-tail group accuracies, and cumulative
//! accuracy along the stream.
//!
//! "Accuracy" everywhere here is raw bias-0 exact-pair accuracy: a record is
//! correct when the pair it predicts at bias 0 equals its true pair.

use crate::engine::PredictionRecord;
use crate::error::{Error, Result};
use crate::space::{CompositionSpace, Pair};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCurvePoint {
    pub bias: f64,
    pub seen_accuracy: f64,
    pub unseen_accuracy: f64,
}

/// Seen/unseen trade-off curve traced by sweeping a bias subtracted from the
/// seen logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub points: Vec<BiasCurvePoint>,
    /// Area under the unseen-vs-seen accuracy curve (trapezoidal).
    pub auc: f64,
    /// Best harmonic mean of seen and unseen accuracy along the curve.
    pub best_hm: f64,
    /// Seen accuracy with the bias low enough that every record picks seen.
    pub seen_best: f64,
    /// Unseen accuracy with the bias high enough that every record picks unseen.
    pub unseen_best: f64,
}

fn side_of(record: &PredictionRecord, space: &CompositionSpace) -> Result<bool> {
    let idx = space.candidate_index(record.true_pair).ok_or_else(|| {
        Error::Eval(format!(
            "record {}: true pair ({}, {}) is not a candidate",
            record.sample_index, record.true_pair.attr, record.true_pair.obj
        ))
    })?;
    Ok(space.is_seen(idx))
}

/// Sweep the decision bias over every distinct logit gap (plus one sentinel
/// on each side) and trace seen/unseen accuracies.
///
/// At bias b a record predicts its best seen pair iff
/// best_seen_logit ≥ best_unseen_logit + b; seen accuracy is therefore
/// non-increasing and unseen accuracy non-decreasing in b.
pub fn bias_sweep(records: &[PredictionRecord], space: &CompositionSpace) -> Result<BiasCurve> {
    if records.is_empty() {
        return Err(Error::Eval("no records to sweep".into()));
    }
    let mut seen_true = Vec::new();
    let mut unseen_true = Vec::new();
    for r in records {
        if !r.best_seen_logit.is_finite() || !r.best_unseen_logit.is_finite() {
            return Err(Error::Eval(format!(
                "record {}: non-finite logits",
                r.sample_index
            )));
        }
        if side_of(r, space)? {
            seen_true.push(r);
        } else {
            unseen_true.push(r);
        }
    }
    if seen_true.is_empty() {
        return Err(Error::Eval(
            "no seen-true records; bias sweep undefined".into(),
        ));
    }
    if unseen_true.is_empty() {
        return Err(Error::Eval(
            "no unseen-true records; bias sweep undefined".into(),
        ));
    }

    let mut biases: Vec<f64> = records
        .iter()
        .map(|r| r.best_seen_logit - r.best_unseen_logit)
        .collect();
    biases.sort_by(f64::total_cmp);
    biases.dedup();
    let lo = biases.first().unwrap() - 1.0;
    let hi = biases.last().unwrap() + 1.0;
    biases.insert(0, lo);
    biases.push(hi);

    let mut points = Vec::with_capacity(biases.len());
    for &b in &biases {
        let mut s_ok = 0usize;
        for r in &seen_true {
            if r.best_seen_logit >= r.best_unseen_logit + b && r.best_seen_pair == r.true_pair {
                s_ok += 1;
            }
        }
        let mut u_ok = 0usize;
        for r in &unseen_true {
            if r.best_seen_logit < r.best_unseen_logit + b && r.best_unseen_pair == r.true_pair {
                u_ok += 1;
            }
        }
        points.push(BiasCurvePoint {
            bias: b,
            seen_accuracy: s_ok as f64 / seen_true.len() as f64,
            unseen_accuracy: u_ok as f64 / unseen_true.len() as f64,
        });
    }

    for w in points.windows(2) {
        assert!(
            w[1].seen_accuracy <= w[0].seen_accuracy + 1e-15
                && w[1].unseen_accuracy + 1e-15 >= w[0].unseen_accuracy,
            "bias-sweep monotonicity violated: {w:?}"
        );
    }

    let mut auc = 0.0;
    for w in points.windows(2) {
        let ds = w[0].seen_accuracy - w[1].seen_accuracy;
        auc += ds * (w[0].unseen_accuracy + w[1].unseen_accuracy) / 2.0;
    }
    // Trapezoid accumulation can overshoot the mathematical range by an ULP
    // on perfectly separable curves; the metric is bounded by construction.
    let auc = auc.clamp(0.0, 1.0);
    let best_hm = points
        .iter()
        .map(|p| {
            let (s, u) = (p.seen_accuracy, p.unseen_accuracy);
            if s + u > 0.0 {
                2.0 * s * u / (s + u)
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);

    Ok(BiasCurve {
        auc,
        best_hm,
        seen_best: points.first().unwrap().seen_accuracy,
        unseen_best: points.last().unwrap().unseen_accuracy,
        points,
    })
}

/// Frequency-group report: classes ranked by test count, split 30/40/30
/// into head/body/tail (sizes ⌊0.3N⌋, N−2⌊0.3N⌋, ⌊0.3N⌋).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailReport {
    pub head_size: usize,
    pub body_size: usize,
    pub tail_size: usize,
    /// Unweighted mean of per-class accuracies; None for an empty group
    /// (possible only at N = 3, where ⌊0.3N⌋ = 0).
    pub head_accuracy: Option<f64>,
    pub body_accuracy: Option<f64>,
    pub tail_accuracy: Option<f64>,
    pub all_accuracy: f64,
    /// Population standard deviation of per-class accuracies.
    pub accuracy_std: f64,
}

/// Compute long-tail group accuracies at bias 0. `counts` ranks the classes
/// (ties broken by ascending candidate index); accuracies come from the
/// records, which must cover exactly the counted classes.
pub fn long_tail_metrics(
    records: &[PredictionRecord],
    counts: &[(Pair, usize)],
    space: &CompositionSpace,
) -> Result<LongTailReport> {
    if counts.len() < 3 {
        return Err(Error::Eval(format!(
            "long-tail split needs at least 3 classes, got {}",
            counts.len()
        )));
    }
    let mut by_class: HashMap<Pair, (usize, usize)> = HashMap::new(); // correct, total
    for r in records {
        let e = by_class.entry(r.true_pair).or_insert((0, 0));
        e.1 += 1;
        if r.predicted_pair_at_bias(0.0) == r.true_pair {
            e.0 += 1;
        }
    }
    let mut ranked: Vec<(usize, Pair, usize)> = Vec::with_capacity(counts.len()); // (cand idx, pair, count)
    for (pair, count) in counts {
        let idx = space.candidate_index(*pair).ok_or_else(|| {
            Error::Eval(format!(
                "counted pair ({}, {}) is not a candidate",
                pair.attr, pair.obj
            ))
        })?;
        if *count == 0 {
            return Err(Error::Eval(format!(
                "class ({}, {}) has a zero test count",
                pair.attr, pair.obj
            )));
        }
        if !by_class.contains_key(pair) {
            return Err(Error::Eval(format!(
                "no records for counted class ({}, {})",
                pair.attr, pair.obj
            )));
        }
        ranked.push((idx, *pair, *count));
    }
    if by_class.len() != counts.len() {
        return Err(Error::Eval(format!(
            "records cover {} classes but counts list {}",
            by_class.len(),
            counts.len()
        )));
    }
    ranked.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));

    let accs: Vec<f64> = ranked
        .iter()
        .map(|(_, pair, _)| {
            let (ok, total) = by_class[pair];
            ok as f64 / total as f64
        })
        .collect();
    let n = accs.len();
    let h = (0.3 * n as f64).floor() as usize;
    let group_mean = |xs: &[f64]| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    let all_accuracy = accs.iter().sum::<f64>() / n as f64;
    let var = accs
        .iter()
        .map(|a| (a - all_accuracy) * (a - all_accuracy))
        .sum::<f64>()
        / n as f64;
    Ok(LongTailReport {
        head_size: h,
        body_size: n - 2 * h,
        tail_size: h,
        head_accuracy: group_mean(&accs[..h]),
        body_accuracy: group_mean(&accs[h..n - h]),
        tail_accuracy: group_mean(&accs[n - h..]),
        all_accuracy,
        accuracy_std: var.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub samples: usize,
    pub accuracy: f64,
}

/// Prefix accuracy (bias 0) after every `stride` samples and at the end of
/// the stream. Records are taken in the order given.
pub fn cumulative_accuracy(
    records: &[PredictionRecord],
    stride: usize,
) -> Result<Vec<CumulativePoint>> {
    if stride == 0 {
        return Err(Error::Eval("stride must be >= 1".into()));
    }
    if records.is_empty() {
        return Err(Error::Eval("no records".into()));
    }
    let mut out = Vec::new();
    let mut correct = 0usize;
    for (i, r) in records.iter().enumerate() {
        if r.predicted_pair_at_bias(0.0) == r.true_pair {
            correct += 1;
        }
        let n = i + 1;
        if (n % stride == 0 || n == records.len())
            && out.last().map(|p: &CumulativePoint| p.samples) != Some(n)
        {
            out.push(CumulativePoint {
                samples: n,
                accuracy: correct as f64 / n as f64,
            });
        }
    }
    Ok(out)
}

//! Run orchestration: warm-start, stream every test sample through the
//! engine exactly once (optionally in a seeded shuffled order), and compute
//! the metrics document from the resulting records.
//!
//! The metrics document is a pure function of (records, manifest, stride), so
//! an offline evaluation of a persisted record file reproduces the run's
//! metrics exactly — including for a prefix left behind by an interrupted run.

use crate::config::EngineConfig;
use crate::engine::{Engine, PredictionRecord};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    bias_sweep, cumulative_accuracy, long_tail_metrics, BiasCurve, CumulativePoint, LongTailReport,
};
use crate::io::DatasetBundle;
use crate::space::{CompositionSpace, Pair};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_CUMULATIVE_STRIDE: usize = 25;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Shuffle the test stream with this seed; None keeps file order.
    pub order_seed: Option<u64>,
    /// Stride of the cumulative-accuracy series.
    pub cumulative_stride: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            order_seed: None,
            cumulative_stride: DEFAULT_CUMULATIVE_STRIDE,
        }
    }
}

/// Evaluation outputs; reproducible from the records alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub samples: usize,
    pub cumulative_stride: usize,
    pub bias_curve: BiasCurve,
    pub long_tail: LongTailReport,
    pub cumulative: Vec<CumulativePoint>,
}

/// Compute the metrics document from records. Per-class test counts for the
/// long-tail ranking are taken from the records themselves, so a record
/// prefix evaluates consistently.
pub fn compute_metrics(
    records: &[PredictionRecord],
    space: &CompositionSpace,
    cumulative_stride: usize,
) -> Result<MetricsDoc> {
    let mut counts: Vec<(Pair, usize)> = Vec::new();
    for r in records {
        match counts.iter_mut().find(|(p, _)| *p == r.true_pair) {
            Some((_, c)) => *c += 1,
            None => counts.push((r.true_pair, 1)),
        }
    }
    Ok(MetricsDoc {
        samples: records.len(),
        cumulative_stride,
        bias_curve: bias_sweep(records, space)?,
        long_tail: long_tail_metrics(records, &counts, space)?,
        cumulative: cumulative_accuracy(records, cumulative_stride)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    pub max_us: f64,
}

fn latency_stats(mut micros: Vec<f64>) -> LatencyStats {
    micros.sort_by(f64::total_cmp);
    let n = micros.len();
    let pct = |q: f64| micros[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
    LatencyStats {
        mean_us: micros.iter().sum::<f64>() / n as f64,
        p50_us: pct(0.50),
        p95_us: pct(0.95),
        max_us: micros[n - 1],
    }
}

/// End-of-run state of one class queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub pair: Pair,
    pub entropies: Vec<f64>,
    pub sentinels: Vec<bool>,
    pub visual_prototype: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<PredictionRecord>,
    pub metrics: MetricsDoc,
    /// Effective configuration, defaults included.
    pub config: EngineConfig,
    pub order_seed: Option<u64>,
    pub warnings: Vec<String>,
    pub latency: LatencyStats,
    /// Number of samples whose gradient step was rolled back.
    pub rolled_back: usize,
    pub queues: Vec<QueueSnapshot>,
}

/// Run the full online pipeline over a bundle. `on_record` fires after each
/// sample (for streaming persistence); its error aborts the run.
pub fn run_stream(
    bundle: &DatasetBundle,
    config: &EngineConfig,
    options: &RunOptions,
    mut on_record: impl FnMut(&PredictionRecord) -> Result<()>,
) -> Result<RunSummary> {
    if options.cumulative_stride == 0 {
        return Err(Error::Config("cumulative stride must be >= 1".into()));
    }
    let space = bundle.space()?;
    let mut sides = (false, false);
    for pair in &bundle.test_labels {
        let idx = space
            .candidate_index(*pair)
            .expect("bundle validation keeps labels in the candidate set");
        if space.is_seen(idx) {
            sides.0 = true;
        } else {
            sides.1 = true;
        }
    }
    if !sides.0 || !sides.1 {
        return Err(Error::Input(
            "test stream must contain at least one seen-pair and one unseen-pair sample".into(),
        ));
    }

    let mut engine = Engine::new(space, bundle.text.clone(), config.clone())?;
    engine.warm_start(&bundle.train_features, &bundle.train_labels)?;

    let n = bundle.test_features.rows();
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = options.order_seed {
        order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    }

    let mut records = Vec::with_capacity(n);
    let mut micros = Vec::with_capacity(n);
    let mut rolled_back = 0usize;
    for &row in &order {
        let start = Instant::now();
        let record =
            engine.process_sample(bundle.test_features.row(row), bundle.test_labels[row], row)?;
        micros.push(start.elapsed().as_secs_f64() * 1e6);
        if record.rolled_back {
            rolled_back += 1;
        }
        on_record(&record)?;
        records.push(record);
    }

    let metrics = compute_metrics(&records, engine.space(), options.cumulative_stride)?;
    let queues = engine
        .space()
        .candidates()
        .iter()
        .zip(engine.queues())
        .map(|(pair, q)| QueueSnapshot {
            pair: *pair,
            entropies: q.entries().iter().map(|e| e.entropy).collect(),
            sentinels: q.entries().iter().map(|e| e.sentinel).collect(),
            visual_prototype: q.visual_prototype(),
        })
        .collect();

    Ok(RunSummary {
        metrics,
        config: engine.config().clone(),
        order_seed: options.order_seed,
        warnings: engine.warnings().to_vec(),
        latency: latency_stats(micros),
        rolled_back,
        queues,
        records,
    })
}

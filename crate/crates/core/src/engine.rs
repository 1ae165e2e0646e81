//! The online adaptation engine: residual adapter state, prototype
//! refreshing, fused prediction, and the per-sample processing pipeline.

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::learning::{self, OptimizerState};
use crate::math::{self, Mat};
use crate::prototypes;
use crate::queue::ConfidenceQueue;
use crate::space::{CompositionSpace, Pair};
use serde::{Deserialize, Serialize};

/// Residual adapter tables, one row per candidate class. Initialized to
/// exact zeros so the engine starts at the frozen base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamState {
    pub delta_text: Mat,
    pub delta_visual: Mat,
}

impl KamState {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        KamState {
            delta_text: Mat::zeros(classes, dim),
            delta_visual: Mat::zeros(classes, dim),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.delta_text.is_all_zero() && self.delta_visual.is_all_zero()
    }
}

/// Confidence-adaptive update weight: σ(−θ·cos(f, anchor)). High-confidence
/// samples (large cosine) get small weights, so they barely move their class.
pub fn adaptive_update_weight(feature: &[f64], anchor: &[f64], theta: f64) -> f64 {
    math::sigmoid(-theta * math::dot(feature, anchor))
}

/// Refresh one prototype bank: row c becomes normalize(base_c + w_c·Δ_c).
/// Passing `delta: None` (adapter disabled) returns the base rows unchanged,
/// as does a row whose delta is exactly zero — bit-for-bit, not just within
/// rounding. Returns the refreshed bank plus the pre-normalization norms
/// ‖base_c + w_c·Δ_c‖ needed by the gradient chain.
pub fn refresh_bank(base: &Mat, delta: Option<&Mat>, weights: &[f64]) -> Result<(Mat, Vec<f64>)> {
    let (n, d) = (base.rows(), base.cols());
    if weights.len() != n {
        return Err(Error::Shape(format!(
            "{} weights for {} rows",
            weights.len(),
            n
        )));
    }
    if let Some(dl) = delta {
        if dl.rows() != n || dl.cols() != d {
            return Err(Error::Shape(format!(
                "delta is {}x{}, base is {}x{}",
                dl.rows(),
                dl.cols(),
                n,
                d
            )));
        }
    }
    let mut out = base.clone();
    let mut norms = vec![0.0; n];
    for c in 0..n {
        let delta_row = delta.map(|m| m.row(c));
        let zero_delta = match delta_row {
            None => true,
            Some(r) => r.iter().all(|&x| x == 0.0),
        };
        if zero_delta {
            norms[c] = math::l2_norm(base.row(c));
            continue; // row already holds base_c, untouched
        }
        let w = weights[c];
        let row = out.row_mut(c);
        let dr = delta_row.unwrap();
        for k in 0..d {
            row[k] += w * dr[k];
        }
        let nn = math::l2_norm(row);
        if !nn.is_finite() || nn < 1e-12 {
            return Err(Error::Runtime(format!(
                "refreshed prototype for class {c} has norm {nn}; adapter drove it to collapse"
            )));
        }
        for x in row.iter_mut() {
            *x /= nn;
        }
        norms[c] = nn;
    }
    Ok((out, norms))
}

/// Fused logits and probabilities: z_c = f·t̃_c + α·exp(−β(1 − f·ṽ_c)),
/// optionally divided by τ. Returns (logits, probs, affinities).
pub fn predict(
    feature: &[f64],
    t_tilde: &Mat,
    v_tilde: &Mat,
    config: &EngineConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = t_tilde.rows();
    if v_tilde.rows() != n || t_tilde.cols() != feature.len() || v_tilde.cols() != feature.len() {
        return Err(Error::Shape("prototype banks and feature disagree".into()));
    }
    let scale = if config.scale_logits_by_tau {
        1.0 / config.tau
    } else {
        1.0
    };
    let mut logits = vec![0.0; n];
    let mut affinities = vec![0.0; n];
    for c in 0..n {
        let a = (-config.beta * (1.0 - math::dot(feature, v_tilde.row(c)))).exp();
        affinities[c] = a;
        logits[c] = (math::dot(feature, t_tilde.row(c)) + config.alpha * a) * scale;
    }
    let probs = math::softmax(&logits);
    Ok((logits, probs, affinities))
}

/// Argmax with ties broken toward the lowest class index.
pub fn pseudo_label(probs: &[f64]) -> usize {
    math::argmax(probs)
}

/// Per-sample output row; the unit the evaluation module consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_index: usize,
    pub true_pair: Pair,
    /// Admission-softmax argmax; routes the sample into a queue.
    pub pseudo_pair: Pair,
    /// Admission entropy under which the sample was queued.
    pub entropy: f64,
    pub best_seen_pair: Pair,
    pub best_seen_logit: f64,
    pub best_unseen_pair: Pair,
    pub best_unseen_logit: f64,
    pub loss_pe: f64,
    pub loss_mcrl: f64,
    /// True when the adapter step was abandoned (non-finite loss/gradient).
    pub rolled_back: bool,
}

impl PredictionRecord {
    /// The pair predicted at bias b: best seen iff its logit clears the best
    /// unseen logit plus b.
    pub fn predicted_pair_at_bias(&self, bias: f64) -> Pair {
        if self.best_seen_logit >= self.best_unseen_logit + bias {
            self.best_seen_pair
        } else {
            self.best_unseen_pair
        }
    }
}

/// Streaming adaptation engine over a fixed composition space.
pub struct Engine {
    space: CompositionSpace,
    text: Mat,
    queues: Vec<ConfidenceQueue>,
    kam: KamState,
    optimizer: OptimizerState,
    config: EngineConfig,
    warnings: Vec<String>,
    samples_seen: usize,
}

impl Engine {
    /// Validate and assemble an engine. `text` must hold one unit-norm row
    /// per candidate (normalize embeddings once at ingestion).
    pub fn new(space: CompositionSpace, text: Mat, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        if text.rows() != space.candidate_count() {
            return Err(Error::Shape(format!(
                "{} textual prototypes for {} candidates",
                text.rows(),
                space.candidate_count()
            )));
        }
        if !text.is_finite() {
            return Err(Error::Input(
                "textual prototypes contain non-finite values".into(),
            ));
        }
        for c in 0..text.rows() {
            let n = math::l2_norm(text.row(c));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!(
                    "textual prototype {c} has norm {n}; normalize at ingestion"
                )));
            }
        }
        let classes = space.candidate_count();
        let dim = text.cols();
        let queues = (0..classes)
            .map(|_| ConfidenceQueue::new(config.queue_capacity))
            .collect();
        Ok(Engine {
            space,
            text,
            queues,
            kam: KamState::zeros(classes, dim),
            optimizer: OptimizerState::new(classes, dim),
            config,
            warnings: Vec::new(),
            samples_seen: 0,
        })
    }

    /// Seed the queues from labeled training features (honors the two
    /// warm-start switches). Call before streaming; replaces the queue bank.
    pub fn warm_start(&mut self, train_features: &Mat, train_labels: &[Pair]) -> Result<()> {
        let (queues, warnings) = prototypes::warm_start_queues(
            &self.space,
            &self.text,
            train_features,
            train_labels,
            &self.config,
        )?;
        self.queues = queues;
        self.warnings.extend(warnings);
        Ok(())
    }

    pub fn space(&self) -> &CompositionSpace {
        &self.space
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn kam(&self) -> &KamState {
        &self.kam
    }

    pub fn queues(&self) -> &[ConfidenceQueue] {
        &self.queues
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    /// Current visual prototype bank: queue means where available (and the
    /// queue switch is on), textual rows otherwise. The bool marks fallback.
    pub fn visual_bank(&self) -> (Mat, Vec<bool>) {
        let (n, d) = (self.text.rows(), self.text.cols());
        let mut bank = Mat::zeros(n, d);
        let mut fallback = vec![false; n];
        for (c, fell_back) in fallback.iter_mut().enumerate() {
            let proto = if self.config.switches.enable_queue {
                self.queues[c].visual_prototype()
            } else {
                None
            };
            match proto {
                Some(v) => bank.row_mut(c).copy_from_slice(&v),
                None => {
                    bank.row_mut(c).copy_from_slice(self.text.row(c));
                    *fell_back = true;
                }
            }
        }
        (bank, fallback)
    }

    fn update_weights(&self, feature: &[f64], anchors: &Mat) -> Vec<f64> {
        if self.config.switches.enable_auw {
            (0..anchors.rows())
                .map(|c| adaptive_update_weight(feature, anchors.row(c), self.config.theta))
                .collect()
        } else {
            vec![1.0; anchors.rows()]
        }
    }

    /// Process one unlabeled feature: admit it to a queue, predict, record,
    /// then take the deferred adapter step. `true_pair` is carried into the
    /// record for offline evaluation only; it never influences adaptation.
    pub fn process_sample(
        &mut self,
        feature: &[f64],
        true_pair: Pair,
        sample_index: usize,
    ) -> Result<PredictionRecord> {
        let d = self.text.cols();
        if feature.len() != d {
            return Err(Error::Shape(format!(
                "feature dim {} vs engine dim {d}",
                feature.len()
            )));
        }
        if !feature.iter().all(|x| x.is_finite()) {
            return Err(Error::Input(format!(
                "sample {sample_index}: non-finite feature"
            )));
        }
        let fnorm = math::l2_norm(feature);
        if (fnorm - 1.0).abs() > 1e-6 {
            return Err(Error::Input(format!(
                "sample {sample_index}: feature norm {fnorm}; normalize at ingestion"
            )));
        }
        if self.space.candidate_index(true_pair).is_none() {
            return Err(Error::Input(format!(
                "sample {sample_index}: true pair ({}, {}) is not a candidate",
                true_pair.attr, true_pair.obj
            )));
        }
        let sw = self.config.switches;

        // Admission: entropy + pseudo-label against the refreshed (or base)
        // textual prototypes, then queue the feature under the pseudo-label.
        let w_text = self.update_weights(feature, &self.text);
        let delta_t = sw.enable_textual_kam.then_some(&self.kam.delta_text);
        let (t_tilde, _) = refresh_bank(&self.text, delta_t, &w_text)?;
        let admission_bank = if self.config.entropy_on_base_prototypes {
            &self.text
        } else {
            &t_tilde
        };
        let (entropy, admission_probs) =
            prediction_entropy(feature, admission_bank, self.config.tau)?;
        let pseudo = pseudo_label(&admission_probs);
        self.queues[pseudo].insert(entropy, feature.to_vec());

        // Visual bank reflects the queue state including this sample.
        let (visual_base, _fallback) = self.visual_bank();
        let w_visual = self.update_weights(feature, &visual_base);

        let ctx = learning::SampleContext {
            feature,
            base_text: &self.text,
            base_visual: &visual_base,
            w_text: &w_text,
            w_visual: &w_visual,
        };
        let fwd = learning::forward(&ctx, &self.kam, &self.config)?;

        let (best_seen, best_unseen) = self.best_split(&fwd.logits);
        let mut record = PredictionRecord {
            sample_index,
            true_pair,
            pseudo_pair: self.space.candidates()[pseudo],
            entropy,
            best_seen_pair: self.space.candidates()[best_seen],
            best_seen_logit: fwd.logits[best_seen],
            best_unseen_pair: self.space.candidates()[best_unseen],
            best_unseen_logit: fwd.logits[best_unseen],
            // Loss fields report what the step optimized: a disabled
            // component contributes nothing and records as zero.
            loss_pe: if sw.enable_l_pe { fwd.loss.l_pe } else { 0.0 },
            loss_mcrl: if sw.enable_l_mcrl {
                fwd.loss.l_mcrl
            } else {
                0.0
            },
            rolled_back: false,
        };

        // Deferred adapter step(s); the record above reflects inference time.
        let learnable = (sw.enable_textual_kam || sw.enable_visual_kam)
            && (sw.enable_l_pe || sw.enable_l_mcrl)
            && self.config.learning_rate > 0.0;
        if learnable {
            let snapshot = (self.kam.clone(), self.optimizer.clone());
            let mut current = Some(fwd);
            for _ in 0..self.config.steps_per_sample {
                let pass = match current.take() {
                    Some(f) => f,
                    None => learning::forward(&ctx, &self.kam, &self.config)?,
                };
                let grads = learning::gradients(&ctx, &self.kam, &self.config, &pass);
                if !pass.loss.total.is_finite()
                    || !grads.d_text.is_finite()
                    || !grads.d_visual.is_finite()
                {
                    self.kam = snapshot.0;
                    self.optimizer = snapshot.1;
                    record.rolled_back = true;
                    break;
                }
                self.optimizer.step(&mut self.kam, &grads, &self.config);
            }
        }

        self.samples_seen += 1;
        Ok(record)
    }

    /// Best candidate on each side of the seen/unseen split (ties → lowest
    /// candidate index).
    fn best_split(&self, logits: &[f64]) -> (usize, usize) {
        let mut best_seen = usize::MAX;
        let mut best_unseen = usize::MAX;
        for c in 0..logits.len() {
            if self.space.is_seen(c) {
                if best_seen == usize::MAX || logits[c] > logits[best_seen] {
                    best_seen = c;
                }
            } else if best_unseen == usize::MAX || logits[c] > logits[best_unseen] {
                best_unseen = c;
            }
        }
        (best_seen, best_unseen)
    }
}

/// Re-exported so engine callers can compute admission entropy directly.
pub use crate::prototypes::prediction_entropy;

//! Engine configuration: scalar hyperparameters, optimizer choice, and the
//! ablation switches.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Ablation switches. All on by default; each can be disabled independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    /// Consult per-class confidence queues for visual prototypes. Off: every
    /// class falls back to its textual prototype as visual prototype.
    pub enable_queue: bool,
    /// Apply and train the textual adapter table.
    pub enable_textual_kam: bool,
    /// Apply and train the visual adapter table.
    pub enable_visual_kam: bool,
    /// Confidence-adaptive update weights. Off: weights are exactly 1.
    pub enable_auw: bool,
    /// Seed seen-class queues from training features before the stream.
    pub warmstart_seen: bool,
    /// Seed unseen-class queues with mapped prototypes before the stream.
    pub warmstart_unseen: bool,
    /// Prediction-entropy loss term.
    pub enable_l_pe: bool,
    /// Cross-modal alignment loss term.
    pub enable_l_mcrl: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Switches {
            enable_queue: true,
            enable_textual_kam: true,
            enable_visual_kam: true,
            enable_auw: true,
            warmstart_seen: true,
            warmstart_unseen: true,
            enable_l_pe: true,
            enable_l_mcrl: true,
        }
    }
}

impl Switches {
    /// Everything disabled: the engine degenerates to the frozen base model.
    pub fn all_off() -> Self {
        Switches {
            enable_queue: false,
            enable_textual_kam: false,
            enable_visual_kam: false,
            enable_auw: false,
            warmstart_seen: false,
            warmstart_unseen: false,
            enable_l_pe: false,
            enable_l_mcrl: false,
        }
    }
}

/// All engine hyperparameters. Serializes with every field present so the
/// effective configuration echoed by a run is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Per-class confidence-queue capacity K.
    pub queue_capacity: usize,
    /// Softmax temperature for admission entropy and the alignment loss.
    pub tau: f64,
    /// Temperature of the seen→unseen mapping softmax.
    pub tau_m: f64,
    /// Steepness of the confidence-adaptive update weight.
    pub theta: f64,
    /// Weight of the visual-affinity term in the fused logits.
    pub alpha: f64,
    /// Sharpness of the visual-affinity kernel.
    pub beta: f64,
    /// Weight of the alignment loss in the total objective.
    pub lambda_mcrl: f64,
    pub learning_rate: f64,
    /// Inner gradient steps per streamed sample; the forward pass is
    /// recomputed before each step.
    pub steps_per_sample: usize,
    pub optimizer: OptimizerKind,
    /// Divide fused logits by tau. Off by default: the prediction rule is
    /// untempered.
    pub scale_logits_by_tau: bool,
    /// Compute admission entropy against the base (not refreshed) textual
    /// prototypes.
    pub entropy_on_base_prototypes: bool,
    pub switches: Switches,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            queue_capacity: 3,
            tau: 0.01,
            tau_m: 0.01,
            theta: 1.0,
            alpha: 1.0,
            beta: 15.0,
            lambda_mcrl: 3.5,
            learning_rate: 5e-6,
            steps_per_sample: 1,
            optimizer: OptimizerKind::Sgd,
            scale_logits_by_tau: false,
            entropy_on_base_prototypes: false,
            switches: Switches::default(),
        }
    }
}

impl EngineConfig {
    /// Check scalar invariants; every violation names the field.
    pub fn validate(&self) -> Result<()> {
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be >= 1".into()));
        }
        for (name, v) in [("tau", self.tau), ("tau_m", self.tau_m)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        for (name, v) in [
            ("theta", self.theta),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_mcrl", self.lambda_mcrl),
            ("learning_rate", self.learning_rate),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.steps_per_sample == 0 {
            return Err(Error::Config("steps_per_sample must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: EngineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

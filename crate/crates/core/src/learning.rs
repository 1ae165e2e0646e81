//! Objective, analytical gradients, finite-difference verification, and the
//! adapter optimizers.
//!
//! The per-sample objective is prediction entropy over the fused logits plus
//! a weighted symmetric cross-modal alignment loss between refreshed textual
//! and visual prototypes. Gradients flow only into the two adapter tables;
//! base prototypes, queue contents, and update weights are constants.

use crate::config::{EngineConfig, OptimizerKind};
use crate::engine::{predict, refresh_bank, KamState};
use crate::error::{Error, Result};
use crate::math::{self, Mat};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Loss terms for one sample. `total` is the switch-masked objective:
/// l_pe·[pe on] + lambda_mcrl·l_mcrl·[mcrl on].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pe: f64,
    pub l_mcrl: f64,
    pub total: f64,
}

/// Gradients of the masked total loss w.r.t. the two adapter tables.
/// A disabled adapter's block is identically zero.
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub d_text: Mat,
    pub d_visual: Mat,
}

/// Everything the objective sees for one sample. Bases and weights are
/// constants for the gradient step.
pub struct SampleContext<'a> {
    pub feature: &'a [f64],
    pub base_text: &'a Mat,
    pub base_visual: &'a Mat,
    pub w_text: &'a [f64],
    pub w_visual: &'a [f64],
}

/// Forward-pass products kept for the gradient computation.
pub struct Forward {
    pub t_tilde: Mat,
    pub v_tilde: Mat,
    pub t_norms: Vec<f64>,
    pub v_norms: Vec<f64>,
    pub affinities: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub loss: LossBreakdown,
    row_softmax: Mat,
    col_softmax: Mat,
}

/// Run the full forward pass: refresh both banks, fuse logits, and evaluate
/// both loss terms (each is computed even when masked out of `total`, so
/// records can always report them).
pub fn forward(ctx: &SampleContext, kam: &KamState, cfg: &EngineConfig) -> Result<Forward> {
    let sw = cfg.switches;
    let delta_t = sw.enable_textual_kam.then_some(&kam.delta_text);
    let delta_v = sw.enable_visual_kam.then_some(&kam.delta_visual);
    let (t_tilde, t_norms) = refresh_bank(ctx.base_text, delta_t, ctx.w_text)?;
    let (v_tilde, v_norms) = refresh_bank(ctx.base_visual, delta_v, ctx.w_visual)?;
    let (logits, probs, affinities) = predict(ctx.feature, &t_tilde, &v_tilde, cfg)?;
    let l_pe = math::entropy(&probs);

    let n = t_tilde.rows();
    let mut b = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            b.row_mut(i)[j] = math::dot(t_tilde.row(i), v_tilde.row(j)) / cfg.tau;
        }
    }
    let mut row_softmax = Mat::zeros(n, n);
    let mut col_softmax = Mat::zeros(n, n);
    let mut ce_sum = 0.0;
    for i in 0..n {
        let row = b.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        ce_sum += lse - row[i];
        for (out, x) in row_softmax.row_mut(i).iter_mut().zip(row) {
            *out = (x - lse).exp();
        }
    }
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| b.row(i)[j]).collect();
        let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + col.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        ce_sum += lse - col[j];
        for (i, x) in col.iter().enumerate() {
            col_softmax.row_mut(i)[j] = (x - lse).exp();
        }
    }
    let l_mcrl = ce_sum / (2.0 * n as f64);

    let mut total = 0.0;
    if sw.enable_l_pe {
        total += l_pe;
    }
    if sw.enable_l_mcrl {
        total += cfg.lambda_mcrl * l_mcrl;
    }
    Ok(Forward {
        t_tilde,
        v_tilde,
        t_norms,
        v_norms,
        affinities,
        logits,
        probs,
        loss: LossBreakdown {
            l_pe,
            l_mcrl,
            total,
        },
        row_softmax,
        col_softmax,
    })
}

/// Analytical gradients of the masked total loss w.r.t. both adapter tables.
///
/// Entropy term: dH/dz_c = −p_c(ln p_c + H), routed through
/// dz_c/dt̃_c = s·f and dz_c/dṽ_c = s·α·β·A_c·f (s = 1/τ when logits are
/// tempered, else 1). Alignment term: with B = t̃ṽᵀ/τ,
/// dL/dB = (Pʳ + Pᶜ − 2I)/(2N), routed through ṽ/τ and t̃/τ. Both chains end
/// in the normalization Jacobian (I − t̃t̃ᵀ)/‖u‖ times the update weight.
pub fn gradients(
    ctx: &SampleContext,
    _kam: &KamState,
    cfg: &EngineConfig,
    fwd: &Forward,
) -> GradientPair {
    let sw = cfg.switches;
    let n = fwd.t_tilde.rows();
    let d = fwd.t_tilde.cols();
    let scale = if cfg.scale_logits_by_tau {
        1.0 / cfg.tau
    } else {
        1.0
    };

    // Accumulate dL/dt̃ and dL/dṽ.
    let mut g_t = Mat::zeros(n, d);
    let mut g_v = Mat::zeros(n, d);

    if sw.enable_l_pe {
        let h = fwd.loss.l_pe;
        for c in 0..n {
            let p = fwd.probs[c];
            if p <= 0.0 {
                continue;
            }
            let gz = -p * (p.ln() + h) * scale;
            for (g, f) in g_t.row_mut(c).iter_mut().zip(ctx.feature) {
                *g += gz * f;
            }
            let gv_coef = gz * cfg.alpha * cfg.beta * fwd.affinities[c];
            for (g, f) in g_v.row_mut(c).iter_mut().zip(ctx.feature) {
                *g += gv_coef * f;
            }
        }
    }

    if sw.enable_l_mcrl && cfg.lambda_mcrl != 0.0 {
        let coef = cfg.lambda_mcrl / (2.0 * n as f64 * cfg.tau);
        for i in 0..n {
            for j in 0..n {
                let mut dij = fwd.row_softmax.row(i)[j] + fwd.col_softmax.row(i)[j];
                if i == j {
                    dij -= 2.0;
                }
                let dij = dij * coef;
                let vj = fwd.v_tilde.row(j);
                let gt = g_t.row_mut(i);
                for k in 0..d {
                    gt[k] += dij * vj[k];
                }
                let ti = fwd.t_tilde.row(i);
                let gv = g_v.row_mut(j);
                for k in 0..d {
                    gv[k] += dij * ti[k];
                }
            }
        }
    }

    // Chain through L2 normalization and the constant update weights.
    let mut d_text = Mat::zeros(n, d);
    let mut d_visual = Mat::zeros(n, d);
    if sw.enable_textual_kam {
        for c in 0..n {
            let t = fwd.t_tilde.row(c);
            let g = g_t.row(c);
            let proj = math::dot(t, g);
            let coeff = ctx.w_text[c] / fwd.t_norms[c];
            let out = d_text.row_mut(c);
            for k in 0..d {
                out[k] = coeff * (g[k] - proj * t[k]);
            }
        }
    }
    if sw.enable_visual_kam {
        for c in 0..n {
            let v = fwd.v_tilde.row(c);
            let g = g_v.row(c);
            let proj = math::dot(v, g);
            let coeff = ctx.w_visual[c] / fwd.v_norms[c];
            let out = d_visual.row_mut(c);
            for k in 0..d {
                out[k] = coeff * (g[k] - proj * v[k]);
            }
        }
    }
    GradientPair { d_text, d_visual }
}

/// Plain SGD step on the enabled adapter tables.
pub fn sgd_step(kam: &mut KamState, grads: &GradientPair, cfg: &EngineConfig) {
    let lr = cfg.learning_rate;
    if cfg.switches.enable_textual_kam {
        for (x, g) in kam
            .delta_text
            .data_mut()
            .iter_mut()
            .zip(grads.d_text.data())
        {
            *x -= lr * g;
        }
    }
    if cfg.switches.enable_visual_kam {
        for (x, g) in kam
            .delta_visual
            .data_mut()
            .iter_mut()
            .zip(grads.d_visual.data())
        {
            *x -= lr * g;
        }
    }
}

/// Optimizer state: a step counter plus Adam moments (unused under SGD).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    steps: u64,
    m_text: Mat,
    v_text: Mat,
    m_visual: Mat,
    v_visual: Mat,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(classes: usize, dim: usize) -> Self {
        OptimizerState {
            steps: 0,
            m_text: Mat::zeros(classes, dim),
            v_text: Mat::zeros(classes, dim),
            m_visual: Mat::zeros(classes, dim),
            v_visual: Mat::zeros(classes, dim),
        }
    }

    pub fn step(&mut self, kam: &mut KamState, grads: &GradientPair, cfg: &EngineConfig) {
        match cfg.optimizer {
            OptimizerKind::Sgd => sgd_step(kam, grads, cfg),
            OptimizerKind::Adam => self.adam_step(kam, grads, cfg),
        }
    }

    fn adam_step(&mut self, kam: &mut KamState, grads: &GradientPair, cfg: &EngineConfig) {
        self.steps += 1;
        let bc1 = 1.0 - ADAM_B1.powi(self.steps as i32);
        let bc2 = 1.0 - ADAM_B2.powi(self.steps as i32);
        let lr = cfg.learning_rate;
        let apply = |delta: &mut Mat, m: &mut Mat, v: &mut Mat, g: &Mat| {
            for ((x, (mi, vi)), gi) in delta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(g.data())
            {
                *mi = ADAM_B1 * *mi + (1.0 - ADAM_B1) * gi;
                *vi = ADAM_B2 * *vi + (1.0 - ADAM_B2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        };
        if cfg.switches.enable_textual_kam {
            apply(
                &mut kam.delta_text,
                &mut self.m_text,
                &mut self.v_text,
                &grads.d_text,
            );
        }
        if cfg.switches.enable_visual_kam {
            apply(
                &mut kam.delta_visual,
                &mut self.m_visual,
                &mut self.v_visual,
                &grads.d_visual,
            );
        }
    }
}

/// Test hook: zero one analytical block before comparing against finite
/// differences, to prove the checker catches a broken gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMutation {
    #[default]
    None,
    ZeroTextual,
    ZeroVisual,
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f64,
    /// Max relative error allowed for a pass.
    pub tolerance: f64,
    /// Upper bound on checked coordinates (sampled without replacement when
    /// the adapter tables are larger).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            h: 1e-5,
            tolerance: 1e-4,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FdBlockReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub textual: FdBlockReport,
    pub visual: FdBlockReport,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
    pub h: f64,
    pub passed: bool,
    pub warnings: Vec<String>,
}

fn rel_err(a: f64, b: f64) -> f64 {
    // Floor the denominator: near-zero coordinates would otherwise divide
    // central-difference noise (~1e-10) by ~0.
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compare analytical gradients against central finite differences of the
/// masked total loss. Only enabled adapter blocks are differentiated.
pub fn finite_difference_check(
    ctx: &SampleContext,
    kam: &KamState,
    cfg: &EngineConfig,
    opts: &FdOptions,
    mutation: GradientMutation,
) -> Result<FdReport> {
    if opts.h <= 0.0 || !opts.h.is_finite() {
        return Err(Error::Input(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut warnings = Vec::new();
    if !(1e-7..=1e-3).contains(&opts.h) {
        warnings.push(format!(
            "h = {:e} outside [1e-7, 1e-3]; differences may be noise-dominated",
            opts.h
        ));
    }
    let fwd = forward(ctx, kam, cfg)?;
    let mut grads = gradients(ctx, kam, cfg, &fwd);
    match mutation {
        GradientMutation::None => {}
        GradientMutation::ZeroTextual => {
            grads.d_text = Mat::zeros(grads.d_text.rows(), grads.d_text.cols())
        }
        GradientMutation::ZeroVisual => {
            grads.d_visual = Mat::zeros(grads.d_visual.rows(), grads.d_visual.cols())
        }
    }

    let n = kam.delta_text.rows();
    let d = kam.delta_text.cols();
    let mut coords: Vec<(bool, usize)> = Vec::new(); // (is_textual, flat index)
    if cfg.switches.enable_textual_kam {
        coords.extend((0..n * d).map(|i| (true, i)));
    }
    if cfg.switches.enable_visual_kam {
        coords.extend((0..n * d).map(|i| (false, i)));
    }
    if coords.is_empty() {
        return Err(Error::Input(
            "both adapters disabled; nothing to differentiate".into(),
        ));
    }
    if coords.len() > opts.max_coords {
        use rand::SeedableRng;
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
        let picked = rand::seq::index::sample(&mut rng, coords.len(), opts.max_coords);
        coords = picked.iter().map(|i| coords[i]).collect();
    }

    let mut blocks = [
        FdBlockReport {
            checked: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
        },
        FdBlockReport {
            checked: 0,
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
        },
    ];
    let mut work = kam.clone();
    for (is_text, idx) in coords {
        let original = if is_text {
            work.delta_text.data()[idx]
        } else {
            work.delta_visual.data()[idx]
        };
        let mut eval = |x: f64| -> Result<f64> {
            if is_text {
                work.delta_text.data_mut()[idx] = x;
            } else {
                work.delta_visual.data_mut()[idx] = x;
            }
            let f = forward(ctx, &work, cfg)?;
            Ok(f.loss.total)
        };
        let plus = eval(original + opts.h)?;
        let minus = eval(original - opts.h)?;
        if is_text {
            work.delta_text.data_mut()[idx] = original;
        } else {
            work.delta_visual.data_mut()[idx] = original;
        }
        let numeric = (plus - minus) / (2.0 * opts.h);
        let analytic = if is_text {
            grads.d_text.data()[idx]
        } else {
            grads.d_visual.data()[idx]
        };
        let err = rel_err(analytic, numeric);
        let block = &mut blocks[if is_text { 0 } else { 1 }];
        block.checked += 1;
        block.max_rel_err = block.max_rel_err.max(err);
        block.mean_rel_err += err;
    }
    for block in &mut blocks {
        if block.checked > 0 {
            block.mean_rel_err /= block.checked as f64;
        }
    }
    let total_checked = blocks[0].checked + blocks[1].checked;
    let max_rel_err = blocks[0].max_rel_err.max(blocks[1].max_rel_err);
    let mean_rel_err = (blocks[0].mean_rel_err * blocks[0].checked as f64
        + blocks[1].mean_rel_err * blocks[1].checked as f64)
        / total_checked as f64;
    Ok(FdReport {
        textual: blocks[0],
        visual: blocks[1],
        max_rel_err,
        mean_rel_err,
        tolerance: opts.tolerance,
        h: opts.h,
        passed: max_rel_err <= opts.tolerance,
        warnings,
    })
}

/// A self-contained random gradient-check instance at desk scale.
pub struct GradcheckInstance {
    pub feature: Vec<f64>,
    pub base_text: Mat,
    pub base_visual: Mat,
    pub w_text: Vec<f64>,
    pub w_visual: Vec<f64>,
    pub kam: KamState,
    pub config: EngineConfig,
}

impl GradcheckInstance {
    pub fn ctx(&self) -> SampleContext<'_> {
        SampleContext {
            feature: &self.feature,
            base_text: &self.base_text,
            base_visual: &self.base_visual,
            w_text: &self.w_text,
            w_visual: &self.w_visual,
        }
    }
}

fn random_unit(rng: &mut ChaCha20Rng, d: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(u) = math::normalized(&v) {
            return u;
        }
    }
}

fn random_unit_rows(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Mat {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_unit(rng, d)).collect();
    Mat::from_rows(&rows).unwrap()
}

/// Sample a random instance with `classes` and `dims` drawn from the given
/// inclusive ranges. Deltas start at small nonzero values so the check runs
/// at a generic point.
pub fn random_instance(
    rng: &mut ChaCha20Rng,
    classes: (usize, usize),
    dims: (usize, usize),
) -> GradcheckInstance {
    use crate::engine::adaptive_update_weight;
    use rand_distr::{Distribution, Normal};
    let n = rng.gen_range(classes.0..=classes.1);
    let d = rng.gen_range(dims.0..=dims.1);
    let feature = random_unit(rng, d);
    let base_text = random_unit_rows(rng, n, d);
    let base_visual = random_unit_rows(rng, n, d);
    let mut kam = KamState::zeros(n, d);
    let noise = Normal::new(0.0, 0.2).unwrap();
    for x in kam.delta_text.data_mut() {
        *x = noise.sample(rng);
    }
    for x in kam.delta_visual.data_mut() {
        *x = noise.sample(rng);
    }
    // Field initializers evaluate in source order, keeping the RNG stream
    // identical to drawing tau, theta, alpha, beta, lambda in sequence.
    let config = EngineConfig {
        tau: rng.gen_range(0.1..=1.0),
        tau_m: 0.05,
        theta: rng.gen_range(0.0..=3.0),
        alpha: rng.gen_range(0.0..=1.5),
        beta: rng.gen_range(0.5..=5.0),
        lambda_mcrl: rng.gen_range(0.0..=3.0),
        learning_rate: 1e-4,
        ..EngineConfig::default()
    };
    let w_text: Vec<f64> = (0..n)
        .map(|c| adaptive_update_weight(&feature, base_text.row(c), config.theta))
        .collect();
    let w_visual: Vec<f64> = (0..n)
        .map(|c| adaptive_update_weight(&feature, base_visual.row(c), config.theta))
        .collect();
    GradcheckInstance {
        feature,
        base_text,
        base_visual,
        w_text,
        w_visual,
        kam,
        config,
    }
}

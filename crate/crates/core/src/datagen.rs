//! Seeded synthetic benchmark generator.
//!
//! Builds a compositional dataset from random unit primitive vectors: each
//! pair's ground-truth direction is the normalized weighted sum of its
//! attribute and object vectors, textual prototypes are noisy copies of the
//! ground truth (with an extra perturbation for pairs outside the seen set),
//! and visual features are noisy copies drawn around the true pair.
//!
//! Everything is driven by a single ChaCha20 stream seeded from `seed`, with
//! the draw order fixed by the pipeline (primitive vectors, pair selection,
//! textual noise, train features, frequency permutation, stream shuffle, test
//! features), so a spec generates the same bundle on every run and platform.

use crate::error::{Error, Result};
use crate::math::{normalized, Mat};
use crate::space::{build_composition_space, Manifest, Pair, World};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Embedding dimensionality.
    pub dim: usize,
    /// Number of attribute primitives.
    pub attributes: usize,
    /// Number of object primitives.
    pub objects: usize,
    /// Fraction of the attribute x object grid labeled as seen (training)
    /// pairs; the remaining cells become the unseen pairs.
    pub seen_fraction: f64,
    /// Warm-start features generated per seen pair.
    pub train_per_seen: usize,
    /// Total test-stream length.
    pub test_samples: usize,
    /// Weight of the attribute vector in the pair composition.
    pub attribute_strength: f64,
    /// Weight of the object vector in the pair composition.
    pub object_strength: f64,
    /// Noise level applied to every textual prototype.
    pub text_noise: f64,
    /// Extra perturbation applied to textual prototypes of non-seen pairs,
    /// modeling the poorer text grounding of never-trained compositions.
    pub unseen_text_shift: f64,
    /// Noise level applied to visual features (train and test).
    pub visual_noise: f64,
    /// Zipf exponent shaping the per-class test counts (0 = uniform).
    pub tail_exponent: f64,
    /// RNG seed; same spec + same seed = byte-identical bundle.
    pub seed: u64,
    pub world: World,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            attributes: 4,
            objects: 4,
            seen_fraction: 0.75,
            train_per_seen: 10,
            test_samples: 200,
            attribute_strength: 1.0,
            object_strength: 1.0,
            text_noise: 0.0,
            unseen_text_shift: 0.8,
            visual_noise: 0.3,
            tail_exponent: 1.2,
            seed: 0,
            world: World::Closed,
        }
    }
}

impl SynthSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        let spec: SynthSpec =
            serde_json::from_str(json).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    fn cells(&self) -> usize {
        self.attributes * self.objects
    }

    /// Number of seen pairs implied by `seen_fraction`.
    pub fn seen_count(&self) -> usize {
        (self.seen_fraction * self.cells() as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return fail(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.attributes == 0 || self.objects == 0 {
            return fail("attributes and objects must be >= 1".into());
        }
        if !self.seen_fraction.is_finite() || self.seen_fraction <= 0.0 || self.seen_fraction > 1.0
        {
            return fail(format!(
                "seen_fraction must lie in (0, 1], got {}",
                self.seen_fraction
            ));
        }
        let seen = self.seen_count();
        let need = self.attributes.max(self.objects);
        if seen < need {
            return fail(format!(
                "seen_fraction = {} yields {seen} seen pairs, which cannot cover {} attributes \
                 and {} objects (need >= {need})",
                self.seen_fraction, self.attributes, self.objects
            ));
        }
        if seen >= self.cells() {
            return fail(format!(
                "seen_fraction = {} leaves no unseen pairs on the {}-cell grid",
                self.seen_fraction,
                self.cells()
            ));
        }
        if self.train_per_seen == 0 {
            return fail("train_per_seen must be >= 1".into());
        }
        if self.test_samples < self.cells() {
            return fail(format!(
                "test_samples = {} cannot give each of the {} labeled classes a sample",
                self.test_samples,
                self.cells()
            ));
        }
        for (name, v) in [
            ("attribute_strength", self.attribute_strength),
            ("object_strength", self.object_strength),
            ("text_noise", self.text_noise),
            ("unseen_text_shift", self.unseen_text_shift),
            ("visual_noise", self.visual_noise),
            ("tail_exponent", self.tail_exponent),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.attribute_strength + self.object_strength <= 0.0 {
            return fail("attribute_strength and object_strength cannot both be zero".into());
        }
        Ok(())
    }
}

/// A generated dataset, fully in memory (f64).
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub manifest: Manifest,
    /// One unit row per candidate pair, in candidate order.
    pub text: Mat,
    pub train_features: Mat,
    pub train_labels: Vec<Pair>,
    pub test_features: Mat,
    pub test_labels: Vec<Pair>,
}

fn gaussian_unit(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = normalized(&v) {
            return u;
        }
    }
}

fn noisy_unit(rng: &mut ChaCha20Rng, base: &[f64], level: f64) -> Result<Vec<f64>> {
    let noise = gaussian_unit(rng, base.len());
    let v: Vec<f64> = base
        .iter()
        .zip(&noise)
        .map(|(b, n)| b + level * n)
        .collect();
    normalized(&v).map_err(|_| Error::Runtime("noisy sample collapsed to zero".into()))
}

/// Split `total` samples across `classes` ranks with Zipf weights
/// (rank r gets weight (r+1)^-s), using largest-remainder rounding, then
/// raise zero counts to 1 by taking from the largest count. Requires
/// total >= classes. The result is sorted descending.
pub(crate) fn zipf_counts(classes: usize, total: usize, exponent: f64) -> Vec<usize> {
    assert!(classes >= 1 && total >= classes);
    let weights: Vec<f64> = (0..classes)
        .map(|r| ((r + 1) as f64).powf(-exponent))
        .collect();
    let wsum: f64 = weights.iter().sum();
    let shares: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &r in order.iter().take(total - assigned) {
        counts[r] += 1;
    }
    // Every class must appear at least once in the test stream.
    for r in 0..classes {
        if counts[r] == 0 {
            let max_at = (0..classes)
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .unwrap();
            counts[max_at] -= 1;
            counts[r] += 1;
        }
    }
    counts.sort_by(|a, b| b.cmp(a));
    counts
}

/// Pick `seen` grid cells covering every attribute and every object,
/// consuming the shuffled cell order; the rest become unseen pairs.
fn pick_pairs(shuffled: &[Pair], attrs: usize, objs: usize, seen: usize) -> (Vec<Pair>, Vec<Pair>) {
    let mut taken = vec![false; shuffled.len()];
    let mut attr_cov = vec![false; attrs];
    let mut obj_cov = vec![false; objs];
    let mut picked = 0usize;
    // Phase 1: cells covering both an uncovered attribute and an uncovered
    // object (maximal coverage per pick).
    for (i, p) in shuffled.iter().enumerate() {
        if picked == seen {
            break;
        }
        if !attr_cov[p.attr] && !obj_cov[p.obj] {
            attr_cov[p.attr] = true;
            obj_cov[p.obj] = true;
            taken[i] = true;
            picked += 1;
        }
    }
    // Phase 2: mop up any primitive still uncovered.
    for (i, p) in shuffled.iter().enumerate() {
        if picked == seen {
            break;
        }
        if !taken[i] && (!attr_cov[p.attr] || !obj_cov[p.obj]) {
            attr_cov[p.attr] = true;
            obj_cov[p.obj] = true;
            taken[i] = true;
            picked += 1;
        }
    }
    // Phase 3: fill the remaining seen budget in shuffled order.
    for t in taken.iter_mut() {
        if picked == seen {
            break;
        }
        if !*t {
            *t = true;
            picked += 1;
        }
    }
    let mut seen_pairs = Vec::with_capacity(seen);
    let mut unseen_pairs = Vec::with_capacity(shuffled.len() - seen);
    for (i, p) in shuffled.iter().enumerate() {
        if taken[i] {
            seen_pairs.push(*p);
        } else {
            unseen_pairs.push(*p);
        }
    }
    let key = |p: &Pair| (p.attr, p.obj);
    seen_pairs.sort_by_key(key);
    unseen_pairs.sort_by_key(key);
    (seen_pairs, unseen_pairs)
}

/// Generate a complete bundle from a spec. Deterministic in the spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthBundle> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;

    let attr_vecs: Vec<Vec<f64>> = (0..spec.attributes)
        .map(|_| gaussian_unit(&mut rng, dim))
        .collect();
    let obj_vecs: Vec<Vec<f64>> = (0..spec.objects)
        .map(|_| gaussian_unit(&mut rng, dim))
        .collect();

    let mut cells: Vec<Pair> = Vec::with_capacity(spec.cells());
    for a in 0..spec.attributes {
        for o in 0..spec.objects {
            cells.push(Pair::new(a, o));
        }
    }
    cells.shuffle(&mut rng);
    let (seen_pairs, unseen_pairs) =
        pick_pairs(&cells, spec.attributes, spec.objects, spec.seen_count());

    let manifest = Manifest {
        attributes: (0..spec.attributes).map(|a| format!("attr_{a}")).collect(),
        objects: (0..spec.objects).map(|o| format!("obj_{o}")).collect(),
        seen_pairs,
        unseen_pairs,
        world: spec.world,
        files: None,
    };
    let space = build_composition_space(&manifest, None)?;

    // Ground-truth direction per candidate.
    let mut ground = Mat::zeros(space.candidate_count(), dim);
    for (i, pair) in space.candidates().iter().enumerate() {
        let a = &attr_vecs[pair.attr];
        let o = &obj_vecs[pair.obj];
        let v: Vec<f64> = (0..dim)
            .map(|k| spec.attribute_strength * a[k] + spec.object_strength * o[k])
            .collect();
        let u = normalized(&v).map_err(|_| {
            Error::Runtime(format!(
                "pair ({}, {}) composed to a zero vector",
                pair.attr, pair.obj
            ))
        })?;
        ground.row_mut(i).copy_from_slice(&u);
    }

    // Textual prototypes, candidate order.
    let mut text = Mat::zeros(space.candidate_count(), dim);
    for i in 0..space.candidate_count() {
        let mut t = noisy_unit(&mut rng, ground.row(i), spec.text_noise)?;
        if !space.is_seen(i) {
            t = noisy_unit(&mut rng, &t, spec.unseen_text_shift)?;
        }
        text.row_mut(i).copy_from_slice(&t);
    }

    // Warm-start features for seen classes, candidate order.
    let seen_idx = space.seen_candidate_indices();
    let mut train_features = Mat::zeros(seen_idx.len() * spec.train_per_seen, dim);
    let mut train_labels = Vec::with_capacity(train_features.rows());
    let mut row = 0;
    for &ci in seen_idx {
        for _ in 0..spec.train_per_seen {
            let f = noisy_unit(&mut rng, ground.row(ci), spec.visual_noise)?;
            train_features.row_mut(row).copy_from_slice(&f);
            train_labels.push(space.candidates()[ci]);
            row += 1;
        }
    }

    // Labeled classes (candidate indices) that appear in the test stream,
    // in manifest order: seen pairs then unseen pairs.
    let mut labeled: Vec<usize> = Vec::new();
    for p in manifest.seen_pairs.iter().chain(&manifest.unseen_pairs) {
        labeled.push(
            space
                .candidate_index(*p)
                .expect("labeled pair is a candidate"),
        );
    }
    let counts = zipf_counts(labeled.len(), spec.test_samples, spec.tail_exponent);
    let mut rank_of: Vec<usize> = (0..labeled.len()).collect();
    rank_of.shuffle(&mut rng);
    let mut stream: Vec<usize> = Vec::with_capacity(spec.test_samples);
    for (rank, &slot) in rank_of.iter().enumerate() {
        for _ in 0..counts[rank] {
            stream.push(labeled[slot]);
        }
    }
    stream.shuffle(&mut rng);

    let mut test_features = Mat::zeros(stream.len(), dim);
    let mut test_labels = Vec::with_capacity(stream.len());
    for (r, &ci) in stream.iter().enumerate() {
        let f = noisy_unit(&mut rng, ground.row(ci), spec.visual_noise)?;
        test_features.row_mut(r).copy_from_slice(&f);
        test_labels.push(space.candidates()[ci]);
    }

    Ok(SynthBundle {
        manifest,
        text,
        train_features,
        train_labels,
        test_features,
        test_labels,
    })
}

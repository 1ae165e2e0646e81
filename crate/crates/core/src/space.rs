//! Composition space: attribute and object vocabularies, the seen/unseen
//! pair split, and the ordered candidate set predictions range over.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// An attribute-object composition, e.g. ("red", "car") by index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "(usize, usize)", from = "(usize, usize)")]
pub struct Pair {
    pub attr: usize,
    pub obj: usize,
}

impl Pair {
    pub fn new(attr: usize, obj: usize) -> Self {
        Pair { attr, obj }
    }
}

impl From<(usize, usize)> for Pair {
    fn from(t: (usize, usize)) -> Self {
        Pair {
            attr: t.0,
            obj: t.1,
        }
    }
}

impl From<Pair> for (usize, usize) {
    fn from(p: Pair) -> Self {
        (p.attr, p.obj)
    }
}

/// Candidate-set regime: `Closed` ranges over seen ∪ unseen pairs; `Open`
/// ranges over the full attribute × object grid, optionally pruned by a
/// feasibility mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    #[default]
    Closed,
    Open,
}

/// Files referenced by a dataset manifest, relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleFiles {
    pub text_embeddings: String,
    pub train_features: String,
    pub train_labels: String,
    pub test_features: String,
    pub test_labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feasibility_mask: Option<String>,
}

/// Dataset manifest: vocabularies, pair split, world, and data file names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub seen_pairs: Vec<Pair>,
    pub unseen_pairs: Vec<Pair>,
    #[serde(default)]
    pub world: World,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<BundleFiles>,
}

/// Validated composition space with the derived candidate ordering.
///
/// Closed world lists seen pairs in manifest order, then unseen pairs in
/// manifest order. Open world lists the attribute-major grid, skipping
/// masked-out pairs. Both orderings are deterministic functions of the
/// manifest, so candidate indices are stable across runs.
#[derive(Debug, Clone)]
pub struct CompositionSpace {
    attributes: Vec<String>,
    objects: Vec<String>,
    seen: Vec<Pair>,
    unseen: Vec<Pair>,
    world: World,
    candidates: Vec<Pair>,
    seen_flag: Vec<bool>,
    index: HashMap<Pair, usize>,
    seen_candidate_idx: Vec<usize>,
    unseen_candidate_idx: Vec<usize>,
}

/// Validate a manifest (plus optional feasibility mask) into a space.
pub fn build_composition_space(
    manifest: &Manifest,
    feasibility_mask: Option<&[bool]>,
) -> Result<CompositionSpace> {
    let na = manifest.attributes.len();
    let no = manifest.objects.len();
    if na == 0 || no == 0 {
        return Err(Error::Manifest(
            "attribute and object vocabularies must be nonempty".into(),
        ));
    }
    if manifest.seen_pairs.is_empty() {
        return Err(Error::Manifest("no seen pairs".into()));
    }
    if manifest.unseen_pairs.is_empty() {
        return Err(Error::Manifest(
            "no unseen pairs; the seen/unseen split is required".into(),
        ));
    }

    let mut seen_set = HashMap::new();
    for (k, p) in manifest.seen_pairs.iter().enumerate() {
        check_range(p, na, no, "seen")?;
        if seen_set.insert(*p, k).is_some() {
            return Err(Error::Manifest(format!(
                "duplicate seen pair ({}, {})",
                p.attr, p.obj
            )));
        }
    }
    let mut unseen_set = HashMap::new();
    for (k, p) in manifest.unseen_pairs.iter().enumerate() {
        check_range(p, na, no, "unseen")?;
        if unseen_set.insert(*p, k).is_some() {
            return Err(Error::Manifest(format!(
                "duplicate unseen pair ({}, {})",
                p.attr, p.obj
            )));
        }
        if seen_set.contains_key(p) {
            return Err(Error::Manifest(format!(
                "pair ({}, {}) listed as both seen and unseen",
                p.attr, p.obj
            )));
        }
    }

    let mut attr_covered = vec![false; na];
    let mut obj_covered = vec![false; no];
    for p in &manifest.seen_pairs {
        attr_covered[p.attr] = true;
        obj_covered[p.obj] = true;
    }
    if let Some(a) = attr_covered.iter().position(|c| !c) {
        return Err(Error::Manifest(format!(
            "attribute {a} ({:?}) appears in no seen pair",
            manifest.attributes[a]
        )));
    }
    if let Some(o) = obj_covered.iter().position(|c| !c) {
        return Err(Error::Manifest(format!(
            "object {o} ({:?}) appears in no seen pair",
            manifest.objects[o]
        )));
    }

    let candidates: Vec<Pair> = match manifest.world {
        World::Closed => {
            if feasibility_mask.is_some() {
                return Err(Error::Manifest(
                    "feasibility mask is only valid in the open world".into(),
                ));
            }
            manifest
                .seen_pairs
                .iter()
                .chain(manifest.unseen_pairs.iter())
                .copied()
                .collect()
        }
        World::Open => {
            if let Some(mask) = feasibility_mask {
                if mask.len() != na * no {
                    return Err(Error::Manifest(format!(
                        "feasibility mask has {} entries, expected {}x{}={}",
                        mask.len(),
                        na,
                        no,
                        na * no
                    )));
                }
            }
            let mut out = Vec::new();
            for a in 0..na {
                for o in 0..no {
                    let keep = feasibility_mask.is_none_or(|m| m[a * no + o]);
                    if keep {
                        out.push(Pair::new(a, o));
                    }
                }
            }
            out
        }
    };

    let mut index = HashMap::with_capacity(candidates.len());
    for (i, p) in candidates.iter().enumerate() {
        index.insert(*p, i);
    }
    for p in manifest.seen_pairs.iter().chain(&manifest.unseen_pairs) {
        if !index.contains_key(p) {
            return Err(Error::Manifest(format!(
                "feasibility mask excludes labeled pair ({}, {})",
                p.attr, p.obj
            )));
        }
    }

    let seen_flag: Vec<bool> = candidates
        .iter()
        .map(|p| seen_set.contains_key(p))
        .collect();
    let seen_candidate_idx = manifest.seen_pairs.iter().map(|p| index[p]).collect();
    let unseen_candidate_idx = manifest.unseen_pairs.iter().map(|p| index[p]).collect();

    Ok(CompositionSpace {
        attributes: manifest.attributes.clone(),
        objects: manifest.objects.clone(),
        seen: manifest.seen_pairs.clone(),
        unseen: manifest.unseen_pairs.clone(),
        world: manifest.world,
        candidates,
        seen_flag,
        index,
        seen_candidate_idx,
        unseen_candidate_idx,
    })
}

fn check_range(p: &Pair, na: usize, no: usize, kind: &str) -> Result<()> {
    if p.attr >= na || p.obj >= no {
        return Err(Error::Manifest(format!(
            "{kind} pair ({}, {}) out of range for {na} attributes x {no} objects",
            p.attr, p.obj
        )));
    }
    Ok(())
}

impl CompositionSpace {
    pub fn world(&self) -> World {
        self.world
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn seen_pairs(&self) -> &[Pair] {
        &self.seen
    }

    pub fn unseen_pairs(&self) -> &[Pair] {
        &self.unseen
    }

    /// Ordered candidate set C^te.
    pub fn candidates(&self) -> &[Pair] {
        &self.candidates
    }

    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidate_index(&self, p: Pair) -> Option<usize> {
        self.index.get(&p).copied()
    }

    /// Whether candidate `i` is a seen composition.
    pub fn is_seen(&self, i: usize) -> bool {
        self.seen_flag[i]
    }

    /// Candidate indices of the manifest's seen pairs, in manifest order.
    pub fn seen_candidate_indices(&self) -> &[usize] {
        &self.seen_candidate_idx
    }

    /// Candidate indices of the manifest's unseen pairs, in manifest order.
    pub fn unseen_candidate_indices(&self) -> &[usize] {
        &self.unseen_candidate_idx
    }

    pub fn pair_label(&self, p: Pair) -> String {
        format!("{} {}", self.attributes[p.attr], self.objects[p.obj])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_2x2() -> Manifest {
        Manifest {
            attributes: vec!["wet".into(), "dry".into()],
            objects: vec!["dog".into(), "road".into()],
            seen_pairs: vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0)],
            unseen_pairs: vec![Pair::new(1, 1)],
            world: World::Closed,
            files: None,
        }
    }

    #[test]
    fn closed_world_candidate_order_is_seen_then_unseen() {
        let s = build_composition_space(&manifest_2x2(), None).unwrap();
        assert_eq!(
            s.candidates(),
            &[
                Pair::new(0, 0),
                Pair::new(0, 1),
                Pair::new(1, 0),
                Pair::new(1, 1)
            ]
        );
        assert_eq!(s.seen_candidate_indices(), &[0, 1, 2]);
        assert_eq!(s.unseen_candidate_indices(), &[3]);
        assert!(s.is_seen(0) && !s.is_seen(3));
    }

    #[test]
    fn open_world_is_row_major_and_superset_of_closed() {
        let mut m = manifest_2x2();
        m.world = World::Open;
        let open = build_composition_space(&m, None).unwrap();
        assert_eq!(open.candidate_count(), 4);
        let closed = build_composition_space(&manifest_2x2(), None).unwrap();
        for p in closed.candidates() {
            assert!(open.candidate_index(*p).is_some());
        }
        // Masking down to exactly seen ∪ unseen makes the candidate sets equal.
        let mask = vec![true, true, true, true];
        let masked = build_composition_space(&m, Some(&mask)).unwrap();
        let mut a: Vec<Pair> = masked.candidates().to_vec();
        let mut b: Vec<Pair> = closed.candidates().to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn mask_cannot_drop_labeled_pairs() {
        let mut m = manifest_2x2();
        m.world = World::Open;
        let mask = vec![true, true, true, false]; // drops unseen (1,1)
        let err = build_composition_space(&m, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn mask_rejected_in_closed_world() {
        let m = manifest_2x2();
        assert!(build_composition_space(&m, Some(&[true; 4])).is_err());
    }

    #[test]
    fn overlap_and_duplicates_rejected() {
        let mut m = manifest_2x2();
        m.unseen_pairs.push(Pair::new(0, 0));
        assert!(build_composition_space(&m, None).is_err());

        let mut m = manifest_2x2();
        m.seen_pairs.push(Pair::new(0, 0));
        assert!(build_composition_space(&m, None).is_err());
    }

    #[test]
    fn uncovered_primitive_rejected() {
        let m = Manifest {
            attributes: vec!["a0".into(), "a1".into()],
            objects: vec!["o0".into()],
            seen_pairs: vec![Pair::new(0, 0)],
            unseen_pairs: vec![Pair::new(1, 0)],
            world: World::Closed,
            files: None,
        };
        let err = build_composition_space(&m, None).unwrap_err();
        assert!(err.to_string().contains("attribute 1"));
    }

    #[test]
    fn out_of_range_pair_rejected() {
        let mut m = manifest_2x2();
        m.unseen_pairs = vec![Pair::new(1, 5)];
        assert!(build_composition_space(&m, None).is_err());
    }

    #[test]
    fn pair_serializes_as_tuple() {
        let p = Pair::new(2, 7);
        assert_eq!(serde_json::to_string(&p).unwrap(), "[2,7]");
        let q: Pair = serde_json::from_str("[2,7]").unwrap();
        assert_eq!(p, q);
    }
}

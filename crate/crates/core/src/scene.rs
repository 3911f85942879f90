//! Scene and feature data model, left-to-right ordering and train-time pair
//! sampling.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predicate id reserved for "no relation".
pub const BACKGROUND: usize = 0;

/// Axis-aligned box in pixel coordinates, serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    /// True when `self` lies strictly inside `outer`.
    pub fn strictly_inside(&self, outer: &BBox) -> bool {
        self.x1 > outer.x1 && self.y1 > outer.y1 && self.x2 < outer.x2 && self.y2 < outer.y2
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Category id in `1..=D_l`.
    pub label: usize,
    /// Detector label distribution over the `D_l` categories, if available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subj: usize,
    pub obj: usize,
    /// Predicate id in `1..=D_r`.
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

impl Scene {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.label).collect()
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    /// Binary ground-truth adjacency, row-major `N x N`.
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.num_objects();
        let mut a = vec![false; n * n];
        for r in &self.relations {
            a[r.subj * n + r.obj] = true;
        }
        a
    }

    pub fn predicate_of(&self, subj: usize, obj: usize) -> Option<usize> {
        self.relations
            .iter()
            .find(|r| r.subj == subj && r.obj == obj)
            .map(|r| r.predicate)
    }

    /// Checks the structural invariants. `label_count` and `predicate_count`
    /// bound the ids when given.
    pub fn validate(&self, label_count: Option<usize>, predicate_count: Option<usize>) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(&self.scene_id, msg));
        if !(self.width > 0.0 && self.height > 0.0) {
            return fail(format!("non-positive size {}x{}", self.width, self.height));
        }
        let n = self.num_objects();
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_valid() {
                return fail(format!("object {i} has invalid box {:?}", <[f64; 4]>::from(o.bbox)));
            }
            if o.label == 0 || label_count.is_some_and(|d| o.label > d) {
                return fail(format!("object {i} has label {} out of range", o.label));
            }
            if let Some(p) = &o.prior {
                if label_count.is_some_and(|d| p.len() != d) {
                    return fail(format!("object {i} prior has {} entries", p.len()));
                }
                let total: f64 = p.iter().sum();
                if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (total - 1.0).abs() > 1e-6 {
                    return fail(format!("object {i} prior is not a distribution"));
                }
            }
        }
        let mut seen = vec![false; n * n];
        for r in &self.relations {
            if r.subj >= n || r.obj >= n {
                return fail(format!("relation ({}, {}) indexes past {n} objects", r.subj, r.obj));
            }
            if r.subj == r.obj {
                return fail(format!("self relation on object {}", r.subj));
            }
            if r.predicate == BACKGROUND || predicate_count.is_some_and(|d| r.predicate > d) {
                return fail(format!("predicate {} out of range", r.predicate));
            }
            if std::mem::replace(&mut seen[r.subj * n + r.obj], true) {
                return fail(format!("pair ({}, {}) has two predicates", r.subj, r.obj));
            }
        }
        Ok(())
    }
}

/// Per-object and per-pair features of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub num_objects: usize,
    pub feature_dim: usize,
    pub label_count: usize,
    /// `N x D_f`
    pub object_features: Vec<f64>,
    /// `N x N x D_f`; entry `(i, j)` describes the union box of `i` and `j`.
    pub union_features: Vec<f64>,
    /// `N x D_l` detector label distributions.
    pub prior_label_dist: Vec<f64>,
}

impl FeatureSet {
    pub fn new(
        num_objects: usize,
        feature_dim: usize,
        label_count: usize,
        object_features: Vec<f64>,
        union_features: Vec<f64>,
        prior_label_dist: Vec<f64>,
    ) -> Result<Self> {
        let n = num_objects;
        if object_features.len() != n * feature_dim
            || union_features.len() != n * n * feature_dim
            || prior_label_dist.len() != n * label_count
        {
            return Err(Error::dim(
                "feature_set",
                &[n, feature_dim, label_count],
                &[
                    object_features.len(),
                    union_features.len(),
                    prior_label_dist.len(),
                ],
            ));
        }
        Ok(FeatureSet {
            num_objects,
            feature_dim,
            label_count,
            object_features,
            union_features,
            prior_label_dist,
        })
    }

    pub fn object_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.num_objects, self.feature_dim],
            self.object_features.clone(),
        )
        .expect("checked at construction")
    }

    pub fn union_tensor(&self) -> Tensor {
        let n = self.num_objects;
        Tensor::new(vec![n, n, self.feature_dim], self.union_features.clone())
            .expect("checked at construction")
    }

    pub fn prior(&self, i: usize) -> &[f64] {
        &self.prior_label_dist[i * self.label_count..(i + 1) * self.label_count]
    }

    /// Priors replaced by one-hot ground truth, as used when labels are given.
    pub fn with_onehot_priors(&self, labels: &[usize]) -> FeatureSet {
        let mut out = self.clone();
        out.prior_label_dist.iter_mut().for_each(|v| *v = 0.0);
        for (i, &l) in labels.iter().enumerate() {
            out.prior_label_dist[i * self.label_count + l - 1] = 1.0;
        }
        out
    }

    /// Label id (1-based) with the highest prior for each object; ties go to
    /// the smallest id.
    pub fn prior_labels(&self) -> Vec<usize> {
        (0..self.num_objects)
            .map(|i| argmax(self.prior(i)) + 1)
            .collect()
    }
}

/// Index of the largest entry, first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Permutation (`perm[new] = old`) ordering objects by ascending box centre x,
/// then centre y, then original index.
pub fn sort_left_to_right(scene: &Scene) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..scene.num_objects()).collect();
    let key = |i: usize| {
        let b = &scene.objects[i].bbox;
        (b.center_x(), b.center_y())
    };
    perm.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.partial_cmp(&kb.0)
            .unwrap_or(Ordering::Equal)
            .then(ka.1.partial_cmp(&kb.1).unwrap_or(Ordering::Equal))
            .then(a.cmp(&b))
    });
    perm
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

/// Reorders objects, relation indices, and features by `perm[new] = old`.
pub fn apply_permutation(scene: &Scene, feats: &FeatureSet, perm: &[usize]) -> (Scene, FeatureSet) {
    let n = scene.num_objects();
    let inv = invert_permutation(perm);
    let objects = perm.iter().map(|&old| scene.objects[old].clone()).collect();
    let relations = scene
        .relations
        .iter()
        .map(|r| Relation {
            subj: inv[r.subj],
            obj: inv[r.obj],
            predicate: r.predicate,
        })
        .collect();
    let d = feats.feature_dim;
    let dl = feats.label_count;
    let mut object_features = Vec::with_capacity(n * d);
    let mut prior = Vec::with_capacity(n * dl);
    for &old in perm {
        object_features.extend_from_slice(&feats.object_features[old * d..(old + 1) * d]);
        prior.extend_from_slice(feats.prior(old));
    }
    let mut union_features = Vec::with_capacity(n * n * d);
    for &oi in perm {
        for &oj in perm {
            let base = (oi * n + oj) * d;
            union_features.extend_from_slice(&feats.union_features[base..base + d]);
        }
    }
    (
        Scene {
            scene_id: scene.scene_id.clone(),
            width: scene.width,
            height: scene.height,
            objects,
            relations,
        },
        FeatureSet {
            num_objects: n,
            feature_dim: d,
            label_count: dl,
            object_features,
            union_features,
            prior_label_dist: prior,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// Targets are 0/1 relation existence.
    Adjacency,
    /// Targets are predicate ids, background for negatives.
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub kind: SampleKind,
    /// `(subject, object, target)`
    pub pairs: Vec<(usize, usize, usize)>,
}

/// Keeps every ground-truth pair and draws negatives uniformly without
/// replacement: half as many (rounded down) for adjacency samples, as many
/// for relation samples, or all available when fewer exist.
pub fn sample_pairs(scene: &Scene, kind: SampleKind, seed: u64) -> PairSample {
    let n = scene.num_objects();
    let adj = scene.adjacency();
    let mut pairs: Vec<(usize, usize, usize)> = scene
        .relations
        .iter()
        .map(|r| {
            let target = match kind {
                SampleKind::Adjacency => 1,
                SampleKind::Relation => r.predicate,
            };
            (r.subj, r.obj, target)
        })
        .collect();
    let wanted = match kind {
        SampleKind::Adjacency => pairs.len() / 2,
        SampleKind::Relation => pairs.len(),
    };
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && !adj[i * n + j])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.extend(
        candidates
            .choose_multiple(&mut rng, wanted.min(candidates.len()))
            .map(|&(i, j)| (i, j, BACKGROUND)),
    );
    PairSample { kind, pairs }
}

//! Synthetic scenes with rule-based ground-truth relations.
//!
//! Boxes are placed uniformly, with a size band tied to the category so that
//! labels and geometry are correlated. Relations come from fixed geometric
//! rules in priority order
//! `inside > contains > left_of > above > near > overlaps`; predicates whose id
//! exceeds the configured predicate count are disabled.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{union_box, BBox, FeatureSet, Relation, Scene, SceneObject};

pub const LEFT_OF: usize = 1;
pub const ABOVE: usize = 2;
pub const INSIDE: usize = 3;
pub const NEAR: usize = 4;
pub const CONTAINS: usize = 5;
pub const OVERLAPS: usize = 6;

/// Display names for the rule predicates, indexed by id (0 is background).
pub const PREDICATE_NAMES: [&str; 7] = [
    "__background__",
    "left_of",
    "above",
    "inside",
    "near",
    "contains",
    "overlaps",
];

pub fn predicate_name(id: usize) -> String {
    PREDICATE_NAMES
        .get(id)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("predicate_{id}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub label_count: usize,
    pub predicate_count: usize,
    pub feature_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub width: f64,
    pub height: f64,
    /// Amplitude of the uniform noise added to object features.
    pub noise: f64,
    /// Probability that an object's detector prior peaks on a wrong label.
    pub label_corruption: f64,
    /// Mass of the prior placed on the detector's chosen label.
    pub prior_confidence: f64,
    /// Directional and proximity rules only fire for pairs whose centres are
    /// closer than this fraction of the scene diagonal.
    pub relation_radius: f64,
    /// Distance threshold, as a fraction of the diagonal, for `near`.
    pub near_radius: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            label_count: 12,
            predicate_count: 6,
            feature_dim: 32,
            min_objects: 4,
            max_objects: 10,
            width: 640.0,
            height: 480.0,
            noise: 0.05,
            label_corruption: 0.3,
            prior_confidence: 0.6,
            relation_radius: 0.2,
            near_radius: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.label_count < 2 {
            return bad("need at least 2 object categories");
        }
        if self.predicate_count < 2 {
            return bad("need at least 2 predicates");
        }
        if self.feature_dim == 0 {
            return bad("feature dimension must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max");
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return bad("scene size must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_corruption) || !(0.0..=1.0).contains(&self.prior_confidence) {
            return bad("label_corruption and prior_confidence must lie in [0, 1]");
        }
        if self.noise < 0.0 {
            return bad("noise must be non-negative");
        }
        Ok(())
    }
}

/// The predicate the rules assign to the ordered pair `(a, b)`, if any.
pub fn relation_between(a: &BBox, b: &BBox, diagonal: f64, cfg: &GenConfig) -> Option<usize> {
    let enabled = |p: usize| p <= cfg.predicate_count;
    let dist = (a.center_x() - b.center_x()).hypot(a.center_y() - b.center_y());
    let close = dist < cfg.relation_radius * diagonal;
    if enabled(INSIDE) && a.strictly_inside(b) {
        return Some(INSIDE);
    }
    if enabled(CONTAINS) && b.strictly_inside(a) {
        return Some(CONTAINS);
    }
    if close {
        if enabled(LEFT_OF) && a.center_x() + a.width() / 2.0 < b.center_x() - b.width() / 2.0 {
            return Some(LEFT_OF);
        }
        if enabled(ABOVE) && a.center_y() + a.height() / 2.0 < b.center_y() - b.height() / 2.0 {
            return Some(ABOVE);
        }
        if enabled(NEAR) && dist < cfg.near_radius * diagonal {
            return Some(NEAR);
        }
    }
    if enabled(OVERLAPS) && a.intersects(b) {
        return Some(OVERLAPS);
    }
    None
}

/// All rule relations among `objects`, in row-major pair order.
pub fn derive_relations(objects: &[SceneObject], diagonal: f64, cfg: &GenConfig) -> Vec<Relation> {
    let mut out = Vec::new();
    for (i, a) in objects.iter().enumerate() {
        for (j, b) in objects.iter().enumerate() {
            if i == j {
                continue;
            }
            if let Some(predicate) = relation_between(&a.bbox, &b.bbox, diagonal, cfg) {
                out.push(Relation {
                    subj: i,
                    obj: j,
                    predicate,
                });
            }
        }
    }
    out
}

fn rbf(x: f64, k: usize, count: usize) -> f64 {
    let centre = if count > 1 {
        k as f64 / (count - 1) as f64
    } else {
        0.5
    };
    let z = (x - centre) / 0.15;
    (-0.5 * z * z).exp()
}

/// Normalised geometry: `[x1, y1, x2, y2, cx, cy, w, h]` over the scene size.
fn geometry(b: &BBox, width: f64, height: f64) -> [f64; 8] {
    [
        b.x1 / width,
        b.y1 / height,
        b.x2 / width,
        b.y2 / height,
        b.center_x() / width,
        b.center_y() / height,
        b.width() / width,
        b.height() / height,
    ]
}

/// Lays `base` into `dim` slots (wrapping and summing when longer) and fills
/// the remaining slots with radial-basis encodings of `(a, b)`, alternating.
fn pack(base: &[f64], dim: usize, a: f64, b: f64) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (k, v) in base.iter().enumerate() {
        out[k % dim] += v;
    }
    if base.len() < dim {
        let free = dim - base.len();
        let per_a = free.div_ceil(2);
        let per_b = free / 2;
        for s in 0..free {
            let v = if s % 2 == 0 {
                rbf(a, s / 2, per_a)
            } else {
                rbf(b, s / 2, per_b)
            };
            out[base.len() + s] = v;
        }
    }
    out
}

/// Noise-free object encoding: bias, geometry and one-hot label.
pub fn object_encoding(b: &BBox, label: usize, cfg: &GenConfig) -> Vec<f64> {
    let g = geometry(b, cfg.width, cfg.height);
    let mut base = vec![1.0];
    base.extend_from_slice(&g);
    let mut onehot = vec![0.0; cfg.label_count];
    onehot[label - 1] = 1.0;
    base.extend(onehot);
    pack(&base, cfg.feature_dim, g[4], g[5])
}

/// Encoding of a union box: bias, geometry, area and size radial bases.
pub fn union_encoding(u: &BBox, cfg: &GenConfig) -> Vec<f64> {
    let g = geometry(u, cfg.width, cfg.height);
    let mut base = vec![1.0];
    base.extend_from_slice(&g);
    base.push(g[6] * g[7]);
    pack(&base, cfg.feature_dim, g[6], g[7])
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Generates one scene and its features. Identical `(cfg, seed)` give
/// identical output.
pub fn generate_synthetic_scene(cfg: &GenConfig, seed: u64) -> Result<(Scene, FeatureSet)> {
    generate_indexed(cfg, seed, 0)
}

/// Scene `index` of the stream seeded by `seed`.
pub fn generate_indexed(cfg: &GenConfig, seed: u64, index: u64) -> Result<(Scene, FeatureSet)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let dl = cfg.label_count;
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(1..=dl);
        // larger ids are larger objects
        let band = 0.06 + 0.16 * (label - 1) as f64 / (dl - 1) as f64;
        let w = (band * rng.gen_range(0.8..1.2) * cfg.width).min(0.9 * cfg.width);
        let h = (band * rng.gen_range(0.8..1.2) * cfg.height).min(0.9 * cfg.height);
        let x1 = rng.gen_range(0.0..cfg.width - w);
        let y1 = rng.gen_range(0.0..cfg.height - h);
        let round = |v: f64| (v * 100.0).round() / 100.0;
        let bbox = BBox::new(round(x1), round(y1), round(x1 + w), round(y1 + h));
        objects.push(SceneObject {
            bbox,
            label,
            prior: None,
        });
    }
    for o in objects.iter_mut() {
        let shown = if dl > 1 && rng.gen_bool(cfg.label_corruption) {
            let wrong = rng.gen_range(1..dl);
            if wrong >= o.label {
                wrong + 1
            } else {
                wrong
            }
        } else {
            o.label
        };
        let mut noise: Vec<f64> = (0..dl).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = noise.iter().sum();
        noise.iter_mut().for_each(|v| *v *= (1.0 - cfg.prior_confidence) / total);
        noise[shown - 1] += cfg.prior_confidence;
        o.prior = Some(noise);
    }
    let diagonal = cfg.width.hypot(cfg.height);
    let relations = derive_relations(&objects, diagonal, cfg);

    let d = cfg.feature_dim;
    let mut object_features = Vec::with_capacity(n * d);
    for o in &objects {
        for v in object_encoding(&o.bbox, o.label, cfg) {
            object_features.push(to_f32(v + rng.gen_range(-1.0..=1.0) * cfg.noise));
        }
    }
    let mut union_features = Vec::with_capacity(n * n * d);
    for a in &objects {
        for b in &objects {
            let u = union_box(&a.bbox, &b.bbox);
            union_features.extend(union_encoding(&u, cfg).into_iter().map(to_f32));
        }
    }
    let prior: Vec<f64> = objects
        .iter()
        .flat_map(|o| o.prior.clone().unwrap_or_default())
        .collect();
    let scene = Scene {
        scene_id: format!("synth-{seed}-{index:06}"),
        width: cfg.width,
        height: cfg.height,
        objects,
        relations,
    };
    let feats = FeatureSet::new(n, d, dl, object_features, union_features, prior)?;
    Ok((scene, feats))
}

/// `count` consecutive scenes of the stream seeded by `seed`, starting at
/// stream index `offset`.
pub fn generate_dataset(
    cfg: &GenConfig,
    seed: u64,
    offset: u64,
    count: usize,
) -> Result<Vec<(Scene, FeatureSet)>> {
    (0..count as u64)
        .map(|k| generate_indexed(cfg, seed, offset + k))
        .collect()
}

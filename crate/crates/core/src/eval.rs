//! Triple ranking, Recall@K, per-predicate recall and object accuracy.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::config::Task;
use crate::error::Result;
use crate::model::{Model, Prediction};
use crate::scene::{FeatureSet, Scene, BACKGROUND};

pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
/// K used for the per-predicate breakdown (without graph constraint).
pub const PER_PREDICATE_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredTriple {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
    pub score: f64,
}

/// Candidate triples sorted by descending score, ties by `(subj, obj,
/// predicate)`. `probs` is `N x N x classes`; with `confidences` each score is
/// multiplied by both objects' label confidence. Under the graph constraint
/// each ordered pair offers only its best non-background predicate.
pub fn rank_triples(
    probs: &[f64],
    n: usize,
    classes: usize,
    confidences: Option<&[f64]>,
    constrained: bool,
) -> Vec<ScoredTriple> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let cell = &probs[(i * n + j) * classes..(i * n + j + 1) * classes];
            let weight = confidences.map_or(1.0, |c| c[i] * c[j]);
            let mut push = |m: usize| {
                out.push(ScoredTriple {
                    subj: i,
                    obj: j,
                    predicate: m,
                    score: cell[m] * weight,
                })
            };
            if constrained {
                // first maximum keeps the smallest predicate id on ties
                let best = (1..classes).fold(1, |b, m| if cell[m] > cell[b] { m } else { b });
                if classes > 1 {
                    push(best);
                }
            } else {
                (1..classes).for_each(&mut push);
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (a.subj, a.obj, a.predicate).cmp(&(b.subj, b.obj, b.predicate)))
    });
    debug_assert!(out.iter().all(|t| t.predicate != BACKGROUND));
    out
}

/// Ranking for one prediction under a task protocol: SGCLS weighs by the
/// label confidences.
pub fn rank_prediction(pred: &Prediction, task: Task, constrained: bool) -> Vec<ScoredTriple> {
    let conf = match task {
        Task::Sgcls => Some(pred.labels.confidences()),
        Task::Predcls => None,
    };
    rank_triples(&pred.probs, pred.num_objects, pred.classes, conf.as_deref(), constrained)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub value: f64,
    /// Set when the scene has no ground-truth relations; the value is then 1.
    pub degenerate: bool,
}

fn hits<'a>(
    ranked: &'a [ScoredTriple],
    gt: &Scene,
    labels: Option<&'a [usize]>,
    k: usize,
) -> impl Iterator<Item = &'a ScoredTriple> + 'a {
    let truth: HashSet<(usize, usize, usize)> = gt.relations.iter().map(|r| (r.subj, r.obj, r.predicate)).collect();
    let gt_labels = gt.labels();
    ranked.iter().take(k).filter(move |t| {
        truth.contains(&(t.subj, t.obj, t.predicate))
            && labels.is_none_or(|l| l[t.subj] == gt_labels[t.subj] && l[t.obj] == gt_labels[t.obj])
    })
}

/// Fraction of ground-truth triples found among the top `k`. With `labels`,
/// a match also needs both predicted object labels to be correct.
pub fn recall_at_k(ranked: &[ScoredTriple], gt: &Scene, labels: Option<&[usize]>, k: usize) -> Recall {
    assert!(k > 0, "K must be positive");
    let total: HashSet<_> = gt.relations.iter().map(|r| (r.subj, r.obj, r.predicate)).collect();
    if total.is_empty() {
        return Recall {
            value: 1.0,
            degenerate: true,
        };
    }
    let found: HashSet<_> = hits(ranked, gt, labels, k).map(|t| (t.subj, t.obj, t.predicate)).collect();
    Recall {
        value: found.len() as f64 / total.len() as f64,
        degenerate: false,
    }
}

/// Recall restricted to each predicate present in the scene.
pub fn scene_predicate_recall(
    ranked: &[ScoredTriple],
    gt: &Scene,
    labels: Option<&[usize]>,
    k: usize,
) -> BTreeMap<usize, f64> {
    let mut total: BTreeMap<usize, HashSet<(usize, usize)>> = BTreeMap::new();
    for r in &gt.relations {
        total.entry(r.predicate).or_default().insert((r.subj, r.obj));
    }
    let mut found: BTreeMap<usize, HashSet<(usize, usize)>> = BTreeMap::new();
    for t in hits(ranked, gt, labels, k) {
        found.entry(t.predicate).or_default().insert((t.subj, t.obj));
    }
    total
        .into_iter()
        .map(|(p, pairs)| {
            let f = found.get(&p).map_or(0, HashSet::len);
            (p, f as f64 / pairs.len() as f64)
        })
        .collect()
}

/// Fraction of exact label matches; 1 for an empty scene.
pub fn object_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len(), "label count mismatch");
    if truth.is_empty() {
        return 1.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub task: Task,
    pub ks: Vec<usize>,
    /// Constraint modes to report.
    pub constrained: Vec<bool>,
}

impl EvalOptions {
    pub fn new(task: Task) -> Self {
        EvalOptions {
            task,
            ks: DEFAULT_KS.to_vec(),
            constrained: vec![true, false],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallEntry {
    pub k: usize,
    pub constrained: bool,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub scenes: usize,
    /// Scenes without ground-truth relations, left out of the recall means.
    pub degenerate_scenes: usize,
    pub recall: Vec<RecallEntry>,
    /// Predicate id to mean recall over the scenes containing it.
    pub per_predicate_recall: BTreeMap<usize, f64>,
    /// Pooled over all objects.
    pub object_accuracy: f64,
}

impl EvalReport {
    pub fn recall(&self, k: usize, constrained: bool) -> Option<f64> {
        self.recall
            .iter()
            .find(|e| e.k == k && e.constrained == constrained)
            .map(|e| e.value)
    }

    /// One metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.recall {
            out.push_str(&format!(
                "task={} metric=recall k={} constrained={} value={:.6}\n",
                self.task, e.k, e.constrained, e.value
            ));
        }
        for (p, v) in &self.per_predicate_recall {
            out.push_str(&format!(
                "task={} metric=predicate_recall predicate={} k={} constrained=false value={:.6}\n",
                self.task, p, PER_PREDICATE_K, v
            ));
        }
        out.push_str(&format!(
            "task={} metric=object_accuracy value={:.6}\n",
            self.task, self.object_accuracy
        ));
        out.push_str(&format!(
            "task={} scenes={} degenerate_scenes={}\n",
            self.task, self.scenes, self.degenerate_scenes
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Accumulates per-scene metrics into an [`EvalReport`].
#[derive(Debug, Clone)]
pub struct Accumulator {
    opts: EvalOptions,
    scenes: usize,
    degenerate: usize,
    recall_sums: Vec<f64>,
    predicate_sums: BTreeMap<usize, (f64, usize)>,
    correct: usize,
    objects: usize,
}

impl Accumulator {
    pub fn new(opts: EvalOptions) -> Self {
        let slots = opts.ks.len() * opts.constrained.len();
        Accumulator {
            opts,
            scenes: 0,
            degenerate: 0,
            recall_sums: vec![0.0; slots],
            predicate_sums: BTreeMap::new(),
            correct: 0,
            objects: 0,
        }
    }

    pub fn add(&mut self, pred: &Prediction, gt: &Scene) {
        let task = self.opts.task;
        let labels = match task {
            Task::Sgcls => Some(pred.labels.labels.as_slice()),
            Task::Predcls => None,
        };
        self.scenes += 1;
        let truth = gt.labels();
        self.correct += pred.labels.labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        self.objects += truth.len();
        if gt.relations.is_empty() {
            self.degenerate += 1;
            return;
        }
        let mut slot = 0;
        for &constrained in &self.opts.constrained {
            let ranked = rank_prediction(pred, task, constrained);
            for &k in &self.opts.ks {
                self.recall_sums[slot] += recall_at_k(&ranked, gt, labels, k).value;
                slot += 1;
            }
        }
        let ranked = rank_prediction(pred, task, false);
        for (p, v) in scene_predicate_recall(&ranked, gt, labels, PER_PREDICATE_K) {
            let e = self.predicate_sums.entry(p).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }

    pub fn finish(self) -> EvalReport {
        let counted = self.scenes - self.degenerate;
        let mut recall = Vec::new();
        let mut slot = 0;
        for &constrained in &self.opts.constrained {
            for &k in &self.opts.ks {
                let value = if counted == 0 {
                    1.0
                } else {
                    self.recall_sums[slot] / counted as f64
                };
                recall.push(RecallEntry { k, constrained, value });
                slot += 1;
            }
        }
        EvalReport {
            task: self.opts.task.to_string(),
            scenes: self.scenes,
            degenerate_scenes: self.degenerate,
            recall,
            per_predicate_recall: self
                .predicate_sums
                .into_iter()
                .map(|(p, (s, c))| (p, s / c as f64))
                .collect(),
            object_accuracy: if self.objects == 0 {
                1.0
            } else {
                self.correct as f64 / self.objects as f64
            },
        }
    }
}

/// Runs the model over a split and reports the metrics.
pub fn evaluate(model: &Model, data: &[(Scene, FeatureSet)], opts: &EvalOptions) -> Result<EvalReport> {
    let mut acc = Accumulator::new(opts.clone());
    for (scene, feats) in data {
        model.check_input(scene, feats)?;
        let pred = model.predict(scene, feats, opts.task)?;
        acc.add(&pred, scene);
    }
    Ok(acc.finish())
}

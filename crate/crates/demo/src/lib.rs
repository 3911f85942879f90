//! Browser front end for the scene graph model.
//!
//! A [`Session`] owns a synthetic train/test split, a model and its
//! optimiser. The page steps training one epoch at a time and draws any test
//! scene with three graphs side by side: ground truth, the model's SGCLS
//! prediction, and the frequency baseline run on the detector's prior labels.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use r2net::eval::{evaluate, rank_prediction, recall_at_k, EvalOptions};
use r2net::freq::FreqTable;
use r2net::model::Example;
use r2net::refiner::RefinedLabels;
use r2net::scene::{FeatureSet, Scene};
use r2net::synth::{generate_dataset, predicate_name};
use r2net::tensor::OptimizerState;
use r2net::train::{init_model, run_epoch};
use r2net::{Model, Prediction, Result, RunConfig, Task};

pub const TEST_SCENES: usize = 24;

/// Small enough that an epoch over a hundred scenes stays interactive.
pub fn demo_config(seed: u64) -> RunConfig {
    RunConfig {
        d_h: 24,
        d_gcn: 24,
        d_dec: 24,
        d_h2: 24,
        d_gcn2: 24,
        layers2: 2,
        max_objects: 8,
        seed,
        ..RunConfig::default()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Triple {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
    pub score: f64,
    /// Subject, object and predicate all match a ground-truth relation.
    pub hit: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphView {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub relations: Vec<Triple>,
    /// Constrained recall of this scene at the requested k; `None` when the
    /// scene has no ground-truth relations.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SceneView<'a> {
    pub scene: &'a Scene,
    pub predicates: Vec<String>,
    pub model: GraphView,
    pub frequency: GraphView,
}

/// Frequency-only SGCLS prediction: labels from the detector prior, each
/// pair scored by the training-set predicate distribution of its labels.
pub fn frequency_prediction(freq: &FreqTable, feats: &FeatureSet) -> Prediction {
    let n = feats.num_objects;
    let labels = RefinedLabels::from_probabilities(&feats.prior_label_dist, feats.label_count);
    let classes = freq.classes();
    let mut probs = Vec::with_capacity(n * n * classes);
    for &a in &labels.labels {
        for &b in &labels.labels {
            probs.extend((0..classes).map(|m| freq.pred_prob(m, a, b)));
        }
    }
    Prediction {
        num_objects: n,
        classes,
        labels,
        probs,
    }
}

fn view(pred: &Prediction, gt: &Scene, k: usize) -> GraphView {
    let ranked = rank_prediction(pred, Task::Sgcls, true);
    let labels = &pred.labels.labels;
    let recall = recall_at_k(&ranked, gt, Some(labels), k);
    let relations = ranked
        .iter()
        .take(k)
        .map(|t| Triple {
            subj: t.subj,
            obj: t.obj,
            predicate: t.predicate,
            score: t.score,
            hit: gt.predicate_of(t.subj, t.obj) == Some(t.predicate)
                && labels[t.subj] == gt.objects[t.subj].label
                && labels[t.obj] == gt.objects[t.obj].label,
        })
        .collect();
    GraphView {
        labels: labels.clone(),
        confidences: pred.labels.confidences(),
        relations,
        recall: (!recall.degenerate).then_some(recall.value),
    }
}

pub struct Session {
    model: Model,
    opt: OptimizerState,
    examples: Vec<Example>,
    test: Vec<(Scene, FeatureSet)>,
    epoch: usize,
}

impl Session {
    pub fn new(seed: u64, train_scenes: usize) -> Result<Self> {
        let cfg = demo_config(seed);
        let data = generate_dataset(&cfg.generator(), seed, 0, train_scenes + TEST_SCENES)?;
        let (train, test) = data.split_at(train_scenes);
        let model = init_model(&cfg, train)?;
        let opt = OptimizerState::new(&model.params, cfg.lr, cfg.momentum)?;
        Ok(Session {
            examples: train.iter().map(|(s, f)| Example::new(s, f)).collect(),
            test: test.to_vec(),
            model,
            opt,
            epoch: 0,
        })
    }

    /// Runs one epoch and returns its mean training loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let loss = run_epoch(&mut self.model, &mut self.opt, &self.examples, self.epoch)?;
        self.epoch += 1;
        Ok(loss)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }

    pub fn scene_view(&self, index: usize, k: usize) -> Result<SceneView<'_>> {
        let (scene, feats) = &self.test[index % self.test.len()];
        let pred = self.model.predict(scene, feats, Task::Sgcls)?;
        Ok(SceneView {
            scene,
            predicates: (0..=self.model.config.d_r).map(predicate_name).collect(),
            model: view(&pred, scene, k),
            frequency: view(&frequency_prediction(&self.model.freq, feats), scene, k),
        })
    }

    /// Mean constrained SGCLS recall at `k` over the test scenes.
    pub fn test_recall(&self, k: usize) -> Result<f64> {
        let opts = EvalOptions {
            task: Task::Sgcls,
            ks: vec![k],
            constrained: vec![true],
        };
        let report = evaluate(&self.model, &self.test, &opts)?;
        Ok(report.recall(k, true).unwrap_or(0.0))
    }
}

fn js(e: r2net::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, train_scenes: u32) -> std::result::Result<Demo, JsError> {
        let inner = Session::new(seed as u64, train_scenes as usize).map_err(js)?;
        Ok(Demo { inner })
    }

    pub fn train_epoch(&mut self) -> std::result::Result<f64, JsError> {
        self.inner.train_epoch().map_err(js)
    }

    pub fn epoch(&self) -> u32 {
        self.inner.epoch() as u32
    }

    pub fn test_scenes(&self) -> u32 {
        self.inner.test_len() as u32
    }

    /// Ground truth and both predictions for one test scene, as JSON.
    pub fn scene_json(&self, index: u32, k: u32) -> std::result::Result<String, JsError> {
        let v = self.inner.scene_view(index as usize, k as usize).map_err(js)?;
        serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn test_recall(&self, k: u32) -> std::result::Result<f64, JsError> {
        self.inner.test_recall(k as usize).map_err(js)
    }
}

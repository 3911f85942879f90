//! The `generate`, `train`, `eval` and `infer` commands as library calls.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Task};
use crate::error::{Error, PathContext, Result};
use crate::eval::{evaluate, rank_prediction, EvalOptions, EvalReport};
use crate::io::{assemble, load_features, load_scenes, load_split, write_split};
use crate::scene::{BBox, FeatureSet, Scene};
use crate::synth::generate_dataset;
use crate::train::{train, TrainOutcome};

pub const CONFIG_FILE: &str = "config.txt";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// 30% of the scenes (rounded down) are held out for test; a tenth of the
/// rest (rounded down) becomes validation.
pub fn split_sizes(total: usize) -> SplitSizes {
    let test = total * 3 / 10;
    let val = (total - test) / 10;
    SplitSizes {
        train: total - test - val,
        val,
        test,
    }
}

/// Writes `<split>.scenes.jsonl`, `<split>.features.bin` for each split and
/// the configuration used, all determined by `cfg.seed`.
pub fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> Result<SplitSizes> {
    let gen = cfg.generator();
    gen.validate()?;
    let data = generate_dataset(&gen, cfg.seed, 0, cfg.num_scenes)?;
    let sizes = split_sizes(data.len());
    fs::create_dir_all(out_dir).at(out_dir)?;
    let (train, rest) = data.split_at(sizes.train);
    let (val, test) = rest.split_at(sizes.val);
    write_split(out_dir, "train", train)?;
    write_split(out_dir, "val", val)?;
    write_split(out_dir, "test", test)?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).at(&cfg_path)?;
    Ok(sizes)
}

pub fn load_data(cfg: &RunConfig, dir: &Path, split: &str) -> Result<Vec<(Scene, FeatureSet)>> {
    load_split(dir, split, cfg.d_l, cfg.d_r, cfg.d_f)
}

/// Trains on `<data>/train` (selecting on `<data>/val` when present) and
/// saves the checkpoint to `out`.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    let train_data = load_data(cfg, data_dir, "train")?;
    let val = if data_dir.join("val.scenes.jsonl").exists() {
        load_data(cfg, data_dir, "val")?
    } else {
        Vec::new()
    };
    let outcome = train(cfg, &train_data, &val)?;
    outcome.checkpoint.save(out)?;
    Ok(outcome)
}

pub fn cmd_eval(ckpt: &Path, data_dir: &Path, split: &str, opts: &EvalOptions) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let data = load_data(&ck.model.config, data_dir, split)?;
    evaluate(&ck.model, &data, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferRelation {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
    pub score: f64,
}

/// A predicted scene graph in scene-file notation, with scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferOutput {
    pub scene_id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<InferObject>,
    pub relations: Vec<InferRelation>,
}

impl InferOutput {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("output serialises")
    }
}

/// Refined labels and the top `k` triples of one scene, one predicate per
/// ordered pair.
pub fn infer_scene(ck: &Checkpoint, scene: &Scene, features: &FeatureSet, task: Task, k: usize) -> Result<InferOutput> {
    ck.model.check_input(scene, features)?;
    let pred = ck.model.predict(scene, features, task)?;
    let conf = pred.labels.confidences();
    let objects = scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| InferObject {
            bbox: o.bbox,
            label: pred.labels.labels[i],
            confidence: conf[i],
        })
        .collect();
    let relations = rank_prediction(&pred, task, true)
        .into_iter()
        .take(k)
        .map(|t| InferRelation {
            subj: t.subj,
            obj: t.obj,
            predicate: t.predicate,
            score: t.score,
        })
        .collect();
    Ok(InferOutput {
        scene_id: scene.scene_id.clone(),
        width: scene.width,
        height: scene.height,
        objects,
        relations,
    })
}

pub fn cmd_infer(ckpt: &Path, scene_file: &Path, feature_file: &Path, task: Task, k: usize) -> Result<InferOutput> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let ck = Checkpoint::load(ckpt)?;
    let cfg = &ck.model.config;
    let scenes = load_scenes(scene_file)?;
    let raw = load_features(feature_file, Some(cfg.d_f))?;
    if scenes.len() != 1 || raw.len() != 1 {
        return Err(Error::validation(
            &scene_file.display().to_string(),
            format!("expected one scene, found {} scenes and {} feature records", scenes.len(), raw.len()),
        ));
    }
    let scene = &scenes[0];
    let features = assemble(scene, raw.into_iter().next().expect("one record"), cfg.d_l)?;
    infer_scene(&ck, scene, &features, task, k)
}

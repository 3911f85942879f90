//! Mini-batch SGD over the summed stage losses.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::freq::FreqTable;
use crate::model::{Example, Mode, Model};
use crate::scene::{FeatureSet, Scene};
use crate::tape::Tape;
use crate::tensor::{sgd_step, OptimizerState};

/// Recall cut-off used to pick the best validation epoch.
pub const SELECTION_K: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-scene training loss.
    pub loss: f64,
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters (last epoch without a validation split),
    /// rounded to checkpoint precision.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn mix(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the frequency table from `train` and initialises a model.
pub fn init_model(cfg: &RunConfig, train: &[(Scene, FeatureSet)]) -> Result<Model> {
    let scenes: Vec<Scene> = train.iter().map(|(s, _)| s.clone()).collect();
    let freq = FreqTable::build(&scenes, cfg.d_l, cfg.d_r, cfg.freq_eps);
    if freq.empty_corpus {
        log::warn!("training split has no object pairs; frequency bias is uniform");
    }
    Model::new(cfg, freq)
}

/// One epoch over `examples` in a seeded order; returns the mean loss.
pub fn run_epoch(
    model: &mut Model,
    opt: &mut OptimizerState,
    examples: &[Example],
    epoch: usize,
) -> Result<f64> {
    let cfg = model.config.clone();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);

    let mut total = 0.0;
    let mut counted = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let live: Vec<usize> = batch
            .iter()
            .copied()
            .filter(|&i| examples[i].scene.num_objects() > 0)
            .collect();
        if live.is_empty() {
            continue;
        }
        model.params.zero_grad();
        let scale = 1.0 / live.len() as f64;
        for &i in &live {
            let ex = &examples[i];
            let mut tape = Tape::new();
            let mode = Mode::Train {
                sample_seed: mix(cfg.seed, epoch, i),
            };
            let fwd = model.forward(&mut tape, ex, cfg.task, mode)?;
            let loss = tape.scalar(fwd.total);
            if !loss.is_finite() {
                let what = tape.first_non_finite().unwrap_or_else(|| "loss".into());
                return Err(Error::Numerical(format!(
                    "epoch {epoch}, scene {}: non-finite loss; first non-finite tensor: {what}",
                    ex.scene.scene_id
                )));
            }
            let scaled = tape.affine(fwd.total, scale, 0.0);
            tape.backward_into(scaled, &mut model.params)?;
            total += loss;
            counted += 1;
        }
        let norm = model.params.grad_norm();
        if !norm.is_finite() {
            let what = model.params.first_non_finite().unwrap_or_else(|| "gradient norm".into());
            return Err(Error::Numerical(format!("epoch {epoch}: non-finite gradient in {what}")));
        }
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            model.params.scale_grads(cfg.clip_norm / norm);
        }
        sgd_step(&mut model.params, opt)?;
        if let Some(what) = model.params.first_non_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: parameter {what} became non-finite")));
        }
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Trains for `cfg.epochs` epochs. With a validation split the kept
/// parameters are those of the epoch with the best constrained R@20 under
/// `cfg.task` (earliest on ties).
pub fn train(cfg: &RunConfig, train: &[(Scene, FeatureSet)], val: &[(Scene, FeatureSet)]) -> Result<TrainOutcome> {
    let mut model = init_model(cfg, train)?;
    for (s, f) in train.iter().chain(val) {
        model.check_input(s, f)?;
    }
    let examples: Vec<Example> = train.iter().map(|(s, f)| Example::new(s, f)).collect();
    let mut opt = OptimizerState::new(&model.params, cfg.lr, cfg.momentum)?;
    let opts = EvalOptions {
        task: cfg.task,
        ks: vec![SELECTION_K],
        constrained: vec![true],
    };

    let mut best = (f64::NEG_INFINITY, 0usize, model.params.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let loss = run_epoch(&mut model, &mut opt, &examples, epoch)?;
        let val_recall = if val.is_empty() {
            None
        } else {
            let r = evaluate(&model, val, &opts)?.recall(SELECTION_K, true).unwrap_or(0.0);
            if r > best.0 {
                best = (r, epoch, model.params.clone());
            }
            Some(r)
        };
        match val_recall {
            Some(r) => info!("epoch {epoch}: loss {loss:.6} val R@{SELECTION_K} {r:.4}"),
            None => info!("epoch {epoch}: loss {loss:.6}"),
        }
        history.push(EpochLog { epoch, loss, val_recall });
    }
    let epoch = if val.is_empty() || cfg.epochs == 0 {
        cfg.epochs
    } else {
        model.params = best.2;
        best.1
    };
    model.round_to_f32();
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, epoch },
        history,
    })
}

//! The two-stage model: relation-regularised encoding and label refinement,
//! then label-embedded re-encoding and predicate scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Task};
use crate::encoder::{init_encoder, pair_bias, r2_encode, EncoderOutput};
use crate::error::{Error, Result};
use crate::freq::FreqTable;
use crate::refiner::{decode_labels, init_decoder, loss_affinity, loss_labels, DecodeMode, RefinedLabels};
use crate::relation::{embed_labels, init_relation, loss_relations, score_predicates, total_loss, PredicateScores};
use crate::scene::{apply_permutation, sample_pairs, sort_left_to_right, FeatureSet, SampleKind, Scene};
use crate::tape::{Tape, Var};
use crate::tensor::{ModelParams, Tensor};

/// A scene with its features, reordered left to right.
#[derive(Debug, Clone)]
pub struct Example {
    pub scene: Scene,
    pub features: FeatureSet,
    /// `order[k]` is the original index of ordered object `k`.
    pub order: Vec<usize>,
}

impl Example {
    pub fn new(scene: &Scene, features: &FeatureSet) -> Self {
        let order = sort_left_to_right(scene);
        let (scene, features) = apply_permutation(scene, features, &order);
        Example { scene, features, order }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Teacher-forced decoding; losses on pairs drawn with the given seed.
    Train { sample_seed: u64 },
    Infer,
}

/// Loss terms of one scene; absent terms are disabled for the run.
#[derive(Debug, Clone, Copy, Default)]
pub struct Losses {
    pub labels: Option<Var>,
    pub affinity1: Option<Var>,
    pub affinity2: Option<Var>,
    pub relations: Option<Var>,
}

impl Losses {
    pub fn terms(&self) -> [Option<Var>; 4] {
        [self.labels, self.affinity1, self.affinity2, self.relations]
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub stage1: EncoderOutput,
    /// Decoder logits `[N, D_l]` when the refiner runs under SGCLS.
    pub label_logits: Option<Var>,
    /// Labels handed to the output (refined, prior or ground truth).
    pub labels: RefinedLabels,
    pub stage2: EncoderOutput,
    pub scores: PredicateScores,
    pub losses: Losses,
    pub total: Var,
}

/// Output for one scene in its original object order.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub num_objects: usize,
    /// Predicate classes including background.
    pub classes: usize,
    pub labels: RefinedLabels,
    /// Softmax scores, `N x N x classes` row-major.
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn prob(&self, subj: usize, obj: usize, m: usize) -> f64 {
        self.probs[(subj * self.num_objects + obj) * self.classes + m]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub freq: FreqTable,
    pub params: ModelParams,
    link_bias: Tensor,
    pred_bias: Tensor,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl Model {
    /// Fresh parameters drawn from `config.seed`. The frequency table is
    /// rounded to single precision, as it would be after a checkpoint trip.
    pub fn new(config: &RunConfig, freq: FreqTable) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ModelParams::new();
        init_encoder(&mut params, "enc1", &config.stage1(), &mut rng);
        init_decoder(&mut params, &config.decoder(), &mut rng);
        init_encoder(&mut params, "enc2", &config.stage2(), &mut rng);
        init_relation(&mut params, &config.relation(), &mut rng);
        Self::from_parts(config.clone(), freq, params)
    }

    /// Assembles a model around existing parameters, checking that every
    /// expected tensor is present with the expected shape.
    pub fn from_parts(config: RunConfig, mut freq: FreqTable, params: ModelParams) -> Result<Self> {
        if freq.label_count != config.d_l || freq.predicate_count != config.d_r {
            return Err(Error::Dimension {
                op: "frequency table".into(),
                lhs: vec![config.d_l, config.d_r],
                rhs: vec![freq.label_count, freq.predicate_count],
            });
        }
        round_f32(&mut freq.pair_link_prob);
        round_f32(&mut freq.pair_pred_prob);
        let mut reference = ModelParams::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_encoder(&mut reference, "enc1", &config.stage1(), &mut rng);
        init_decoder(&mut reference, &config.decoder(), &mut rng);
        init_encoder(&mut reference, "enc2", &config.stage2(), &mut rng);
        init_relation(&mut reference, &config.relation(), &mut rng);
        for (name, t) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::dim(name, t.shape(), got.shape()));
            }
        }
        if params.len() != reference.len() {
            let extra = params.names().find(|n| !reference.contains(n)).unwrap_or_default();
            return Err(Error::Contract(format!("unexpected parameter `{extra}`")));
        }
        Ok(Model {
            link_bias: freq.link_bias_tensor(),
            pred_bias: freq.pred_bias_tensor(),
            config,
            freq,
            params,
        })
    }

    /// Rounds every parameter to single precision, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.params.iter_mut() {
            round_f32(t.data_mut());
        }
    }

    /// Checks a scene and its features against the model dimensions.
    pub fn check_input(&self, scene: &Scene, features: &FeatureSet) -> Result<()> {
        let c = &self.config;
        scene.validate(Some(c.d_l), Some(c.d_r))?;
        if features.feature_dim != c.d_f {
            return Err(Error::Dimension {
                op: format!("features of scene {}", scene.scene_id),
                lhs: vec![c.d_f],
                rhs: vec![features.feature_dim],
            });
        }
        if features.num_objects != scene.num_objects() || features.label_count != c.d_l {
            return Err(Error::Dimension {
                op: format!("features of scene {}", scene.scene_id),
                lhs: vec![scene.num_objects(), c.d_l],
                rhs: vec![features.num_objects, features.label_count],
            });
        }
        Ok(())
    }

    /// Records the full forward pass of one ordered scene with `N >= 1`.
    pub fn forward(&self, tape: &mut Tape, ex: &Example, task: Task, mode: Mode) -> Result<Forward> {
        let cfg = &self.config;
        let n = ex.scene.num_objects();
        if n == 0 {
            return Err(Error::Contract("forward needs at least one object".into()));
        }
        let dl = cfg.d_l;
        let truth = ex.scene.labels();
        let prior = match task {
            Task::Predcls => ex.features.with_onehot_priors(&truth),
            Task::Sgcls => ex.features.clone(),
        };
        let prior_labels = prior.prior_labels();

        let f = tape.constant(ex.features.object_tensor());
        let u = tape.constant(ex.features.union_tensor());
        let link = tape.constant(self.link_bias.clone());
        let pred = tape.constant(self.pred_bias.clone());

        let bias1 = pair_bias(tape, link, &prior_labels)?;
        let stage1 = r2_encode(tape, &self.params, "enc1", &cfg.stage1(), f, u, bias1)?;

        let refine = task == Task::Sgcls && cfg.use_refiner;
        let (label_logits, labels) = if refine {
            let decode_mode = match mode {
                Mode::Train { .. } => DecodeMode::TeacherForced(&truth),
                Mode::Infer => DecodeMode::Infer,
            };
            let out = decode_labels(
                tape,
                &self.params,
                &cfg.decoder(),
                stage1.output,
                &prior.prior_label_dist,
                decode_mode,
            )?;
            let refined = RefinedLabels::from_logits(tape.value(out.logits).to_vec(), dl);
            (Some(out.logits), refined)
        } else if task == Task::Predcls {
            (None, RefinedLabels::exact(&truth, dl))
        } else {
            (None, RefinedLabels::from_probabilities(&prior.prior_label_dist, dl))
        };

        // stage 2 sees ground-truth labels while training
        let stage2_labels = match mode {
            Mode::Train { .. } => truth.clone(),
            Mode::Infer => labels.labels.clone(),
        };
        let emb = embed_labels(tape, &self.params, &stage2_labels)?;
        let x2 = tape.concat(&[stage1.output, emb])?;
        let bias2 = pair_bias(tape, link, &stage2_labels)?;
        let stage2 = r2_encode(tape, &self.params, "enc2", &cfg.stage2(), x2, u, bias2)?;
        let pred_pairs = pair_bias(tape, pred, &stage2_labels)?;
        let scores = score_predicates(tape, &self.params, stage2.output, u, pred_pairs)?;

        let mut losses = Losses::default();
        if let Mode::Train { sample_seed } = mode {
            let adjacency = sample_pairs(&ex.scene, SampleKind::Adjacency, sample_seed);
            let relations = sample_pairs(&ex.scene, SampleKind::Relation, sample_seed.wrapping_add(1));
            if let Some(logits) = label_logits {
                losses.labels = Some(loss_labels(tape, logits, &truth)?);
            }
            if cfg.use_r2_loss {
                if cfg.use_refiner {
                    losses.affinity1 = Some(loss_affinity(tape, stage1.affinity, &adjacency)?);
                }
                losses.affinity2 = Some(loss_affinity(tape, stage2.affinity, &adjacency)?);
            }
            losses.relations = Some(loss_relations(tape, scores.raw, &relations)?);
        }
        let total = total_loss(tape, &losses.terms())?;
        Ok(Forward {
            stage1,
            label_logits,
            labels,
            stage2,
            scores,
            losses,
            total,
        })
    }

    /// Inference on one scene; output indices follow the input order.
    pub fn predict(&self, scene: &Scene, features: &FeatureSet, task: Task) -> Result<Prediction> {
        let n = scene.num_objects();
        let classes = self.config.d_r + 1;
        let dl = self.config.d_l;
        if n == 0 {
            return Ok(Prediction {
                num_objects: 0,
                classes,
                labels: RefinedLabels::from_logits(Vec::new(), dl),
                probs: Vec::new(),
            });
        }
        let ex = Example::new(scene, features);
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, &ex, task, Mode::Infer)?;
        if let Some(what) = tape.first_non_finite() {
            return Err(Error::Numerical(format!("scene {}: {what}", scene.scene_id)));
        }
        let ordered = tape.value(fwd.scores.probs);
        let mut probs = vec![0.0; n * n * classes];
        for a in 0..n {
            for b in 0..n {
                let src = (a * n + b) * classes;
                let dst = (ex.order[a] * n + ex.order[b]) * classes;
                probs[dst..dst + classes].copy_from_slice(&ordered[src..src + classes]);
            }
        }
        let mut logits = vec![0.0; n * dl];
        for a in 0..n {
            let o = ex.order[a];
            logits[o * dl..(o + 1) * dl].copy_from_slice(&fwd.labels.logits[a * dl..(a + 1) * dl]);
        }
        Ok(Prediction {
            num_objects: n,
            classes,
            labels: RefinedLabels::from_logits(logits, dl),
            probs,
        })
    }
}

//! Stage 1 label decoding and the label / affinity losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hlstm;
use crate::nn::init_weight;
use crate::scene::{argmax, PairSample, SampleKind};
use crate::tape::{Tape, Var};
use crate::tensor::{ModelParams, Tensor};

/// Embedding row used as the start-of-sequence input.
pub const BOS: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Width of the encoder output fed at every step.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub label_count: usize,
    /// Adds the detector prior to the output logits.
    pub use_prior: bool,
}

/// `dec.embed: [D_l + 1, D_emb]` (row 0 is BOS), one highway LSTM layer
/// `dec.lstm`, and the output map `dec.out.w: [hidden, D_l]`.
pub fn init_decoder<R: Rng>(params: &mut ModelParams, cfg: &DecoderConfig, rng: &mut R) {
    init_weight(params, "dec.embed", cfg.label_count + 1, cfg.embed_dim, rng);
    hlstm::init_layer(params, "dec.lstm", cfg.embed_dim + cfg.input_dim, cfg.hidden_dim, rng);
    init_weight(params, "dec.out.w", cfg.hidden_dim, cfg.label_count, rng);
}

#[derive(Debug, Clone, Copy)]
pub enum DecodeMode<'a> {
    /// Previous-step input is the ground-truth label.
    TeacherForced(&'a [usize]),
    /// Previous-step input is the previous argmax.
    Infer,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `[N, D_l]`
    pub logits: Var,
    /// Argmax label ids (1-based), ties to the smallest id.
    pub labels: Vec<usize>,
}

/// Decoded labels with their logits and softmax confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedLabels {
    /// `N x D_l`
    pub logits: Vec<f64>,
    pub label_count: usize,
    pub labels: Vec<usize>,
}

impl RefinedLabels {
    pub fn from_logits(logits: Vec<f64>, label_count: usize) -> Self {
        let labels = logits.chunks(label_count).map(|r| argmax(r) + 1).collect();
        RefinedLabels {
            logits,
            label_count,
            labels,
        }
    }

    /// Labels from a probability table (one row per object), taking the log
    /// so that the softmax confidence reproduces the probabilities.
    pub fn from_probabilities(probs: &[f64], label_count: usize) -> Self {
        Self::from_logits(probs.iter().map(|p| p.max(1e-300).ln()).collect(), label_count)
    }

    /// Given ground-truth labels: logits are log one-hot, confidence 1.
    pub fn exact(labels: &[usize], label_count: usize) -> Self {
        let mut probs = vec![0.0; labels.len() * label_count];
        for (i, &l) in labels.iter().enumerate() {
            probs[i * label_count + l - 1] = 1.0;
        }
        Self::from_probabilities(&probs, label_count)
    }

    /// Softmax probability of each object's chosen label.
    pub fn confidences(&self) -> Vec<f64> {
        self.logits
            .chunks(self.label_count)
            .zip(&self.labels)
            .map(|(row, &l)| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
                (row[l - 1] - max).exp() / total
            })
            .collect()
    }
}

/// Sequential decoding over ordered objects. Step `i` reads
/// `[embed(label_{i-1}), o'_i]` (BOS at step 0) and emits
/// `W q_i + prior_i`.
pub fn decode_labels(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &DecoderConfig,
    features: Var,
    prior: &[f64],
    mode: DecodeMode<'_>,
) -> Result<DecodeOutput> {
    let n = tape.shape(features)[0];
    let dl = cfg.label_count;
    if prior.len() != n * dl {
        return Err(Error::dim("decode_labels", &[n, dl], &[prior.len()]));
    }
    if let DecodeMode::TeacherForced(gt) = mode {
        if gt.len() != n {
            return Err(Error::dim("decode_labels", &[n], &[gt.len()]));
        }
    }
    let embed = tape.param(params, "dec.embed")?;
    let w_out = tape.param(params, "dec.out.w")?;
    let zero = tape.constant(Tensor::zeros(&[1, cfg.hidden_dim]));
    let (mut q, mut c) = (zero, zero);
    let mut prev = BOS;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let e = tape.row(embed, prev)?;
        let o = tape.row(features, i)?;
        let x = tape.concat(&[e, o])?;
        let (nq, nc) = hlstm::cell(tape, params, "dec.lstm", x, q, c)?;
        q = nq;
        c = nc;
        let mut logit = tape.matmul(q, w_out)?;
        if cfg.use_prior {
            let p = tape.constant(Tensor::new(vec![1, dl], prior[i * dl..(i + 1) * dl].to_vec())?);
            logit = tape.add(logit, p)?;
        }
        let label = argmax(tape.value(logit)) + 1;
        labels.push(label);
        rows.push(logit);
        prev = match mode {
            DecodeMode::TeacherForced(gt) => gt[i],
            DecodeMode::Infer => label,
        };
    }
    let logits = tape.stack_rows(&rows)?;
    Ok(DecodeOutput { logits, labels })
}

/// Mean cross-entropy of the label logits against ground-truth ids (1-based).
pub fn loss_labels(tape: &mut Tape, logits: Var, truth: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(
        logits,
        (0..truth.len()).collect(),
        truth.iter().map(|l| l - 1).collect(),
    )
}

/// Mean binary cross-entropy of an `[N, N]` affinity over sampled pairs.
pub fn loss_affinity(tape: &mut Tape, affinity: Var, sample: &PairSample) -> Result<Var> {
    if sample.kind != SampleKind::Adjacency {
        return Err(Error::Contract("affinity loss needs an adjacency sample".into()));
    }
    let n = tape.shape(affinity)[0];
    let idx = sample.pairs.iter().map(|&(i, j, _)| i * n + j).collect();
    let targets = sample.pairs.iter().map(|&(_, _, t)| t as f64).collect();
    tape.binary_cross_entropy(affinity, idx, targets)
}

//! Stage 2: label-embedded relation encoding and predicate scoring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_linear, init_weight, linear};
use crate::scene::{PairSample, SampleKind};
use crate::tape::{Tape, Var};
use crate::tensor::{ModelParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationConfig {
    pub label_count: usize,
    pub predicate_count: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Width of the stage 2 encoder output `Z`.
    pub context_dim: usize,
}

impl RelationConfig {
    pub fn classes(&self) -> usize {
        self.predicate_count + 1
    }
}

/// `rel.embed: [D_l, D_emb]`, `rel.proj_s` / `rel.proj_o: D_z -> D_f`, and the
/// DistMult weights `rel.w_r: [D_r + 1, D_f]`. `w_r` starts at one so that an
/// untrained model ranks pairs by the frequency bias alone.
pub fn init_relation<R: Rng>(params: &mut ModelParams, cfg: &RelationConfig, rng: &mut R) {
    init_weight(params, "rel.embed", cfg.label_count, cfg.embed_dim, rng);
    init_linear(params, "rel.proj_s", cfg.context_dim, cfg.feature_dim, rng);
    init_linear(params, "rel.proj_o", cfg.context_dim, cfg.feature_dim, rng);
    params.insert(
        "rel.w_r",
        Tensor::filled(&[cfg.classes(), cfg.feature_dim], 1.0).with_requires_grad(true),
    );
}

/// Rows of `rel.embed` for 1-based labels: `[N, D_emb]`.
pub fn embed_labels(tape: &mut Tape, params: &ModelParams, labels: &[usize]) -> Result<Var> {
    let table = tape.param(params, "rel.embed")?;
    let (dl, d) = match tape.shape(table) {
        [a, b] => (*a, *b),
        s => return Err(Error::dim("embed_labels", s, &[0, 0])),
    };
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > dl) {
        return Err(Error::Contract(format!("label {bad} outside 1..={dl}")));
    }
    let idx = labels
        .iter()
        .flat_map(|&l| (l - 1) * d..l * d)
        .collect();
    tape.gather(table, idx, &[labels.len(), d])
}

#[derive(Debug, Clone, Copy)]
pub struct PredicateScores {
    /// Pre-softmax scores `[N, N, D_r + 1]`.
    pub raw: Var,
    /// Softmax over the last axis.
    pub probs: Var,
}

/// `raw[i, j, m] = sum_d w_r[m, d] (s_i u_ij)[d] (o_j u_ij)[d] + bias[i, j, m]`
/// with `s = Z W_s + b_s`, `o = Z W_o + b_o`.
pub fn score_predicates(
    tape: &mut Tape,
    params: &ModelParams,
    z: Var,
    u: Var,
    bias: Var,
) -> Result<PredicateScores> {
    let s = linear(tape, params, "rel.proj_s", z)?;
    let o = linear(tape, params, "rel.proj_o", z)?;
    let w = tape.param(params, "rel.w_r")?;
    let score = tape.distmult(s, o, u, w)?;
    let raw = tape.add(score, bias)?;
    let probs = tape.softmax(raw);
    Ok(PredicateScores { raw, probs })
}

/// Mean cross-entropy of the predicate scores over a relation sample.
pub fn loss_relations(tape: &mut Tape, raw: Var, sample: &PairSample) -> Result<Var> {
    if sample.kind != SampleKind::Relation {
        return Err(Error::Contract("relation loss needs a relation sample".into()));
    }
    let n = tape.shape(raw)[0];
    let rows = sample.pairs.iter().map(|&(i, j, _)| i * n + j).collect();
    let targets = sample.pairs.iter().map(|&(_, _, m)| m).collect();
    let classes = tape.shape(raw)[2];
    let flat = tape.reshape(raw, &[n * n, classes])?;
    tape.softmax_cross_entropy(flat, rows, targets)
}

/// Sum of whichever loss terms are present.
pub fn total_loss(tape: &mut Tape, terms: &[Option<Var>]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            None => *t,
            Some(a) => tape.add(a, *t)?,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(tape.constant(Tensor::scalar(0.0))),
    }
}

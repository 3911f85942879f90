//! Relation-regularised encoder.
//!
//! Global context `H` from the highway LSTM stack is projected into subject
//! and object spaces; a union-gated DistMult score plus a label-pair bias
//! gives the relation-existence affinity `A`. The affinity is symmetrised by
//! taking the larger direction (unit diagonal), row-normalised, and used for
//! one (or more) graph convolutions `O = ReLU(D A H W_G)`. The encoder output
//! is `[O, H]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hlstm;
use crate::nn::{init_linear, init_weight, linear};
use crate::tape::{Tape, Var};
use crate::tensor::{ModelParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub gcn_dim: usize,
    pub feature_dim: usize,
    pub lstm_layers: usize,
    pub gcn_depth: usize,
    pub use_bilstm: bool,
    pub use_gcn: bool,
}

impl EncoderConfig {
    /// Width of the encoder output per object.
    pub fn output_dim(&self) -> usize {
        if self.use_gcn {
            self.gcn_dim + self.hidden_dim
        } else {
            self.hidden_dim
        }
    }
}

pub fn init_encoder<R: Rng>(params: &mut ModelParams, prefix: &str, cfg: &EncoderConfig, rng: &mut R) {
    hlstm::init_stack(
        params,
        &format!("{prefix}.lstm"),
        cfg.input_dim,
        cfg.hidden_dim,
        cfg.lstm_layers,
        rng,
    );
    init_linear(params, &format!("{prefix}.bypass"), cfg.input_dim, cfg.hidden_dim, rng);
    init_linear(params, &format!("{prefix}.proj_s"), cfg.hidden_dim, cfg.feature_dim, rng);
    init_linear(params, &format!("{prefix}.proj_o"), cfg.hidden_dim, cfg.feature_dim, rng);
    params.insert(
        format!("{prefix}.w_a"),
        Tensor::filled(&[1, cfg.feature_dim], 1.0).with_requires_grad(true),
    );
    for l in 1..=cfg.gcn_depth {
        let input = if l == 1 { cfg.hidden_dim } else { cfg.gcn_dim };
        init_weight(params, &format!("{prefix}.gcn.{l}.w"), input, cfg.gcn_dim, rng);
    }
}

/// Gathers `table[labels[i] - 1, labels[j] - 1, ..]` for every ordered pair,
/// giving `[N, N, C]` where `table` is `[D_l, D_l, C]` (or `[D_l, D_l]`, `C = 1`).
pub fn pair_bias(tape: &mut Tape, table: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(table).to_vec();
    let (dl, classes) = match shape.as_slice() {
        [a, b] if a == b => (*a, 1),
        [a, b, c] if a == b => (*a, *c),
        s => return Err(Error::dim("pair_bias", s, &[0, 0])),
    };
    let n = labels.len();
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > dl) {
        return Err(Error::Contract(format!("label {bad} outside 1..={dl}")));
    }
    let mut idx = Vec::with_capacity(n * n * classes);
    for &li in labels {
        for &lj in labels {
            let cell = ((li - 1) * dl + (lj - 1)) * classes;
            idx.extend(cell..cell + classes);
        }
    }
    tape.gather(table, idx, &[n, n, classes])
}

/// `A[i, j] = sigmoid(sum_d w_a[d] (s_i u_ij)[d] (o_j u_ij)[d] + bias[i, j])`.
///
/// `h: [N, D_h]`, `u: [N, N, D_f]`, `bias: [N, N, 1]`; returns `[N, N]`.
pub fn affinity(tape: &mut Tape, params: &ModelParams, prefix: &str, h: Var, u: Var, bias: Var) -> Result<Var> {
    let s = linear(tape, params, &format!("{prefix}.proj_s"), h)?;
    let o = linear(tape, params, &format!("{prefix}.proj_o"), h)?;
    let w = tape.param(params, &format!("{prefix}.w_a"))?;
    let score = tape.distmult(s, o, u, w)?;
    let logits = tape.add(score, bias)?;
    let n = tape.shape(h)[0];
    let a = tape.sigmoid(logits);
    tape.reshape(a, &[n, n])
}

/// `max(A, A^T)` off the diagonal, 1 on it.
pub fn symmetrize(tape: &mut Tape, a: Var) -> Result<Var> {
    tape.symmetrize_max(a)
}

/// `ReLU(D A H W)` with `D = diag(1 / rowsum(A))`.
pub fn gcn_layer(tape: &mut Tape, a_sym: Var, h: Var, w: Var) -> Result<Var> {
    let p = tape.row_normalize(a_sym)?;
    let ph = tape.matmul(p, h)?;
    let phw = tape.matmul(ph, w)?;
    Ok(tape.relu(phw))
}

pub fn gcn(tape: &mut Tape, params: &ModelParams, prefix: &str, depth: usize, a_sym: Var, h: Var) -> Result<Var> {
    let mut x = h;
    for l in 1..=depth {
        let w = tape.param(params, &format!("{prefix}.gcn.{l}.w"))?;
        x = gcn_layer(tape, a_sym, x, w)?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Global context `H: [N, D_h]`.
    pub context: Var,
    /// Raw affinity `[N, N]`, before symmetrisation.
    pub affinity: Var,
    /// Symmetrised affinity, present when the GCN runs.
    pub symmetric: Option<Var>,
    /// `[O, H]`, or `H` alone with the GCN ablated.
    pub output: Var,
}

/// Full encoder pass over ordered inputs `x: [N, D_in]`.
pub fn r2_encode(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    u: Var,
    bias: Var,
) -> Result<EncoderOutput> {
    let context = if cfg.use_bilstm {
        hlstm::run_stack(tape, params, &format!("{prefix}.lstm"), cfg.lstm_layers, x)?
    } else {
        linear(tape, params, &format!("{prefix}.bypass"), x)?
    };
    let a = affinity(tape, params, prefix, context, u, bias)?;
    if !cfg.use_gcn {
        return Ok(EncoderOutput {
            context,
            affinity: a,
            symmetric: None,
            output: context,
        });
    }
    let a_sym = symmetrize(tape, a)?;
    let o = gcn(tape, params, prefix, cfg.gcn_depth, a_sym, context)?;
    let output = tape.concat(&[o, context])?;
    Ok(EncoderOutput {
        context,
        affinity: a,
        symmetric: Some(a_sym),
        output,
    })
}

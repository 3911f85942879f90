//! Stacked LSTM layers with highway gates and alternating direction.
//!
//! Layer `k` (1-based) reads its previous state from position `t + delta_k`,
//! with `delta_k = +1` for even `k` and `-1` for odd `k`. Layer 1 consumes the
//! ordered inputs; layer `k > 1` consumes the outputs of layer `k - 1`. States
//! beyond either end of the sequence are zero.
//!
//! Cell, with `z = [h_prev, x]`:
//!
//! ```text
//! i, o, f, r = sigmoid(z W_* + b_*)      g = tanh(z W_g + b_g)
//! c = f * c_prev + i * g                 h' = o * tanh(c)
//! h = r * h' + (1 - r) * (x W_h)
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_weight, init_zeros};
use crate::tape::{Tape, Var};
use crate::tensor::{ModelParams, Tensor};

const GATES: [&str; 5] = ["i", "o", "f", "r", "g"];

/// Direction of layer `k` (1-based).
pub fn delta(k: usize) -> i32 {
    if k % 2 == 0 {
        1
    } else {
        -1
    }
}

fn layer_prefix(prefix: &str, k: usize) -> String {
    format!("{prefix}.{k}")
}

/// Registers one highway LSTM layer under `prefix`.
pub fn init_layer<R: Rng>(params: &mut ModelParams, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    for g in GATES {
        init_weight(params, &format!("{prefix}.w_{g}"), hidden + input, hidden, rng);
        init_zeros(params, &format!("{prefix}.b_{g}"), &[hidden]);
    }
    init_weight(params, &format!("{prefix}.w_h"), input, hidden, rng);
}

/// Registers `layers` stacked layers; layer 1 reads `input` features.
pub fn init_stack<R: Rng>(
    params: &mut ModelParams,
    prefix: &str,
    input: usize,
    hidden: usize,
    layers: usize,
    rng: &mut R,
) {
    for k in 1..=layers {
        let width = if k == 1 { input } else { hidden };
        init_layer(params, &layer_prefix(prefix, k), width, hidden, rng);
    }
}

/// Hidden width of the layer registered under `prefix`.
pub fn hidden_size(params: &ModelParams, prefix: &str) -> Result<usize> {
    Ok(params.get(&format!("{prefix}.b_i"))?.numel())
}

/// One cell step. `x: [1, in]`, `h_prev, c_prev: [1, hidden]`.
pub fn cell(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let z = tape.concat(&[h_prev, x])?;
    let gate = |tape: &mut Tape, g: &str| -> Result<Var> {
        let w = tape.param(params, &format!("{prefix}.w_{g}"))?;
        let b = tape.param(params, &format!("{prefix}.b_{g}"))?;
        let zw = tape.matmul(z, w)?;
        tape.add_row(zw, b)
    };
    let pre_i = gate(tape, "i")?;
    let pre_o = gate(tape, "o")?;
    let pre_f = gate(tape, "f")?;
    let pre_r = gate(tape, "r")?;
    let pre_g = gate(tape, "g")?;
    let i = tape.sigmoid(pre_i);
    let o = tape.sigmoid(pre_o);
    let f = tape.sigmoid(pre_f);
    let r = tape.sigmoid(pre_r);
    let g = tape.tanh(pre_g);

    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h_lstm = tape.mul(o, tc)?;

    let w_h = tape.param(params, &format!("{prefix}.w_h"))?;
    let carry = tape.matmul(x, w_h)?;
    let gated = tape.mul(r, h_lstm)?;
    let one_minus_r = tape.one_minus(r);
    let gated_carry = tape.mul(one_minus_r, carry)?;
    let h = tape.add(gated, gated_carry)?;
    Ok((h, c))
}

/// Runs one layer over `inputs` (one `[1, in]` row per position) in the
/// direction given by `delta`.
pub fn run_layer(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    inputs: &[Var],
    delta: i32,
) -> Result<Vec<Var>> {
    let n = inputs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let hidden = hidden_size(params, prefix)?;
    let zero = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut out = vec![zero; n];
    let (mut h, mut c) = (zero, zero);
    let order: Box<dyn Iterator<Item = usize>> = if delta < 0 {
        Box::new(0..n)
    } else {
        Box::new((0..n).rev())
    };
    for t in order {
        let (nh, nc) = cell(tape, params, prefix, inputs[t], h, c)?;
        out[t] = nh;
        h = nh;
        c = nc;
    }
    Ok(out)
}

/// Runs the stack with explicit per-layer directions.
pub fn run_stack_with_deltas(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    inputs: &[Var],
    deltas: &[i32],
) -> Result<Vec<Var>> {
    let mut xs = inputs.to_vec();
    for (idx, &d) in deltas.iter().enumerate() {
        xs = run_layer(tape, params, &layer_prefix(prefix, idx + 1), &xs, d)?;
    }
    Ok(xs)
}

/// Runs `layers` layers with the alternating directions of [`delta`].
pub fn run_stack_rows(
    tape: &mut Tape,
    params: &ModelParams,
    prefix: &str,
    layers: usize,
    inputs: &[Var],
) -> Result<Vec<Var>> {
    let deltas: Vec<i32> = (1..=layers).map(delta).collect();
    run_stack_with_deltas(tape, params, prefix, inputs, &deltas)
}

/// Matrix form of [`run_stack_rows`]: `inputs: [N, D_in] -> H: [N, hidden]`.
pub fn run_stack(tape: &mut Tape, params: &ModelParams, prefix: &str, layers: usize, inputs: Var) -> Result<Var> {
    let n = match tape.shape(inputs) {
        [n, _] => *n,
        s => return Err(Error::dim("run_stack", s, &[0, 0])),
    };
    let rows = (0..n).map(|t| tape.row(inputs, t)).collect::<Result<Vec<_>>>()?;
    let out = run_stack_rows(tape, params, prefix, layers, &rows)?;
    tape.stack_rows(&out)
}

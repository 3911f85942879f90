//! Parameter initialisation and the affine layer shared by the model stages.

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{ModelParams, Tensor};

/// Glorot-uniform weight of shape `[fan_in, fan_out]`.
pub fn init_weight<R: Rng>(params: &mut ModelParams, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    params.insert(
        name,
        Tensor::glorot(&[fan_in, fan_out], fan_in, fan_out, rng).with_requires_grad(true),
    );
}

pub fn init_zeros(params: &mut ModelParams, name: &str, shape: &[usize]) {
    params.insert(name, Tensor::zeros(shape).with_requires_grad(true));
}

/// `<prefix>.w: [in, out]` and `<prefix>.b: [out]`.
pub fn init_linear<R: Rng>(params: &mut ModelParams, prefix: &str, input: usize, output: usize, rng: &mut R) {
    init_weight(params, &format!("{prefix}.w"), input, output, rng);
    init_zeros(params, &format!("{prefix}.b"), &[output]);
}

/// `x W + b` for `x: [rows, in]`.
pub fn linear(tape: &mut Tape, params: &ModelParams, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

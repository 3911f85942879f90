//! Recorded-operation reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] replays the
//! nodes in reverse and yields the gradient of a scalar with respect to every
//! node that depends on a trainable leaf.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ModelParams, Tensor};

/// Clamp applied to probabilities inside binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SymmetrizeMax(Var),
    RowNormalize(Var),
    DistMult { s: Var, o: Var, u: Var, w: Var },
    Gather { src: Var, idx: Vec<usize> },
    SoftmaxCe { logits: Var, rows: Vec<usize>, targets: Vec<usize> },
    Bce { probs: Var, idx: Vec<usize>, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SymmetrizeMax(_) => "symmetrize",
            Op::RowNormalize(_) => "row_normalize",
            Op::DistMult { .. } => "distmult",
            Op::Gather { .. } => "gather",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not depend on
    /// any trainable leaf or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, false)
    }

    /// Records a leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, rg)
    }

    /// Records (once per tape) the named parameter as a leaf.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?;
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                param: Some(name.to_string()),
            },
            t.requires_grad(),
        );
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are consistent")
    }

    /// First node holding a NaN or infinity, described by index and operation.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.iter().all(|v| v.is_finite()) {
                return None;
            }
            Some(match &n.op {
                Op::Leaf { param: Some(p) } => format!("parameter {p}"),
                op => format!("node {i} ({}, shape {:?})", op.name(), n.shape),
            })
        })
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `b` to every row (last-dimension slice) of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let w = last_dim(self.shape(a));
        if self.node(b).value.len() != w {
            return Err(Error::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % w])
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::AddRow(a, b), ng))
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let out = self.value(a).iter().map(|&x| scale * x + offset).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::Affine(a, scale), ng)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead_shape = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let rows: usize = lead_shape.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead_shape.len() + 1 || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let ng = self.ng(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.node(a).value.len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let w = last_dim(self.shape(a));
        let av = self.value(a);
        let mut out = vec![0.0; av.len()];
        for (row, o) in av.chunks(w).zip(out.chunks_mut(w)) {
            softmax_into(row, o);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, out, Op::Softmax(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), ng)
    }

    /// Elementwise maximum with the transpose, unit diagonal.
    pub fn symmetrize_max(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(a, "symmetrize")?;
        if n != m {
            return Err(Error::dim("symmetrize", self.shape(a), &[n, n]));
        }
        let av = self.value(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = if i == j {
                    1.0
                } else {
                    av[i * n + j].max(av[j * n + i])
                };
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![n, n], out, Op::SymmetrizeMax(a), ng))
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(a, "row_normalize")?;
        let av = self.value(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let s: f64 = av[i * m..(i + 1) * m].iter().sum();
            if s == 0.0 {
                return Err(Error::Contract(format!("row {i} sums to zero")));
            }
            for j in 0..m {
                out[i * m + j] = av[i * m + j] / s;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![n, m], out, Op::RowNormalize(a), ng))
    }

    /// Diagonal bilinear pair scores gated by pair features.
    ///
    /// With `s, o: [N, D]`, `u: [N, N, D]` and `w: [M, D]` the result has shape
    /// `[N, N, M]` and entry `(i, j, m) = sum_d w[m,d] (s[i,d] u[i,j,d]) (o[j,d] u[i,j,d])`.
    pub fn distmult(&mut self, s: Var, o: Var, u: Var, w: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(s, "distmult")?;
        if self.shape(o) != [n, d] {
            return Err(Error::dim("distmult", self.shape(s), self.shape(o)));
        }
        if self.shape(u) != [n, n, d] {
            return Err(Error::dim("distmult", &[n, n, d], self.shape(u)));
        }
        let (m, dw) = self.matrix_dims(w, "distmult")?;
        if dw != d {
            return Err(Error::dim("distmult", self.shape(s), self.shape(w)));
        }
        let (sv, ov, uv, wv) = (self.value(s), self.value(o), self.value(u), self.value(w));
        let mut out = vec![0.0; n * n * m];
        let mut prod = vec![0.0; d];
        for i in 0..n {
            for j in 0..n {
                let uij = &uv[(i * n + j) * d..(i * n + j + 1) * d];
                for k in 0..d {
                    prod[k] = sv[i * d + k] * ov[j * d + k] * uij[k] * uij[k];
                }
                for r in 0..m {
                    let wr = &wv[r * d..(r + 1) * d];
                    out[(i * n + j) * m + r] = wr.iter().zip(&prod).map(|(a, b)| a * b).sum();
                }
            }
        }
        let ng = self.ng(&[s, o, u, w]);
        Ok(self.push(vec![n, n, m], out, Op::DistMult { s, o, u, w }, ng))
    }

    /// Picks flat entries `idx` of `src` into a tensor of the given shape.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::dim("gather", shape, &[idx.len()]));
        }
        let sv = self.value(src);
        if let Some(&bad) = idx.iter().find(|&&i| i >= sv.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                sv.len()
            )));
        }
        let out = idx.iter().map(|&i| sv[i]).collect();
        let ng = self.ng(&[src]);
        Ok(self.push(shape.to_vec(), out, Op::Gather { src, idx }, ng))
    }

    /// Row `i` of a matrix as a `[1, n]` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "row")?;
        if i >= m {
            return Err(Error::Contract(format!("row {i} out of range for {m} rows")));
        }
        self.gather(a, (i * n..(i + 1) * n).collect(), &[1, n])
    }

    /// Stacks `[1, n]` rows into an `[m, n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let cat = self.concat(rows)?;
        let n = last_dim(self.shape(rows[0]));
        self.reshape(cat, &[rows.len(), n])
    }

    /// Mean over `rows` of `-log softmax(logits[row])[target]`, where the last
    /// dimension of `logits` holds the classes. Zero when `rows` is empty.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
    ) -> Result<Var> {
        if rows.len() != targets.len() {
            return Err(Error::dim("softmax_cross_entropy", &[rows.len()], &[targets.len()]));
        }
        let c = last_dim(self.shape(logits));
        let lv = self.value(logits);
        let nrows = lv.len() / c;
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(&targets) {
            if r >= nrows || t >= c {
                return Err(Error::Contract(format!(
                    "cross-entropy row {r} / target {t} out of range ({nrows} rows, {c} classes)"
                )));
            }
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = if rows.is_empty() {
            0.0
        } else {
            total / rows.len() as f64
        };
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe {
                logits,
                rows,
                targets,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy of `probs[idx]` against `targets`, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`. Zero when empty.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        idx: Vec<usize>,
        targets: Vec<f64>,
    ) -> Result<Var> {
        if idx.len() != targets.len() {
            return Err(Error::dim("binary_cross_entropy", &[idx.len()], &[targets.len()]));
        }
        let pv = self.value(probs);
        let mut total = 0.0;
        for (&i, &t) in idx.iter().zip(&targets) {
            let p = pv
                .get(i)
                .copied()
                .ok_or_else(|| Error::Contract(format!("bce index {i} out of range")))?
                .clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let loss = if idx.is_empty() {
            0.0
        } else {
            total / idx.len() as f64
        };
        let ng = self.ng(&[probs]);
        Ok(self.push(Vec::new(), vec![loss], Op::Bce { probs, idx, targets }, ng))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if ln.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ModelParams) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, params)?;
        Ok(grads)
    }

    /// Adds gradients of every recorded trainable parameter into `params`;
    /// parameters unreachable from the loss receive zeros.
    pub fn accumulate_param_grads(&self, grads: &Gradients, params: &mut ModelParams) -> Result<()> {
        for (name, &v) in &self.params {
            let t = params.get_mut(name)?;
            if !t.requires_grad() {
                continue;
            }
            match grads.wrt(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot!(*v) {
                        gv.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if let Some(gb) = slot!(*b) {
                    let w = gb.len();
                    for (i, x) in g.iter().enumerate() {
                        gb[i % w] += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Affine(a, scale) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += scale * x);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *o += x * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        if *y > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = last_dim(&node.shape);
                let rows = node.value.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = last_dim(&nodes[p.0].shape);
                    if let Some(gp) = slot!(*p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, x)| *o += x);
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                if let Some(ga) = slot!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let w = last_dim(&node.shape);
                if let Some(ga) = slot!(*a) {
                    for ((grow, yrow), orow) in
                        g.chunks(w).zip(node.value.chunks(w)).zip(ga.chunks_mut(w))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((o, x), y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (x - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot!(*a) {
                    let scale = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|o| *o += scale);
                }
            }
            Op::SymmetrizeMax(a) => {
                let n = node.shape[0];
                let av = &nodes[a.0].value;
                if let Some(ga) = slot!(*a) {
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let src = if av[i * n + j] >= av[j * n + i] {
                                i * n + j
                            } else {
                                j * n + i
                            };
                            ga[src] += g[i * n + j];
                        }
                    }
                }
            }
            Op::RowNormalize(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let av = &nodes[a.0].value;
                if let Some(ga) = slot!(*a) {
                    for i in 0..n {
                        let s: f64 = av[i * m..(i + 1) * m].iter().sum();
                        let y = &node.value[i * m..(i + 1) * m];
                        let grow = &g[i * m..(i + 1) * m];
                        let dot: f64 = grow.iter().zip(y).map(|(x, y)| x * y).sum();
                        for k in 0..m {
                            ga[i * m + k] += (grow[k] - dot) / s;
                        }
                    }
                }
            }
            Op::DistMult { s, o, u, w } => {
                let (n, d) = (nodes[s.0].shape[0], nodes[s.0].shape[1]);
                let m = nodes[w.0].shape[0];
                let (sv, ov, uv, wv) = (
                    &nodes[s.0].value,
                    &nodes[o.0].value,
                    &nodes[u.0].value,
                    &nodes[w.0].value,
                );
                let mut gs = vec![0.0; n * d];
                let mut go = vec![0.0; n * d];
                let mut gu = vec![0.0; n * n * d];
                let mut gw = vec![0.0; m * d];
                let mut wsum = vec![0.0; d];
                for i in 0..n {
                    for j in 0..n {
                        let base = (i * n + j) * d;
                        let gij = &g[(i * n + j) * m..(i * n + j + 1) * m];
                        wsum.iter_mut().for_each(|x| *x = 0.0);
                        for (r, &gr) in gij.iter().enumerate() {
                            if gr == 0.0 {
                                continue;
                            }
                            let wr = &wv[r * d..(r + 1) * d];
                            for k in 0..d {
                                wsum[k] += gr * wr[k];
                            }
                        }
                        for k in 0..d {
                            let uk = uv[base + k];
                            let q = uk * uk;
                            let (sk, ok) = (sv[i * d + k], ov[j * d + k]);
                            gs[i * d + k] += wsum[k] * q * ok;
                            go[j * d + k] += wsum[k] * q * sk;
                            gu[base + k] += wsum[k] * sk * ok * 2.0 * uk;
                            let p = sk * ok * q;
                            for (r, &gr) in gij.iter().enumerate() {
                                gw[r * d + k] += gr * p;
                            }
                        }
                    }
                }
                for (v, buf) in [(s, gs), (o, go), (u, gu), (w, gw)] {
                    if let Some(gv) = slot!(*v) {
                        gv.iter_mut().zip(&buf).for_each(|(acc, x)| *acc += x);
                    }
                }
            }
            Op::Gather { src, idx } => {
                if let Some(gs) = slot!(*src) {
                    for (&i, x) in idx.iter().zip(g) {
                        gs[i] += x;
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                rows,
                targets,
            } => {
                if rows.is_empty() {
                    return;
                }
                let c = last_dim(&nodes[logits.0].shape);
                let lv = &nodes[logits.0].value;
                let scale = g[0] / rows.len() as f64;
                if let Some(gl) = slot!(*logits) {
                    let mut p = vec![0.0; c];
                    for (&r, &t) in rows.iter().zip(targets) {
                        softmax_into(&lv[r * c..(r + 1) * c], &mut p);
                        for k in 0..c {
                            let onehot = if k == t { 1.0 } else { 0.0 };
                            gl[r * c + k] += scale * (p[k] - onehot);
                        }
                    }
                }
            }
            Op::Bce { probs, idx, targets } => {
                if idx.is_empty() {
                    return;
                }
                let pv = &nodes[probs.0].value;
                let scale = g[0] / idx.len() as f64;
                if let Some(gp) = slot!(*probs) {
                    for (&i, &t) in idx.iter().zip(targets) {
                        let p = pv[i];
                        if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        gp[i] += scale * (-t / p + (1.0 - t) / (1.0 - p));
                    }
                }
            }
        }
    }
}

//! Tape of recorded operations and the reverse sweep over it.

use super::kernels::{dot, matmul, matmul_nt, matmul_tn};
use super::tensor::{numel, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Index of a recorded value in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Expectile {
        pred: Var,
        target: Vec<f64>,
        weights: Option<Vec<f64>>,
        m: f64,
    },
    SquaredError {
        pred: Var,
        target: Vec<f64>,
        weights: Option<Vec<f64>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalAttention { .. } => "causal_attention",
            Op::Expectile { .. } => "expectile_loss",
            Op::SquaredError { .. } => "squared_error",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = *shape.last().unwrap();
            (numel(shape) / cols.max(1), cols)
        }
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

/// Records a forward computation so it can be differentiated once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
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
        debug_assert_eq!(numel(&shape), value.len(), "{}", op.name());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "constant of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Leaf input that tracks gradients (for input-gradient checks).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul(self.value(a), self.value(b), n, k, m);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![n, m], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    /// `x[n,m] + b[m]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(b).len() != cols {
            return Err(Error::shape(format!(
                "add_row: {:?} + {:?}",
                self.shape(x),
                self.shape(b)
            )));
        }
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(a, c)| a + c))
            .collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(vec![], vec![s], Op::Mean(x), ng)
    }

    /// Sum over the last dimension: `[n,m] -> [n,1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let out = self.value(x).chunks(cols).map(|r| r.iter().sum()).collect();
        let ng = self.ng(x);
        self.push(vec![rows, 1], out, Op::RowSum(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (rows, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape(format!("concat_cols: {s:?} with {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::shape(format!("slice_cols {start}..{end} of {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![rows, end - start], out, Op::SliceCols(x, start, end), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    /// Rows of `table[V,D]` selected by `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape(format!("gather_rows from {s:?}")));
        }
        let (vocab, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= vocab {
                return Err(Error::shape(format!("gather_rows index {i} >= {vocab}")));
            }
            out.extend_from_slice(&self.value(table)[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![indices.len(), d], out, Op::GatherRows(table, indices.to_vec()), ng))
    }

    /// Normalizes each row, then applies per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape(format!(
                "layer_norm over {cols} columns with gain {:?}",
                self.shape(gain)
            )));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for row in xv.chunks(cols) {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k` and `v` are `[batch*seq, d]` with rows ordered by
    /// `(sequence, position)`; position `t` attends to positions `<= t` of
    /// its own sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape("attention q/k/v shapes differ"));
        }
        let d = s[1];
        if s[0] != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "attention: {s:?} for batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        scores[j] = dot(qi, kj) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for sj in scores.iter_mut().take(i + 1) {
                        *sj = (*sj - max).exp();
                        z += *sj;
                    }
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vv[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            s,
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Weighted mean of `|m - 1(Δ < 0)| Δ²` with `Δ = target - pred`.
    pub fn expectile_loss(&mut self, pred: Var, target: &[f64], weights: Option<&[f64]>, m: f64) -> Result<Var> {
        let pv = self.value(pred);
        check_loss_inputs(pv.len(), target, weights, "expectile_loss")?;
        let mut num = 0.0;
        for (i, (&p, &t)) in pv.iter().zip(target).enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            num += w * super::loss::expectile_loss(t - p, m);
        }
        let denom = weights.map_or(pv.len() as f64, |w| w.iter().sum());
        let val = if denom > 0.0 { num / denom } else { 0.0 };
        let ng = self.ng(pred);
        Ok(self.push(
            vec![],
            vec![val],
            Op::Expectile {
                pred,
                target: target.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                m,
            },
            ng,
        ))
    }

    /// Mean over rows of the squared L2 distance between `pred` and `target`.
    pub fn squared_error(&mut self, pred: Var, target: &[f64], row_weights: Option<&[f64]>) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(pred));
        let pv = self.value(pred);
        if target.len() != pv.len() {
            return Err(Error::shape(format!(
                "squared_error: {} predictions vs {} targets",
                pv.len(),
                target.len()
            )));
        }
        if let Some(w) = row_weights {
            if w.len() != rows {
                return Err(Error::shape("squared_error: weight count != rows"));
            }
        }
        let mut num = 0.0;
        for r in 0..rows {
            let w = row_weights.map_or(1.0, |w| w[r]);
            let s: f64 = (0..cols)
                .map(|c| (pv[r * cols + c] - target[r * cols + c]).powi(2))
                .sum();
            num += w * s;
        }
        let denom = row_weights.map_or(rows as f64, |w| w.iter().sum());
        let val = if denom > 0.0 { num / denom } else { 0.0 };
        let ng = self.ng(pred);
        Ok(self.push(
            vec![],
            vec![val],
            Op::SquaredError {
                pred,
                target: target.to_vec(),
                weights: row_weights.map(<[f64]>::to_vec),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`, returning every node's gradient.
    pub fn gradients(self, loss: Var) -> Result<Gradients> {
        let grads = self.sweep(loss)?;
        Ok(Gradients { grads })
    }

    /// Reverse sweep that accumulates `∂loss/∂θ` into the store's tensors.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let params: Vec<(usize, ParamId)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        let grads = self.sweep(loss)?;
        for (i, id) in params {
            if let Some(g) = &grads[i] {
                store.get_mut(id).accumulate_grad(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn sweep(self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::numerical(
                    format!("node #{i} ({})", node.op.name()),
                    format!("non-finite gradient {} at element {bad}", g[bad]),
                ));
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shp = |v: Var| self.nodes[v.0].shape.as_slice();
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (n, k) = (shp(*a)[0], shp(*a)[1]);
                let m = shp(*b)[1];
                if ng(*a) {
                    add_into(&mut grads[a.0], matmul_nt(g, val(*b), n, k, m));
                }
                if ng(*b) {
                    add_into(&mut grads[b.0], matmul_tn(val(*a), g, n, k, m));
                }
            }
            Op::Add(a, b) => {
                if ng(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if ng(*b) {
                    add_into(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    add_into(&mut grads[a.0], g.to_vec());
                }
                if ng(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    add_into(&mut grads[a.0], g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if ng(*b) {
                    add_into(&mut grads[b.0], g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, b) => {
                if ng(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
                if ng(*b) {
                    let cols = val(*b).len();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    add_into(&mut grads[b.0], gb);
                }
            }
            Op::Scale(x, c) => add_into(&mut grads[x.0], g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => add_into(&mut grads[x.0], g.to_vec()),
            Op::Relu(x) => add_into(
                &mut grads[x.0],
                g.iter()
                    .zip(val(*x))
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(x) => add_into(
                &mut grads[x.0],
                g.iter().zip(&node.value).map(|(d, y)| d * (1.0 - y * y)).collect(),
            ),
            Op::Exp(x) => add_into(&mut grads[x.0], g.iter().zip(&node.value).map(|(d, y)| d * y).collect()),
            Op::Square(x) => add_into(
                &mut grads[x.0],
                g.iter().zip(val(*x)).map(|(d, v)| 2.0 * d * v).collect(),
            ),
            Op::Sum(x) => add_into(&mut grads[x.0], vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                add_into(&mut grads[x.0], vec![g[0] / n as f64; n]);
            }
            Op::RowSum(x) => {
                let (_, cols) = rows_cols(shp(*x));
                add_into(
                    &mut grads[x.0],
                    g.iter().flat_map(|&d| std::iter::repeat_n(d, cols)).collect(),
                );
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = shp(*p)[1];
                    if ng(*p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        add_into(&mut grads[p.0], gp);
                    }
                    off += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (rows, cols) = (shp(*x)[0], shp(*x)[1]);
                let w = end - start;
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g.to_vec()),
            Op::GatherRows(table, idx) => {
                let (vocab, d) = (shp(*table)[0], shp(*table)[1]);
                let mut gt = vec![0.0; vocab * d];
                for (r, &i) in idx.iter().enumerate() {
                    gt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[table.0], gt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = val(*gain).len();
                let gv = val(*gain);
                if ng(*gain) || ng(*bias) {
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                            gb[j] += gr[j];
                        }
                    }
                    if ng(*gain) {
                        add_into(&mut grads[gain.0], gg);
                    }
                    if ng(*bias) {
                        add_into(&mut grads[bias.0], gb);
                    }
                }
                if ng(*x) {
                    let n = cols as f64;
                    let mut gx = Vec::with_capacity(g.len());
                    for ((gr, hr), &is) in g.chunks(cols).zip(xhat.chunks(cols)).zip(inv_std) {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx.push(is / n * (n * dh[j] - s1 - hr[j] * s2));
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = node.shape[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; qv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gvv = vec![0.0; vv.len()];
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let ri = (b * seq + i) * d + off;
                            let gi = &g[ri..ri + dh];
                            let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                            let mut sdp = 0.0;
                            for j in 0..=i {
                                let rj = (b * seq + j) * d + off;
                                dp[j] = dot(gi, &vv[rj..rj + dh]);
                                sdp += prow[j] * dp[j];
                                for (a, &x) in gvv[rj..rj + dh].iter_mut().zip(gi) {
                                    *a += prow[j] * x;
                                }
                            }
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - sdp) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let rj = (b * seq + j) * d + off;
                                for t in 0..dh {
                                    gq[ri + t] += ds * kv[rj + t];
                                    gk[rj + t] += ds * qv[ri + t];
                                }
                            }
                        }
                    }
                }
                if ng(*q) {
                    add_into(&mut grads[q.0], gq);
                }
                if ng(*k) {
                    add_into(&mut grads[k.0], gk);
                }
                if ng(*v) {
                    add_into(&mut grads[v.0], gvv);
                }
            }
            Op::Expectile {
                pred,
                target,
                weights,
                m,
            } => {
                let pv = val(*pred);
                let denom = weights.as_ref().map_or(pv.len() as f64, |w| w.iter().sum());
                if denom <= 0.0 {
                    return;
                }
                let gp = pv
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&p, &t))| {
                        let delta = t - p;
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        let asym = if delta < 0.0 { 1.0 - m } else { *m };
                        -2.0 * asym * delta * w * g[0] / denom
                    })
                    .collect();
                add_into(&mut grads[pred.0], gp);
            }
            Op::SquaredError { pred, target, weights } => {
                let (rows, cols) = rows_cols(shp(*pred));
                let pv = val(*pred);
                let denom = weights.as_ref().map_or(rows as f64, |w| w.iter().sum());
                if denom <= 0.0 {
                    return;
                }
                let gp = (0..rows * cols)
                    .map(|i| {
                        let w = weights.as_ref().map_or(1.0, |w| w[i / cols]);
                        2.0 * (pv[i] - target[i]) * w * g[0] / denom
                    })
                    .collect();
                add_into(&mut grads[pred.0], gp);
            }
        }
    }
}

fn check_loss_inputs(n: usize, target: &[f64], weights: Option<&[f64]>, what: &str) -> Result<()> {
    if target.len() != n {
        return Err(Error::shape(format!(
            "{what}: {n} predictions vs {} targets",
            target.len()
        )));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::shape(format!("{what}: weight count mismatch")));
        }
    }
    if let Some(bad) = target.iter().find(|t| !t.is_finite()) {
        return Err(Error::numerical(what, format!("non-finite target {bad}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::scalar(3.0).with_grad());
        let y = g.square(x);
        let grads = g.gradients(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::scalar(3.0).with_grad());
        let zero = g.scale(x, 0.0);
        let y = g.add_scalar(zero, 5.0);
        let grads = g.gradients(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad());
        assert!(matches!(g.gradients(x), Err(Error::Shape(_))));
    }

    #[test]
    fn nan_gradient_names_node() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::scalar(1000.0).with_grad());
        let e = g.exp(x);
        let e2 = g.exp(e);
        let y = g.scale(e2, 0.0);
        match g.gradients(y) {
            Err(Error::Numerical { node, .. }) => assert!(node.contains("exp"), "{node}"),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn param_grads_land_in_store() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let wv = g.param(&store, w);
            let s = g.sum(wv);
            let y = g.square(s);
            g.backward(y, &mut store).unwrap();
        }
        // d/dw (w1 + w2)^2 = 2(w1 + w2) = -2 per pass, accumulated twice
        assert_eq!(store.get(w).grad().unwrap(), &[-4.0, -4.0]);
    }

    #[test]
    fn single_token_attention_is_value() {
        let mut g = Graph::new();
        let q = g.constant(vec![1, 4], vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        let k = g.constant(vec![1, 4], vec![1.0, 0.5, -0.2, 0.7]).unwrap();
        let v = g.constant(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let o = g.causal_attention(q, k, v, 1, 1, 2).unwrap();
        assert_eq!(g.value(o), &[5.0, 6.0, 7.0, 8.0]);
    }
}

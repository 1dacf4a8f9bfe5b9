//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so every node's parents precede it and the reverse of the
//! append order is a valid topological order for the backward sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor added inside `log` by the numerically stable loss primitives.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation catalog. Attributes travel inside the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `[n, k] x [k, m] -> [n, m]`
    MatMul,
    /// Elementwise add; the right operand may also be a trailing-shape slice
    /// broadcast over the leading dimension, or a one-element scalar.
    Add,
    Relu,
    /// Stride 1, valid padding: `[n, ci, h, w] * [co, ci, kh, kw]`.
    Conv2d,
    LogSoftmax,
    Softmax,
    /// Elementwise product of equally shaped tensors.
    Mul,
    Sum,
    Mean,
    Scale(f64),
    Neg,
    /// `ln(x + floor)`; without a floor every input must be positive.
    Log { floor: Option<f64> },
    Clamp { lo: f64, hi: f64 },
    Reshape(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Relu => "relu",
            Op::Conv2d => "conv2d",
            Op::LogSoftmax => "log_softmax",
            Op::Softmax => "softmax",
            Op::Mul => "mul",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Scale(_) => "scale",
            Op::Neg => "neg",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::MatMul | Op::Add | Op::Conv2d | Op::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Append-only computation graph holding values, lineage and gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last scalar passed to [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, parents: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != op.arity() || matches!(op, Op::Leaf) {
            return Err(Error::invalid(
                "inputs",
                format!("{} expects {} inputs, got {}", op.name(), op.arity(), inputs.len()),
            ));
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&op, &vals)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(out, op, parents, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.apply(Op::Conv2d, &[x, kernel])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn log(&mut self, a: Var, floor: Option<f64>) -> Result<Var> {
        self.apply(Op::Log { floor }, &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape(shape), &[a])
    }

    /// Accumulates `d output / d p` into every ancestor `p` that requires grad.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::Backward(format!(
                "output must be scalar, got shape {:?}",
                out.value.shape()
            )));
        }
        if !out.requires_grad {
            return Err(Error::Backward("output has no differentiable lineage".into()));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        adj[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for &p in &node.parents {
                assert!(p < idx, "graph is not topologically ordered");
            }
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let wants: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = backward_op(&node.op, &parent_vals, &node.value, &g, &wants);
            for ((&p, pg), want) in node.parents.iter().zip(parent_grads).zip(wants) {
                if !want {
                    continue;
                }
                let Some(pg) = pg else { continue };
                match &mut adj[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            if node.requires_grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
                match &mut self.grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// How the right operand of `Add` is broadcast.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Trailing,
    Scalar,
}

fn add_broadcast(a: &Tensor, b: &Tensor) -> Option<Broadcast> {
    if a.shape() == b.shape() {
        Some(Broadcast::Same)
    } else if b.len() == 1 {
        Some(Broadcast::Scalar)
    } else if a.shape().len() > 1 && &a.shape()[1..] == b.shape() {
        Some(Broadcast::Trailing)
    } else {
        None
    }
}

fn dims2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn forward(op: &Op, x: &[&Tensor]) -> Result<Tensor> {
    let name = op.name();
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not applied"),
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let ((n, k), (k2, m)) = match (dims2(a), dims2(b)) {
                (Some(da), Some(db)) if da.1 == db.0 => (da, db),
                _ => return Err(shape_err(name, a, b)),
            };
            let _ = k2;
            let mut out = vec![0.0; n * m];
            matmul_into(a.data(), b.data(), n, k, m, &mut out);
            Tensor::from_parts(vec![n, m], out)
        }
        Op::Add => {
            let (a, b) = (x[0], x[1]);
            let mode = add_broadcast(a, b).ok_or_else(|| shape_err(name, a, b))?;
            let bd = b.data();
            let data = match mode {
                Broadcast::Same => a.data().iter().zip(bd).map(|(p, q)| p + q).collect(),
                Broadcast::Scalar => a.data().iter().map(|p| p + bd[0]).collect(),
                Broadcast::Trailing => {
                    let w = bd.len();
                    a.data().iter().enumerate().map(|(i, p)| p + bd[i % w]).collect()
                }
            };
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Relu => map(x[0], |v| v.max(0.0)),
        Op::Conv2d => conv2d_forward(x[0], x[1])?,
        Op::Softmax => {
            let mut out = x[0].clone();
            let w = *x[0].shape().last().unwrap();
            for row in out.data_mut().chunks_mut(w) {
                softmax_in_place(row);
            }
            out
        }
        Op::LogSoftmax => {
            let mut out = x[0].clone();
            let w = *x[0].shape().last().unwrap();
            for row in out.data_mut().chunks_mut(w) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        }
        Op::Mul => {
            let (a, b) = (x[0], x[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(name, a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(p, q)| p * q).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Sum => Tensor::scalar(x[0].data().iter().sum()),
        Op::Mean => Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len() as f64),
        Op::Scale(c) => map(x[0], |v| c * v),
        Op::Neg => map(x[0], |v| -v),
        Op::Log { floor } => {
            let f = floor.unwrap_or(0.0);
            if let Some(bad) = x[0].data().iter().find(|&&v| v + f <= 0.0) {
                return Err(Error::Domain {
                    op: name,
                    detail: format!("log of non-positive value {bad} (floor {floor:?})"),
                });
            }
            map(x[0], |v| (v + f).ln())
        }
        Op::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
            }
            map(x[0], |v| v.clamp(*lo, *hi))
        }
        Op::Reshape(shape) => x[0].clone().reshape(shape.clone())?,
    })
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn conv_dims(x: &Tensor, k: &Tensor) -> Option<[usize; 8]> {
    match (x.shape(), k.shape()) {
        ([n, ci, h, w], [co, ci2, kh, kw]) if ci == ci2 && kh <= h && kw <= w => {
            Some([*n, *ci, *h, *w, *co, *kh, *kw, 0])
        }
        _ => None,
    }
}

fn conv2d_forward(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let [n, ci, h, w, co, kh, kw, _] = conv_dims(x, k).ok_or_else(|| shape_err("conv2d", x, k))?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let obase = (b * co + o) * oh * ow;
            for c in 0..ci {
                let xbase = (b * ci + c) * h * w;
                let kbase = (o * ci + c) * kh * kw;
                for a in 0..kh {
                    for e in 0..kw {
                        let kv = kd[kbase + a * kw + e];
                        for i in 0..oh {
                            let xrow = xbase + (i + a) * w + e;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                out[orow + j] += kv * xd[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, co, oh, ow], out))
}

/// Returns the gradient for each parent, given the output adjoint `g`.
/// Parents that do not require grad get `None`.
fn backward_op(op: &Op, x: &[&Tensor], y: &Tensor, g: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| wants[i];
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (n, k) = dims2(a).unwrap();
            let m = b.shape()[1];
            let da = want(0).then(|| {
                // G · Bᵀ
                let mut da = vec![0.0; n * k];
                let bd = b.data();
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let brow = &bd[p * m..(p + 1) * m];
                        da[i * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                    }
                }
                da
            });
            let db = want(1).then(|| {
                // Aᵀ · G
                let mut db = vec![0.0; k * m];
                let ad = a.data();
                for i in 0..n {
                    let grow = &g[i * m..(i + 1) * m];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (d, &gv) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                            *d += av * gv;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        Op::Add => {
            let (a, b) = (x[0], x[1]);
            let mode = add_broadcast(a, b).unwrap();
            let db = want(1).then(|| match mode {
                Broadcast::Same => g.to_vec(),
                Broadcast::Scalar => vec![g.iter().sum()],
                Broadcast::Trailing => {
                    let w = b.len();
                    let mut acc = vec![0.0; w];
                    for chunk in g.chunks(w) {
                        acc.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                    }
                    acc
                }
            });
            vec![want(0).then(|| g.to_vec()), db]
        }
        Op::Relu => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect(),
        )],
        Op::Conv2d => {
            let (xt, kt) = (x[0], x[1]);
            let [n, ci, h, w, co, kh, kw, _] = conv_dims(xt, kt).unwrap();
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let (xd, kd) = (xt.data(), kt.data());
            let mut dx = want(0).then(|| vec![0.0; xd.len()]);
            let mut dk = want(1).then(|| vec![0.0; kd.len()]);
            for b in 0..n {
                for o in 0..co {
                    let obase = (b * co + o) * oh * ow;
                    for c in 0..ci {
                        let xbase = (b * ci + c) * h * w;
                        let kbase = (o * ci + c) * kh * kw;
                        for a in 0..kh {
                            for e in 0..kw {
                                let kidx = kbase + a * kw + e;
                                let mut kacc = 0.0;
                                for i in 0..oh {
                                    let xrow = xbase + (i + a) * w + e;
                                    let orow = obase + i * ow;
                                    for j in 0..ow {
                                        let gv = g[orow + j];
                                        kacc += gv * xd[xrow + j];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xrow + j] += gv * kd[kidx];
                                        }
                                    }
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[kidx] += kacc;
                                }
                            }
                        }
                    }
                }
            }
            vec![dx, dk]
        }
        Op::Softmax => {
            let w = *y.shape().last().unwrap();
            let mut dz = vec![0.0; g.len()];
            for ((s, gr), d) in y.data().chunks(w).zip(g.chunks(w)).zip(dz.chunks_mut(w)) {
                let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((dv, &sv), &gv) in d.iter_mut().zip(s).zip(gr) {
                    *dv = sv * (gv - dot);
                }
            }
            vec![Some(dz)]
        }
        Op::LogSoftmax => {
            let w = *y.shape().last().unwrap();
            let mut dz = vec![0.0; g.len()];
            for ((ls, gr), d) in y.data().chunks(w).zip(g.chunks(w)).zip(dz.chunks_mut(w)) {
                let total: f64 = gr.iter().sum();
                for ((dv, &l), &gv) in d.iter_mut().zip(ls).zip(gr) {
                    *dv = gv - l.exp() * total;
                }
            }
            vec![Some(dz)]
        }
        Op::Mul => {
            let (a, b) = (x[0], x[1]);
            let da = want(0).then(|| b.data().iter().zip(g).map(|(v, gv)| v * gv).collect());
            let db = want(1).then(|| a.data().iter().zip(g).map(|(v, gv)| v * gv).collect());
            vec![da, db]
        }
        Op::Sum => vec![Some(vec![g[0]; x[0].len()])],
        Op::Mean => vec![Some(vec![g[0] / x[0].len() as f64; x[0].len()])],
        Op::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
        Op::Neg => vec![Some(g.iter().map(|v| -v).collect())],
        Op::Log { floor } => {
            let f = floor.unwrap_or(0.0);
            vec![Some(x[0].data().iter().zip(g).map(|(v, gv)| gv / (v + f)).collect())]
        }
        Op::Clamp { lo, hi } => vec![Some(
            x[0].data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                .collect(),
        )],
        Op::Reshape(_) => vec![Some(g.to_vec())],
    }
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("h", "step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
        assert_eq!(g.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn relu_and_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1., 0., 2.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 2.]);
        let z = g.constant(Tensor::vector(vec![0., 0.]));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.mul(a, c).is_err());
    }

    #[test]
    fn log_domain() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(g.log(x, None), Err(Error::Domain { .. })));
        let y = g.log(x, Some(LOG_FLOOR)).unwrap();
        assert!((g.value(y).data()[0] - LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let out = g.sum(sq).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn log_softmax_gradient_at_symmetric_point() {
        // d/dz0 [z0 - lse(z)] = 1 - 1/2, d/dz1 = -1/2 at z = 0.
        let mut g = Graph::new();
        let z = g.param(Tensor::vector(vec![0.0, 0.0]));
        let ls = g.log_softmax(z).unwrap();
        let pick = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let first = g.mul(ls, pick).unwrap();
        let out = g.sum(first).unwrap();
        g.backward(out).unwrap();
        let grad = g.grad(z).unwrap();
        assert!((grad.data()[0] - 0.5).abs() < 1e-15);
        assert!((grad.data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.5, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let out = g.sum(sq).unwrap();
        g.backward(out).unwrap();
        let once = g.grad(x).unwrap();
        g.backward(out).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Backward(_))));
    }

    #[test]
    fn constant_branches_get_no_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let out = g.sum(p).unwrap();
        g.backward(out).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn finite_diff_polynomial_and_constant() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
        let z = finite_diff_grad(|_| Ok(7.0), &x, 1e-5).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    #[test]
    fn broadcast_add_gradient_sums_over_batch() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[3, 2]));
        let b = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[1., 2., 1., 2., 1., 2.]);
        let out = g.sum(s).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn conv2d_known_values() {
        // 3x3 input, 2x2 kernel of ones: each output sums a 2x2 window.
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let k = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y).data(), &[12., 16., 24., 28.]);
        let out = g.sum(y).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 2., 1., 2., 4., 2., 1., 2., 1.]);
        assert_eq!(g.grad(k).unwrap().data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.5, 2.0]));
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let out = g.sum(c).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}

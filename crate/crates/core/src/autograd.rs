//! Tape-based reverse-mode differentiation over a closed set of tensor ops.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation. Broadcasting is
//! restricted to suffix broadcasting: the right operand's shape must equal a
//! trailing slice of the left operand's shape.

use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a [.., m, k] · b [k, n]` with `b` shared across the leading axes.
    MatMul(Var, Var),
    /// `a [B, m, k] · b [B, k, n]`, or `· b[B, n, k]ᵀ` when `trans_b`.
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sqrt(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Sqrt(..) => "sqrt",
            Op::Mean(..) => "mean",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
        }
    }
}

/// Names accepted by [`Graph::apply`].
pub const SUPPORTED_OPS: &[&str] = &[
    "matmul", "bmm", "linear", "add", "sub", "hadamard", "scale", "sqrt", "mean", "concat",
    "softmax", "layer_norm", "gelu", "permute", "reshape",
];

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a named parameter; zeros are reported as `None` only when
    /// the parameter did not influence the output.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.get(*v))
    }

    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A named trainable leaf. Registering the same name twice is an error.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} bound twice")));
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Dynamic entry point for the closed op set. Ops taking extra
    /// configuration (`scale`, `concat`, `permute`, `reshape`, `bmm`) are
    /// only reachable through their typed methods.
    pub fn apply(&mut self, op: &str, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Config(format!("op {op} takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match op {
            "matmul" => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "linear" => {
                arity(3)?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            "add" => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            "sub" => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            "hadamard" => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "sqrt" => {
                arity(1)?;
                Ok(self.sqrt(inputs[0]))
            }
            "mean" => {
                arity(1)?;
                Ok(self.mean(inputs[0]))
            }
            "softmax" => {
                arity(1)?;
                Ok(self.softmax(inputs[0]))
            }
            "gelu" => {
                arity(1)?;
                Ok(self.gelu(inputs[0]))
            }
            "layer_norm" => {
                arity(3)?;
                self.layer_norm(inputs[0], inputs[1], inputs[2])
            }
            other => Err(Error::UnsupportedOp(other.to_string())),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err(format!("matmul {:?} x {:?}", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k;
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::MatMul(a, b), rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err(format!("bmm {:?} x {:?}", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return shape_err(format!("bmm inner dims {:?} x {:?} (trans_b={trans_b})", sa, sb));
        }
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(vec![batch, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    /// `x [.., in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || self.shape(b) != [sw[1]] {
            return shape_err(format!("linear weight {:?} bias {:?}", sw, self.shape(b)));
        }
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || sx[sx.len() - 1] != sw[0] {
            return shape_err(format!("linear input {:?} weight {:?}", sx, sw));
        }
        let rows = self.value(x).numel() / sw[0];
        let n = sw[1];
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(rows, sw[0], n, self.value(x).data(), false, self.value(w).data(), false, &mut out, true);
        let mut shape = sx;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Linear { x, w, b }, rg))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sb, &sa) {
            return shape_err(format!("{} cannot broadcast {:?} onto {:?}", op.name(), sb, sa));
        }
        let bv = self.value(b).data();
        let inner = bv.len().max(1);
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % inner]))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(sa, out)?, op, rg))
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product with suffix broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sqrt(a), rg)
    }

    /// Mean over every element; returns a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat of zero inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {:?}", base));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return shape_err(format!("concat mismatch {:?} vs {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_vec(shape, out).unwrap(), Op::Softmax(a), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err(format!("layer_norm over {d} with gamma {:?}", self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for (r, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let xh = (row[i] - mean) * rs;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * g[i] + b[i];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("invalid permutation {:?} for {:?}", axes, shape));
        }
        let out = permute_data(self.value(x).data(), &shape, axes);
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(new_shape, out)?, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return shape_err(format!("backward needs a scalar output, got {:?}", self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for i in (0..=out.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        grads.truncate(out.0 + 1);
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, y: &Tensor, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.numel() / k;
                if self.wants(*a) {
                    let mut da = vec![0.0; rows * k];
                    gemm(rows, n, k, dy.data(), false, bv.data(), true, &mut da, false);
                    acc(grads, *a, Tensor::from_vec(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, rows, n, av.data(), true, dy.data(), false, &mut db, false);
                    acc(grads, *b, Tensor::from_vec(vec![k, n], db).unwrap());
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = dy.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        // dA = dY · op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &dy.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(grads, *a, Tensor::from_vec(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        let dyi = &dy.data()[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dYᵀ · A
                            gemm(n, m, k, dyi, true, ai, false, dbi, false);
                        } else {
                            gemm(k, m, n, ai, true, dyi, false, dbi, false);
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / k;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * k];
                    gemm(rows, n, k, dy.data(), false, wv.data(), true, &mut dx, false);
                    acc(grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, rows, n, xv.data(), true, dy.data(), false, &mut dw, false);
                    acc(grads, *w, Tensor::from_vec(vec![k, n], dw).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(vec![n], db).unwrap());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    acc(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    let db = reduce_to_suffix(dy.data(), self.value(*b).shape(), |_, g| sign * g);
                    acc(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let inner = bv.numel().max(1);
                if self.wants(*a) {
                    let da: Vec<f64> =
                        dy.data().iter().enumerate().map(|(i, g)| g * bv.data()[i % inner]).collect();
                    acc(grads, *a, Tensor::from_vec(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let db = reduce_to_suffix(dy.data(), bv.shape(), |i, g| g * av.data()[i]);
                    acc(grads, *b, db);
                }
            }
            Op::Scale(a, c) => acc(grads, *a, dy.scale(*c)),
            Op::Sqrt(a) => {
                let da = dy.zip_map(y, |g, s| g * 0.5 / s).unwrap();
                acc(grads, *a, da);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let g = dy.item() / av.numel() as f64;
                acc(grads, *a, Tensor::full(av.shape(), g));
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            dv.extend_from_slice(&dy.data()[start..start + len * inner]);
                        }
                        acc(grads, v, Tensor::from_vec(self.shape(v).to_vec(), dv).unwrap());
                    }
                    offset += len;
                }
            }
            Op::Softmax(a) => {
                let d = y.last_dim();
                let mut da = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(d).zip(dy.data().chunks(d)).zip(da.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for i in 0..d {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_vec(y.shape().to_vec(), da).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = y.last_dim();
                let g = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, xr) in dy.data().chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * xr[i];
                            db[i] += gr[i];
                        }
                    }
                    if self.wants(*gamma) {
                        acc(grads, *gamma, Tensor::from_vec(vec![d], dg).unwrap());
                    }
                    if self.wants(*beta) {
                        acc(grads, *beta, Tensor::from_vec(vec![d], db).unwrap());
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; y.numel()];
                    for (r, ((gr, xr), dr)) in
                        dy.data().chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate()
                    {
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for i in 0..d {
                            let gh = gr[i] * g[i];
                            sum_g += gh;
                            sum_gx += gh * xr[i];
                        }
                        let inv = 1.0 / d as f64;
                        for i in 0..d {
                            let gh = gr[i] * g[i];
                            dr[i] = rstd[r] * (gh - inv * sum_g - xr[i] * inv * sum_gx);
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(y.shape().to_vec(), dx).unwrap());
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let da = av
                    .zip_map(dy, |x, g| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .unwrap();
                acc(grads, *a, da);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let dx = permute_data(dy.data(), y.shape(), &inverse);
                acc(grads, *x, Tensor::from_vec(self.shape(*x).to_vec(), dx).unwrap());
            }
            Op::Reshape(x) => {
                acc(grads, *x, dy.reshape(self.shape(*x)).unwrap());
            }
        }
    }
}

/// Sums `f(i, dy[i])` into a tensor of shape `shape` (a suffix of dy's shape).
fn reduce_to_suffix(dy: &[f64], shape: &[usize], f: impl Fn(usize, f64) -> f64) -> Tensor {
    let inner: usize = shape.iter().product();
    let mut out = vec![0.0; inner];
    for (i, &g) in dy.iter().enumerate() {
        out[i % inner] += f(i, g);
    }
    Tensor::from_vec(shape.to_vec(), out).unwrap()
}

/// Out-of-place axis permutation: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let last = nd - 1;
    loop {
        // innermost axis as a tight loop
        let s = strides[last];
        for i in 0..out_shape[last] {
            out.push(data[offset + i * s]);
        }
        // advance the remaining axes odometer-style
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

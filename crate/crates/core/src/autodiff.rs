//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly when
//! it is recorded, so node values are always available; [`Graph::backward`]
//! then walks the tape in reverse and accumulates vector-Jacobian products.
//! Node indices only ever point backwards, so the tape is acyclic by
//! construction.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    NodeMix(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceLast(Var, usize),
    ConcatLast(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Per-feature statistics of a training-mode batch norm (biased variance).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn unary(&mut self, op: Op, x: Var, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(x).map(f);
        check_finite(name, &value)?;
        let rg = self.rg(&[x]);
        Ok(self.push(op, value, rg))
    }

    fn binary(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        check_finite(name, &value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    /// `a·b` where `a` is `[..., k]` (leading axes flattened into rows) and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() < 1 || bv.rank() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let k = av.cols();
        let rows = av.len() / k.max(1);
        let n = bv.shape()[1];
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        check_finite("matmul", &value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    /// Graph mixing `S·A` applied to every sample: `s` is `[K, K]`, `a` is `[K, n]` or `[B, K, n]`.
    pub fn node_mix(&mut self, s: Var, a: Var) -> Result<Var> {
        let (sv, av) = (self.value(s), self.value(a));
        let ok = sv.rank() == 2
            && sv.shape()[0] == sv.shape()[1]
            && (av.rank() == 2 || av.rank() == 3)
            && av.shape()[av.rank() - 2] == sv.shape()[0];
        if !ok {
            return Err(Error::shape("node_mix", format!("{:?} . {:?}", sv.shape(), av.shape())));
        }
        let k = sv.shape()[0];
        let n = av.cols();
        let block = k * n;
        let batches = av.len() / block.max(1);
        let mut out = vec![0.0; av.len()];
        for b in 0..batches {
            let r = b * block..(b + 1) * block;
            gemm(k, k, n, sv.data(), false, &av.data()[r.clone()], false, &mut out[r], 0.0);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        check_finite("node_mix", &value)?;
        let rg = self.rg(&[s, a]);
        Ok(self.push(Op::NodeMix(s, a), value, rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rank() != 1 || av.rank() < 1 || av.cols() != bv.len() {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let n = bv.len();
        let mut value = av.clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        check_finite("add_bias", &value)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Op::AddBias(a, bias), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(a, c), a, "scale", |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(a), a, "add_scalar", |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Tanh(a), a, "tanh", f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu(a), a, "relu", |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp(a), a, "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log(a), a, "log", f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square(a), a, "square", |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs(a), a, "abs", f64::abs)
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Op::Clamp(a, lo, hi), a, "clamp", |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let value = Tensor::scalar(s);
        check_finite("sum", &value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Sum(a), value, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        check_finite("mean", &value)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Mean(a), value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if start + len > c {
            return Err(Error::shape("slice_last", format!("{start}+{len} > {c}")));
        }
        let mut data = Vec::with_capacity(av.len() / c * len);
        for row in av.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceLast(a, start), value, rg))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut width = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat_last", format!("{:?} vs lead {:?}", s, lead)));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatLast(parts.to_vec()), value, rg))
    }

    /// Training-mode batch normalisation. `x` is `[B, ...]`; every trailing
    /// element is its own feature, normalised over the leading batch axis
    /// with biased batch statistics. `gamma` and `beta` are flat `[F]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let b = xv.shape().first().copied().unwrap_or(0);
        if b == 0 || xv.rank() < 2 {
            return Err(Error::shape("batch_norm", format!("input {:?}", xv.shape())));
        }
        let f = xv.len() / b;
        if gv.len() != f || bv.len() != f {
            return Err(Error::shape(
                "batch_norm",
                format!("{f} features, gamma {:?}, beta {:?}", gv.shape(), bv.shape()),
            ));
        }
        let d = xv.data();
        let mut mean = vec![0.0; f];
        for row in d.chunks(f) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= b as f64);
        let mut var = vec![0.0; f];
        for row in d.chunks(f) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= b as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        for (r, row) in d.chunks(f).enumerate() {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let value = Tensor::new(shape.clone(), out)?;
        check_finite("batch_norm", &value)?;
        let rg = self.rg(&[x, gamma, beta]);
        let xhat = Tensor::new(shape, xhat)?;
        let v = self.push(Op::BatchNorm { x, gamma, beta, xhat, inv_std }, value, rg);
        Ok((v, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let b = xv.shape().first().copied().unwrap_or(0);
        if b == 0 || xv.rank() < 2 {
            return Err(Error::shape("batch_norm_eval", format!("input {:?}", xv.shape())));
        }
        let f = xv.len() / b;
        if gv.len() != f || bv.len() != f || running_mean.len() != f || running_var.len() != f {
            return Err(Error::shape("batch_norm_eval", format!("{f} features")));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(f).enumerate() {
            for j in 0..f {
                let h = (row[j] - running_mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let value = Tensor::new(shape.clone(), out)?;
        check_finite("batch_norm_eval", &value)?;
        let rg = self.rg(&[x, gamma, beta]);
        let xhat = Tensor::new(shape, xhat)?;
        Ok(self.push(Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, value, rg))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, {} labels", lv.shape(), labels.len()),
            ));
        }
        let c = lv.cols();
        if labels.iter().any(|&l| l >= c) {
            return Err(Error::invalid(format!("label out of range for {c} classes")));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, row) in lv.data().chunks(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - max).exp() / z;
            }
            loss += -(row[labels[r]] - max - z.ln());
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        check_finite("cross_entropy", &value)?;
        let probs = Tensor::new(lv.shape().to_vec(), probs)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            value,
            rg,
        ))
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the output).
    /// Returns `d(seed · output)/d(node)` for every node that requires grad.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid("backward on a node that was never evaluated"));
        }
        same_shape("backward", &seed, self.value(output))?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    /// Backward from a scalar output with unit seed.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let shape = self.shape(output).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::shape("backward_scalar", format!("output {shape:?}")));
        }
        self.backward(output, Tensor::full(&shape, 1.0))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.cols();
                let rows = av.len() / k.max(1);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; av.len()];
                    gemm(rows, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; bv.len()];
                    gemm(k, rows, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::NodeMix(s, a) => {
                let (sv, av) = (self.value(*s), self.value(*a));
                let k = sv.shape()[0];
                let n = av.cols();
                let block = k * n;
                let batches = av.len() / block.max(1);
                if self.requires_grad(*s) {
                    let mut ds = vec![0.0; k * k];
                    for b in 0..batches {
                        let r = b * block..(b + 1) * block;
                        gemm(k, n, k, &g.data()[r.clone()], false, &av.data()[r], true, &mut ds, 1.0);
                    }
                    self.accumulate(grads, *s, Tensor::new(vec![k, k], ds)?);
                }
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; av.len()];
                    for b in 0..batches {
                        let r = b * block..(b + 1) * block;
                        gemm(k, k, n, sv.data(), true, &g.data()[r.clone()], false, &mut da[r], 0.0);
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::new(vec![n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?);
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))?);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, g.zip_map(y, |g, y| g * y)?);
            }
            Op::Log(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| g / x)?);
            }
            Op::Square(a) => {
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |g, x| 2.0 * x * g)?);
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let d = g.zip_map(self.value(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.item() / n;
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), s));
            }
            Op::SliceLast(a, start) => {
                let av = self.value(*a);
                let c = av.cols();
                let len = y.cols();
                let mut d = vec![0.0; av.len()];
                for (drow, grow) in d.chunks_mut(c).zip(g.data().chunks(len)) {
                    drow[*start..*start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?);
            }
            Op::ConcatLast(parts) => {
                let width = y.cols();
                let rows = y.len() / width.max(1);
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let c = pv.cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * width + offset..r * width + offset + c]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    offset += c;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let f = gv.len();
                let b = y.len() / f;
                let (dgamma, dbeta) = affine_param_grads(g, xhat, f);
                if self.requires_grad(*x) {
                    // dx = inv/B · (B·dxhat − Σ dxhat − xhat·Σ(dxhat·xhat))
                    let mut sum_dxhat = vec![0.0; f];
                    let mut sum_dxhat_xhat = vec![0.0; f];
                    for (grow, hrow) in g.data().chunks(f).zip(xhat.data().chunks(f)) {
                        for j in 0..f {
                            let dh = grow[j] * gv.data()[j];
                            sum_dxhat[j] += dh;
                            sum_dxhat_xhat[j] += dh * hrow[j];
                        }
                    }
                    let bf = b as f64;
                    let mut dx = vec![0.0; y.len()];
                    for (r, (grow, hrow)) in g.data().chunks(f).zip(xhat.data().chunks(f)).enumerate() {
                        for j in 0..f {
                            let dh = grow[j] * gv.data()[j];
                            dx[r * f + j] = inv_std[j] / bf
                                * (bf * dh - sum_dxhat[j] - hrow[j] * sum_dxhat_xhat[j]);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(gv.shape().to_vec(), dbeta)?);
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                let f = gv.len();
                let (dgamma, dbeta) = affine_param_grads(g, xhat, f);
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(f) {
                        for j in 0..f {
                            row[j] *= gv.data()[j] * inv_std[j];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(gv.shape().to_vec(), dbeta)?);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.cols();
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.data().to_vec();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= scale);
                self.accumulate(grads, *logits, Tensor::new(probs.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn affine_param_grads(g: &Tensor, xhat: &Tensor, f: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for (grow, hrow) in g.data().chunks(f).zip(xhat.data().chunks(f)) {
        for j in 0..f {
            dgamma[j] += grow[j] * hrow[j];
            dbeta[j] += grow[j];
        }
    }
    (dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_of_zero_and_its_slope() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
        let grads = g.backward_scalar(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn square_slope_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x).unwrap();
        let grads = g.backward_scalar(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(3));
        let x = g.param(Tensor::from_fn(&[3, 3], |k| k as f64 * 0.7 - 2.0));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        let c = g.param(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(-1.0));
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn backward_seed_shape_checked() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.tanh(x).unwrap();
        assert!(g.backward(y, Tensor::zeros(&[3])).is_err());
        assert!(g.backward(Var(10), Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let p = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward_scalar(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 5], |i| i as f64));
        let a = g.slice_last(x, 0, 2).unwrap();
        let b = g.slice_last(x, 2, 3).unwrap();
        let y = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let l = g.param(Tensor::zeros(&[2, 4]));
        let ce = g.cross_entropy(l, &[0, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn eval_batch_norm_with_unit_stats_is_affine() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[3, 2], |i| i as f64));
        let gamma = g.param(Tensor::ones(&[2]));
        let beta = g.param(Tensor::zeros(&[2]));
        let y = g.batch_norm_eval(x, gamma, beta, &[0.0, 0.0], &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}

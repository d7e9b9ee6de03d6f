//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] walks the nodes
//! in reverse, visiting each recorded node at most once, and accumulates
//! gradients into leaves. Calling `backward` twice without
//! [`Tape::zero_grad`] adds the second pass on top of the first.

use super::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::error::{CirError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target encoding for [`Tape::cross_entropy`].
#[derive(Clone, Debug)]
pub enum Targets {
    Hard(Vec<usize>),
    /// Row-stochastic `B×C` matrix.
    Soft(Tensor),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    SumSquares(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        axis: NormAxis,
    },
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
    PairwiseSqDist(Var, Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormAxis {
    /// Statistics per row (layer norm).
    Row,
    /// Statistics per column over the batch (batch norm, train mode).
    Column,
    /// Precomputed per-column statistics (batch norm, eval mode).
    Fixed,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Per-feature batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance, the form folded into running estimates.
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor, zeros if the leaf was never reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Sign pattern of every relu input recorded so far.
    pub fn relu_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().map(|a| *a > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Index of the first node up to `upto` holding a non-finite value.
    pub fn first_non_finite(&self, upto: Var) -> Option<usize> {
        self.nodes[..=upto.0].iter().position(|n| !n.value.is_finite())
    }

    // ---- primitives ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(CirError::shape("transpose", self.shape(a), &[0, 0]));
        }
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CirError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, r: Var) -> Result<()> {
        let xs = self.shape(x);
        let rs = self.shape(r);
        let ok = xs.len() == 2
            && match rs.len() {
                1 => rs[0] == xs[1],
                2 => rs[0] == 1 && rs[1] == xs[1],
                _ => false,
            };
        if !ok {
            return Err(CirError::shape(op, xs, rs));
        }
        Ok(())
    }

    /// `x[m×n] + b[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_bias", x, b)?;
        let out = broadcast_rows(self.value(x), self.value(b), |a, c| a + c);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x[m×n] − r[n]`, broadcast over rows.
    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("sub_row", x, r)?;
        let out = broadcast_rows(self.value(x), self.value(r), |a, c| a - c);
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(out, Op::SubRow(x, r), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies every element of `x` by the single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(CirError::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let c = self.value(s).item();
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())
            .expect("same shape");
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.exp()).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|a| a * a).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Column means of an `m×n` matrix, as an `[n]` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.rows() == 0 {
            return Err(CirError::shape("mean_rows", v.shape(), &[]));
        }
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, a) in out.iter_mut().zip(v.row(i)) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(CirError::shape("gather_rows", v.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(CirError::shape("gather_rows", v.shape(), &[bad]));
        }
        let out = v.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-feature `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_norm_params("layer_norm", x, gamma, beta)?;
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = v.row(i);
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                xhat[i * n + j] = (row[j] - mu) * is;
            }
        }
        Ok(self.push_norm(x, gamma, beta, xhat, inv_std, NormAxis::Row))
    }

    /// Train-mode batch normalization over the rows of `x`. Returns the
    /// output and the batch statistics for the running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        self.check_norm_params("batch_norm_1d", x, gamma, beta)?;
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        if m < 2 {
            return Err(CirError::DegenerateBatch(format!(
                "batch norm in train mode needs at least 2 samples, got {m}"
            )));
        }
        let mut mean = vec![0.0; n];
        for i in 0..m {
            for (mu, a) in mean.iter_mut().zip(v.row(i)) {
                *mu += a;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= m as f64);
        let mut ss = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                let d = v.row(i)[j] - mean[j];
                ss[j] += d * d;
            }
        }
        let inv_std: Vec<f64> = ss.iter().map(|s| 1.0 / (s / m as f64 + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                xhat[i * n + j] = (v.row(i)[j] - mean[j]) * inv_std[j];
            }
        }
        let stats = BatchStats {
            unbiased_var: ss.iter().map(|s| s / (m - 1) as f64).collect(),
            mean,
        };
        Ok((
            self.push_norm(x, gamma, beta, xhat, inv_std, NormAxis::Column),
            stats,
        ))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.check_norm_params("batch_norm_1d", x, gamma, beta)?;
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        if mean.len() != n || var.len() != n {
            return Err(CirError::shape("batch_norm_1d", v.shape(), &[mean.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                xhat[i * n + j] = (v.row(i)[j] - mean[j]) * inv_std[j];
            }
        }
        Ok(self.push_norm(x, gamma, beta, xhat, inv_std, NormAxis::Fixed))
    }

    fn check_norm_params(&self, op: &'static str, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(CirError::shape(op, xs, self.shape(gamma)));
        }
        for p in [gamma, beta] {
            if self.value(p).numel() != xs[1] {
                return Err(CirError::shape(op, xs, self.shape(p)));
            }
        }
        Ok(())
    }

    fn push_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        axis: NormAxis,
    ) -> Var {
        let shape = self.shape(x).to_vec();
        let n = shape[1];
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(k, xh)| xh * g[k % n] + b[k % n])
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(shape, out).expect("norm shape"),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                axis,
            },
            rg,
        )
    }

    /// Row-wise softmax. Entries where `mask` is `false` are excluded and
    /// come out as exactly zero, with exactly zero gradient.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(CirError::shape("softmax_rows", v.shape(), &[]));
        }
        if let Some(m) = mask {
            if m.len() != v.numel() {
                return Err(CirError::shape("softmax_rows", v.shape(), &[m.len()]));
            }
        }
        let out = masked_softmax(v, mask)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Scales each row to unit L2 norm, dividing by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(CirError::shape("normalize_rows", v.shape(), &[]));
        }
        let (m, n) = (v.rows(), v.cols());
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row(i);
            let nrm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            norms[i] = nrm;
            let d = nrm.max(eps);
            for j in 0..n {
                out[i * n + j] = row[j] / d;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::NormalizeRows { x, norms, eps },
            rg,
        ))
    }

    /// Pairwise cosine similarity `s[i][j] = cos(a_i, b_j)`.
    pub fn cosine_similarity_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || self.shape(a)[1] != self.shape(b)[1]
        {
            return Err(CirError::shape("cosine_similarity", self.shape(a), self.shape(b)));
        }
        let an = self.normalize_rows(a, COSINE_EPS)?;
        let bn = self.normalize_rows(b, COSINE_EPS)?;
        let bt = self.transpose(bn)?;
        self.matmul(an, bt)
    }

    /// Mean cross-entropy of row-wise softmax against hard or soft targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Targets) -> Result<Var> {
        let v = self.value(logits);
        if v.shape().len() != 2 {
            return Err(CirError::shape("cross_entropy", v.shape(), &[]));
        }
        let (b, c) = (v.rows(), v.cols());
        let t = match targets {
            Targets::Hard(labels) => {
                if labels.len() != b {
                    return Err(CirError::shape("cross_entropy", v.shape(), &[labels.len()]));
                }
                let mut t = vec![0.0; b * c];
                for (i, &y) in labels.iter().enumerate() {
                    if y >= c {
                        return Err(CirError::Label { label: y, classes: c });
                    }
                    t[i * c + y] = 1.0;
                }
                t
            }
            Targets::Soft(s) => {
                if s.shape() != v.shape() {
                    return Err(CirError::shape("cross_entropy", v.shape(), s.shape()));
                }
                s.data().to_vec()
            }
        };
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = v.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
            let mut li = 0.0;
            for j in 0..c {
                let logp = row[j] - lse;
                probs[i * c + j] = logp.exp();
                let tij = t[i * c + j];
                if tij != 0.0 {
                    li -= tij * logp;
                }
            }
            loss += li;
        }
        let loss = loss / b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: t,
            },
            rg,
        ))
    }

    /// `D[i][j] = ‖a_i − b_j‖²`, computed from explicit differences so the
    /// diagonal of `D(a, a)` is exactly zero.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.cols() {
            return Err(CirError::shape("pairwise_sq_dist", va.shape(), vb.shape()));
        }
        let (m, n) = (va.rows(), vb.rows());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = va
                    .row(i)
                    .iter()
                    .zip(vb.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::PairwiseSqDist(a, b), rg))
    }

    // ---- backward --------------------------------------------------------

    /// Back-propagates from a single-element `loss`, adding into the
    /// gradients of every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CirError::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[idx].op) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if nodes[a.0].requires_grad {
                    let da = matmul_nt(g, vb.data(), m, n, k);
                    acc(*a, &|s| add_into(s, &da));
                }
                if nodes[b.0].requires_grad {
                    let db = matmul_tn(va.data(), g, m, k, n);
                    acc(*b, &|s| add_into(s, &db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.rows(), nodes[a.0].value.cols());
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(x, r) | Op::SubRow(x, r) => {
                let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                let n = nodes[x.0].value.cols();
                acc(*x, &|s| add_into(s, g));
                acc(*r, &|s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % n] += sign * gv;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)),
            Op::ScaleBy(x, sv) => {
                let c = nodes[sv.0].value.item();
                let vx = nodes[x.0].value.data();
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
                acc(*sv, &|s| s[0] += vx.iter().zip(g).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * y[k];
                    }
                });
            }
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        if vx[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|a| *a += g[0])),
            Op::SumSquares(x) => {
                let vx = nodes[x.0].value.data();
                acc(*x, &|s| {
                    for k in 0..s.len() {
                        s[k] += 2.0 * vx[k] * g[0];
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                acc(*x, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let n = nodes[x.0].value.cols();
                acc(*x, &|s| {
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..n {
                            s[src * n + j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                axis,
            } => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                let gm = nodes[gamma.0].value.data();
                acc(*gamma, &|s| {
                    for k in 0..g.len() {
                        s[k % n] += g[k] * xhat[k];
                    }
                });
                acc(*beta, &|s| {
                    for k in 0..g.len() {
                        s[k % n] += g[k];
                    }
                });
                if nodes[x.0].requires_grad {
                    let dxhat: Vec<f64> = (0..g.len()).map(|k| g[k] * gm[k % n]).collect();
                    let mut dx = vec![0.0; m * n];
                    match axis {
                        NormAxis::Row => {
                            for i in 0..m {
                                let r = i * n..(i + 1) * n;
                                let s1: f64 = dxhat[r.clone()].iter().sum();
                                let s2: f64 =
                                    dxhat[r.clone()].iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum();
                                for k in r {
                                    dx[k] = inv_std[i] / n as f64
                                        * (n as f64 * dxhat[k] - s1 - xhat[k] * s2);
                                }
                            }
                        }
                        NormAxis::Column => {
                            for j in 0..n {
                                let mut s1 = 0.0;
                                let mut s2 = 0.0;
                                for i in 0..m {
                                    s1 += dxhat[i * n + j];
                                    s2 += dxhat[i * n + j] * xhat[i * n + j];
                                }
                                for i in 0..m {
                                    let k = i * n + j;
                                    dx[k] = inv_std[j] / m as f64
                                        * (m as f64 * dxhat[k] - s1 - xhat[k] * s2);
                                }
                            }
                        }
                        NormAxis::Fixed => {
                            for k in 0..dx.len() {
                                dx[k] = dxhat[k] * inv_std[k % n];
                            }
                        }
                    }
                    acc(*x, &|s| add_into(s, &dx));
                }
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                acc(*x, &|s| {
                    for i in 0..m {
                        let yr = y.row(i);
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            s[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms, eps } => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                acc(*x, &|s| {
                    for i in 0..m {
                        let yr = y.row(i);
                        let gr = &g[i * n..(i + 1) * n];
                        if norms[i] > *eps {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                s[i * n + j] += (gr[j] - yr[j] * dot) / norms[i];
                            }
                        } else {
                            for j in 0..n {
                                s[i * n + j] += gr[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let (b, c) = (nodes[logits.0].value.rows(), nodes[logits.0].value.cols());
                acc(*logits, &|s| {
                    for i in 0..b {
                        let tsum: f64 = targets[i * c..(i + 1) * c].iter().sum();
                        for j in 0..c {
                            let k = i * c + j;
                            s[k] += g[0] * (probs[k] * tsum - targets[k]) / b as f64;
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, n, d) = (va.rows(), vb.rows(), va.cols());
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = 2.0 * g[i * n + j];
                            for k in 0..d {
                                s[i * d + k] += gij * (va.row(i)[k] - vb.row(j)[k]);
                            }
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = 2.0 * g[i * n + j];
                            for k in 0..d {
                                s[j * d + k] -= gij * (va.row(i)[k] - vb.row(j)[k]);
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn broadcast_rows(x: &Tensor, r: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n = x.cols();
    let rd = r.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(k, a)| f(*a, rd[k % n]))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Row-max-stabilized softmax with excluded entries pinned to zero.
fn masked_softmax(v: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = (v.rows(), v.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = v.row(i);
        let keep = |j: usize| mask.is_none_or(|mk| mk[i * n + j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &z) in row.iter().enumerate() {
            if keep(j) && z > mx {
                mx = z;
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(CirError::EmptySupport {
                sample: i,
                policy: "softmax mask".into(),
            });
        }
        let mut total = 0.0;
        for j in 0..n {
            // masked entries carry an additive −∞ and so vanish under exp
            let e = if keep(j) { (row[j] - mx).exp() } else { 0.0 };
            out[i * n + j] = e;
            total += e;
        }
        for e in &mut out[i * n..(i + 1) * n] {
            *e /= total;
        }
    }
    Tensor::matrix(m, n, out)
}

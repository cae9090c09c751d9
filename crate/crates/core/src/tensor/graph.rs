use super::kernels::{self, axis_extents};
use super::Tensor;
use crate::error::{Error, Result};
use crate::{fft, linalg};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A complex matrix inside the graph, stored as one packed `[2, rows, cols]`
/// node whose first slice is the real part and second slice the imaginary part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComplexVar(Var);

impl ComplexVar {
    pub fn packed(self) -> Var {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        tau: f64,
    },
    LogSoftmax {
        x: Var,
        tau: f64,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        p_log: Var,
        q: Var,
    },
    Sum(Var),
    Mean {
        x: Var,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Stack(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    Fft2 {
        z: Var,
        inverse: bool,
    },
    ComplexMul(Var, Var),
    TruncatedSvd {
        x: Var,
        /// Leading left singular vectors `[m, k]`; `None` when the truncation
        /// keeps full rank and the map is the identity.
        basis: Option<(Vec<f64>, usize)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a forward pass for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the insertion order is a
/// topological order and `backward` simply walks it in reverse. Leaf
/// gradients accumulate across repeated `backward` calls; intermediate
/// gradients are rebuilt on every call.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Copies `t` in as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push_leaf(t.clone(), requires_grad)
    }

    /// Copies `t` in as a trainable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.clone(), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Detached copy of `v`: same value, no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Var {
        value.requires_grad = false;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Adds the gradient held for `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Normalizes over the last axis, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if shape.is_empty() || d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Row-wise `softmax(x/τ)` over the last axis.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_temperature(tau)?;
        let value = softmax_rows(self.value(x), tau)?;
        Ok(self.push(value, Op::Softmax { x, tau }, &[x]))
    }

    /// Row-wise `log_softmax(x/τ)` over the last axis.
    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_temperature(tau)?;
        let probs = softmax_rows(self.value(x), tau)?;
        let logp = log_softmax_rows(self.value(x), tau)?;
        Ok(self.push(
            logp,
            Op::LogSoftmax {
                x,
                tau,
                probs: probs.into_data(),
            },
            &[x],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != b {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for a batch of {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                size: k,
            });
        }
        let logp = log_softmax_rows(self.value(logits), 1.0)?;
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(i, &l)| logp.data()[i * k + l])
            .sum::<f64>()
            / b as f64;
        let probs = logp.data().iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over rows of `Σ q·(log q − log p)`, with `0·log 0 := 0`.
    ///
    /// `p_log` holds log-probabilities and `q` probabilities, both `[B, K]`.
    pub fn kl_divergence(&mut self, p_log: Var, q: Var) -> Result<Var> {
        self.same_shape("kl_divergence", p_log, q)?;
        let (b, _) = self.value(q).dims2("kl_divergence")?;
        let qs = self.value(q).data();
        if let Some(bad) = qs.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain {
                op: "kl_divergence",
                msg: format!("target distribution has invalid entry {bad}"),
            });
        }
        let ps = self.value(p_log).data();
        let k = qs.len() / b;
        // A row's divergence is non-negative; rounding can push a near-zero
        // sum slightly below, which is reported as zero.
        let total: f64 = qs
            .chunks(k)
            .zip(ps.chunks(k))
            .map(|(qr, pr)| {
                qr.iter()
                    .zip(pr)
                    .map(|(&qv, &lp)| if qv > 0.0 { qv * (qv.ln() - lp) } else { 0.0 })
                    .sum::<f64>()
                    .max(0.0)
            })
            .sum();
        Ok(self.push(Tensor::scalar(total / b as f64), Op::KlDiv { p_log, q }, &[p_log, q]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "mean_axis",
                index: axis,
                size: shape.len(),
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.push(Tensor::from_parts(new_shape, out), Op::Mean { x, axis }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).t()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyAxis { op: "stack" })?;
        let inner = self.shape(first).to_vec();
        let mut data = Vec::with_capacity(xs.len() * self.value(first).len());
        for &v in xs {
            if self.shape(v) != inner.as_slice() {
                return Err(Error::shape("stack", &inner, self.shape(v)));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&inner);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Stack(xs.to_vec()), xs))
    }

    /// Slice `index` along the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let lead = *shape.first().ok_or_else(|| Error::dim("select", "cannot select from a scalar"))?;
        if index >= lead {
            return Err(Error::Index {
                op: "select",
                index,
                size: lead,
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        let value = Tensor::from_parts(shape[1..].to_vec(), data);
        Ok(self.push(value, Op::Select { x, index }, &[x]))
    }

    // --------------------------------------------------------- complex ops

    /// Packs real and (optional) imaginary matrices into a complex node.
    pub fn complex(&mut self, re: Var, im: Option<Var>) -> Result<ComplexVar> {
        let im = match im {
            Some(v) => v,
            None => {
                let zeros = Tensor::zeros(self.shape(re));
                self.constant(zeros)
            }
        };
        if self.shape(re).len() != 2 {
            return Err(Error::dim("complex", format!("expected a matrix, got {:?}", self.shape(re))));
        }
        Ok(ComplexVar(self.stack(&[re, im])?))
    }

    pub fn re(&mut self, z: ComplexVar) -> Result<Var> {
        self.select(z.0, 0)
    }

    pub fn im(&mut self, z: ComplexVar) -> Result<Var> {
        self.select(z.0, 1)
    }

    fn complex_dims(&self, z: ComplexVar) -> (usize, usize) {
        let s = self.shape(z.0);
        (s[1], s[2])
    }

    /// 2-D DFT over both axes of a complex `[rows, cols]` matrix.
    pub fn fft2(&mut self, z: ComplexVar) -> ComplexVar {
        self.fft2_dir(z, false)
    }

    /// Inverse 2-D DFT with `1/(rows·cols)` normalization.
    pub fn ifft2(&mut self, z: ComplexVar) -> ComplexVar {
        self.fft2_dir(z, true)
    }

    fn fft2_dir(&mut self, z: ComplexVar, inverse: bool) -> ComplexVar {
        let (rows, cols) = self.complex_dims(z);
        let out = fft::transform_packed(self.value(z.0).data(), rows, cols, inverse, true);
        let value = Tensor::from_parts(vec![2, rows, cols], out);
        ComplexVar(self.push(value, Op::Fft2 { z: z.0, inverse }, &[z.0]))
    }

    pub fn complex_mul(&mut self, a: ComplexVar, b: ComplexVar) -> Result<ComplexVar> {
        self.same_shape("complex_mul", a.0, b.0)?;
        let n = self.value(a.0).len() / 2;
        let av = self.value(a.0).data();
        let bv = self.value(b.0).data();
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let (ar, ai, br, bi) = (av[i], av[n + i], bv[i], bv[n + i]);
            out[i] = ar * br - ai * bi;
            out[n + i] = ar * bi + ai * br;
        }
        let value = Tensor::from_parts(self.shape(a.0).to_vec(), out);
        Ok(ComplexVar(self.push(value, Op::ComplexMul(a.0, b.0), &[a.0, b.0])))
    }

    pub fn complex_add(&mut self, a: ComplexVar, b: ComplexVar) -> Result<ComplexVar> {
        Ok(ComplexVar(self.add(a.0, b.0)?))
    }

    /// Rank-`k` truncated SVD reconstruction of a real matrix.
    ///
    /// Backward treats the projector `U_k·U_kᵀ` onto the leading left
    /// singular subspace as a constant: an upstream gradient `G` maps to
    /// `U_k·U_kᵀ·G`. At full rank the map is the identity.
    pub fn truncated_svd(&mut self, x: Var, k: usize) -> Result<Var> {
        let (recon, basis) = linalg::truncate_with_basis(self.value(x), k)?;
        let (m, n) = recon.dims2("truncated_svd")?;
        let basis = if k == m.min(n) { None } else { Some((basis, k)) };
        Ok(self.push(recon, Op::TruncatedSvd { x, basis }, &[x]))
    }

    /// Applies [`Graph::truncated_svd`] to real and imaginary parts separately.
    pub fn truncated_svd_complex(&mut self, z: ComplexVar, k: usize) -> Result<ComplexVar> {
        let re = self.re(z)?;
        let im = self.im(z)?;
        let re = self.truncated_svd(re, k)?;
        let im = self.truncated_svd(im, k)?;
        self.complex(re, Some(im))
    }

    // ------------------------------------------------------------ backward

    /// Back-propagates from the one-element tensor `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        // Leaf gradients accumulate; the loss seed is handled separately so a
        // leaf used directly as the loss also accumulates.
        let mut pending: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            let contributions = self.local_grads(idx, &g);
            for (v, contrib) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut pending[v.0] {
                    Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut res = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    res.push((*a, kernels::matmul_nt(g, bv, m, n, k)));
                }
                if self.requires_grad(*b) {
                    res.push((*b, kernels::matmul_tn(av, g, m, k, n)));
                }
                res
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                vec![
                    (*a, g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect()),
                    (*b, g.iter().zip(av).map(|(gi, ai)| gi * ai).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                vec![(*x, g.iter().zip(xs).map(|(gi, &xi)| gi * gelu_grad(xi)).collect())]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d;
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Softmax { x, tau } => {
                let d = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let s = r * d;
                    let dot: f64 = (s..s + d).map(|i| g[i] * y[i]).sum();
                    for i in s..s + d {
                        dx[i] = y[i] * (g[i] - dot) / tau;
                    }
                }
                vec![(*x, dx)]
            }
            Op::LogSoftmax { x, tau, probs } => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut dx = vec![0.0; probs.len()];
                for r in 0..probs.len() / d {
                    let s = r * d;
                    let gsum: f64 = g[s..s + d].iter().sum();
                    for i in s..s + d {
                        dx[i] = (g[i] - probs[i] * gsum) / tau;
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dx[i * k + l] -= scale;
                }
                vec![(*logits, dx)]
            }
            Op::KlDiv { p_log, q } => {
                let b = self.shape(*q)[0] as f64;
                let scale = g[0] / b;
                let qs = self.value(*q).data();
                let ps = self.value(*p_log).data();
                let dp = qs.iter().map(|qv| -qv * scale).collect();
                // The q-derivative is unbounded at q = 0; zero mass contributes nothing.
                let dq = qs
                    .iter()
                    .zip(ps)
                    .map(|(&qv, &lp)| if qv > 0.0 { (qv.ln() + 1.0 - lp) * scale } else { 0.0 })
                    .collect();
                vec![(*p_log, dp), (*q, dq)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_extents(shape, *axis);
                let mut dx = vec![0.0; outer * len * inner];
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                vec![(*x, kernels::transpose(g, n, m))]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Stack(xs) => {
                let inner = g.len() / xs.len();
                xs.iter()
                    .enumerate()
                    .map(|(i, v)| (*v, g[i * inner..(i + 1) * inner].to_vec()))
                    .collect()
            }
            Op::Select { x, index } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                let inner = g.len();
                dx[index * inner..(index + 1) * inner].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::Fft2 { z, inverse } => {
                // The forward DFT F has adjoint Fᴴ = N·F⁻¹; the normalized
                // inverse (1/N)·Fᴴ has adjoint (1/N)·F.
                let s = self.shape(*z);
                let (rows, cols) = (s[1], s[2]);
                let n = (rows * cols) as f64;
                let mut dz = fft::transform_packed(g, rows, cols, !inverse, false);
                if *inverse {
                    dz.iter_mut().for_each(|v| *v /= n);
                }
                vec![(*z, dz)]
            }
            Op::ComplexMul(a, b) => {
                let n = g.len() / 2;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![0.0; 2 * n];
                let mut db = vec![0.0; 2 * n];
                for i in 0..n {
                    let (gr, gi) = (g[i], g[n + i]);
                    // g·conj(other)
                    da[i] = gr * bv[i] + gi * bv[n + i];
                    da[n + i] = gi * bv[i] - gr * bv[n + i];
                    db[i] = gr * av[i] + gi * av[n + i];
                    db[n + i] = gi * av[i] - gr * av[n + i];
                }
                vec![(*a, da), (*b, db)]
            }
            Op::TruncatedSvd { x, basis } => match basis {
                None => vec![(*x, g.to_vec())],
                Some((u, k)) => {
                    let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let coeff = kernels::matmul_tn(u, g, m, *k, n);
                    vec![(*x, kernels::matmul(u, &coeff, m, *k, n))]
                }
            },
        }
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive and finite, got {tau}")));
    }
    Ok(())
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn last_axis(t: &Tensor, op: &'static str) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::EmptyAxis { op }),
    }
}

/// `softmax(x/τ)` along the last axis, shifted by the row max for stability.
pub fn softmax_rows(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    let d = last_axis(x, "softmax")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `log_softmax(x/τ)` along the last axis.
pub fn log_softmax_rows(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_temperature(tau)?;
    let d = last_axis(x, "log_softmax")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| ((v - max) / tau).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v = (*v - max) / tau - lse);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let m = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let i = g.constant(Tensor::eye(3));
        let mv = g.constant(m.clone());
        let out = g.matmul(i, mv).unwrap();
        assert_eq!(g.value(out), &m);

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[5., 5., 5.]));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));

        let x = g.constant(t(&[1, 2], &[1., -1.]));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gamma, beta, 1e-14).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1f64.ln(), 2f64.ln()]));
        let y = g.softmax(x, 1.0).unwrap();
        assert!((g.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-15);
        let u = g.constant(Tensor::full(&[2, 5], 3.3));
        let y = g.softmax(u, 7.0).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.cross_entropy(x, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 3, size: 3, .. }));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 6], 0.7));
        let l = g.cross_entropy(x, &[0, 1, 2, 5]).unwrap();
        assert!((g.value(l).data()[0] - 6f64.ln()).abs() < 1e-14);
        let confident = g.constant(t(&[1, 3], &[0., 800., 0.]));
        let l = g.cross_entropy(confident, &[1]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-300);
    }

    #[test]
    fn kl_zero_mass_convention_and_domain_error() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], &[0.5f64.ln(), 0.5f64.ln()]));
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let kl = g.kl_divergence(p, q).unwrap();
        assert!((g.value(kl).data()[0] - 2f64.ln()).abs() < 1e-15);
        let bad = g.constant(t(&[1, 2], &[1.5, -0.5]));
        assert!(matches!(g.kl_divergence(p, bad), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::ones(&[2, 2]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[3, 2], |i| (i as f64) - 1.5);
        let w = g.param(&Tensor::ones(&[3, 2]));
        let xc = g.constant(x.clone());
        let p = g.mul(w, xc).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), x.data());
        assert!(g.grad(xc).is_none());
    }

    #[test]
    fn detached_branch_receives_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::full(&[1, 2], 0.3));
        let d = g.detach(w);
        let prod = g.mul(w, d).unwrap();
        let s = g.sum(prod);
        g.backward(s).unwrap();
        // Only the live branch contributes: d/dw (w·c) = c.
        assert_eq!(g.grad(w).unwrap(), &[0.3, 0.3]);
        assert!(g.grad(d).is_none());
    }
}

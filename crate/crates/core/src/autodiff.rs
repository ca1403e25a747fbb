//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] replays the nodes in reverse order and adds the
//! adjoint of each leaf into that leaf's gradient buffer. Repeated calls
//! accumulate; [`Tape::zero_grad`] resets.
//!
//! ```
//! use gor::autodiff::Tape;
//! use gor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).with_grad(true));
//! let loss = tape.frobenius_sq(w).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grouping::GroupPartition;
use crate::kernels::{self, ConvGeometry};
use crate::penalty;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SubIdentity(Var),
    FrobeniusSq(Var),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    GatherCols(Var, Vec<usize>),
    Im2col(Var, ConvGeometry),
    RowsToNchw {
        x: Var,
        batch: usize,
        spatial: usize,
    },
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GlobalAvgPool(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GroupPenalties {
        w: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-group values of a [`Tape::group_penalties`] node, in partition order.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupValues {
    pub per_group: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose matmul and penalty kernels run under `exec`.
    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Moves a leaf tensor (with its gradient buffer) out of the tape.
    pub fn take_leaf(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions disagree: [{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n, self.exec);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transposed()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a), out).unwrap();
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a), out).unwrap();
        self.push(t, Op::Relu(a), &[a])
    }

    /// `A − I` for square `A`.
    pub fn sub_identity(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("sub_identity")?;
        if m != n {
            return Err(Error::shape(
                "sub_identity",
                format!("expected a square matrix, got [{m}x{n}]"),
            ));
        }
        let mut t = self.value(a).clone().with_grad(false);
        t.zero_grad();
        for i in 0..n {
            t.data_mut()[i * n + i] -= 1.0;
        }
        Ok(self.push(t, Op::SubIdentity(a), &[a]))
    }

    /// Sum of squared entries.
    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|x| x * x).sum();
        Ok(self.push(Tensor::scalar(s), Op::FrobeniusSq(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `Σ weights_i · a_i`; projects any tensor to a scalar for gradient checks.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(a)),
            ));
        }
        let s = self.data(a).iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, weights), &[a]))
    }

    /// Columns `indices` of a matrix, in the given order.
    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2("gather_group")?;
        if indices.is_empty() {
            return Err(Error::shape("gather_group", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= n) {
            return Err(Error::shape(
                "gather_group",
                format!("column {bad} out of range for [{m}x{n}]"),
            ));
        }
        let src = self.data(a);
        let g = indices.len();
        let mut out = vec![0.0; m * g];
        for i in 0..m {
            for (c, &j) in indices.iter().enumerate() {
                out[i * g + c] = src[i * n + j];
            }
        }
        let t = Tensor::new(&[m, g], out)?;
        Ok(self.push(t, Op::GatherCols(a, indices.to_vec()), &[a]))
    }

    fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::im2col(self.data(x), &geom);
        let t = Tensor::new(&[geom.patches(), geom.patch_len()], out)?;
        Ok(self.push(t, Op::Im2col(x, geom), &[x]))
    }

    /// `[B·S, C]` rows → `B×C×S` (S flattened spatial positions).
    fn rows_to_nchw(&mut self, x: Var, batch: usize, oh: usize, ow: usize) -> Result<Var> {
        let (rows, c) = self.value(x).dims2("conv2d")?;
        let spatial = oh * ow;
        debug_assert_eq!(rows, batch * spatial);
        let src = self.data(x);
        let mut out = vec![0.0; rows * c];
        for b in 0..batch {
            for s in 0..spatial {
                for ch in 0..c {
                    out[(b * c + ch) * spatial + s] = src[(b * spatial + s) * c + ch];
                }
            }
        }
        let t = Tensor::new(&[batch, c, oh, ow], out)?;
        Ok(self.push(t, Op::RowsToNchw { x, batch, spatial }, &[x]))
    }

    /// 2-D cross-correlation (no kernel flip) of `B×c×H×W` input with a
    /// `C_out×c×h×w` kernel, lowered to im2col + matmul.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, c, h, w] = self.shape(x)[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be B×c×H×W, got {:?}", self.shape(x)),
            ));
        };
        let [c_out, kc, kh, kw] = self.shape(kernel)[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be C_out×c×h×w, got {:?}", self.shape(kernel)),
            ));
        };
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels but kernel expects {kc}"),
            ));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("{kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}, stride {stride}"),
            ));
        }
        let geom = ConvGeometry {
            batch: b,
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        };
        let cols = self.im2col(x, geom)?;
        let k_rows = self.reshape(kernel, &[c_out, c * kh * kw])?;
        let k_cols = self.transpose(k_rows)?;
        let out = self.matmul(cols, k_cols)?;
        self.rows_to_nchw(out, b, geom.out_h(), geom.out_w())
    }

    /// `x[B×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, n) = self.value(x).dims2("add_row_bias")?;
        if self.value(bias).numel() != n {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for {rows}x{n} input", self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let t = Tensor::new(&[rows, n], out)?;
        Ok(self.push(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// `x[B×C×…] + bias[C]` broadcast over batch and spatial positions.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, spatial) = channel_dims(self.shape(x), "add_channel_bias")?;
        if self.value(bias).numel() != c {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {:?} for {c} channels", self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / spatial) % c])
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// Group normalization over `B×C×…` input: per sample, each block of
    /// `C/groups` channels is centred and scaled to unit variance, then an
    /// affine per-channel `gamma`, `beta` is applied.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (batch, c, spatial) = channel_dims(self.shape(x), "groupnorm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "groupnorm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(
                "groupnorm",
                format!("gamma/beta must have {c} entries"),
            ));
        }
        let xs = self.data(x);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let block = c / groups * spatial;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; batch * groups];
        let mut out = vec![0.0; xs.len()];
        for (bg, seg) in xs.chunks(block).enumerate() {
            let mean = seg.iter().sum::<f64>() / block as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[bg] = r;
            for (k, v) in seg.iter().enumerate() {
                let i = bg * block + k;
                let ch = (i / spatial) % c;
                xhat[i] = (v - mean) * r;
                out[i] = gm[ch] * xhat[i] + bt[ch];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean over spatial positions: `B×C×…` → `B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, spatial) = channel_dims(self.shape(x), "global_avg_pool")?;
        let out = self
            .data(x)
            .chunks(spatial)
            .map(|s| s.iter().sum::<f64>() / spatial as f64)
            .collect();
        let t = Tensor::new(&[b, c], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {b}x{k} logits", labels.len()),
            ));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, row) in z.chunks(k).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (j, v) in row.iter().enumerate() {
                probs[i * k + j] = (v - max).exp() / sum;
            }
            loss += max + sum.ln() - row[labels[i]];
        }
        let t = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            t,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `Σ_i ‖W_iᵀW_i − I‖_F²` over the groups of `partition`, as one fused
    /// node. Groups are evaluated under the tape's execution policy; the
    /// per-group values are returned alongside the scalar.
    pub fn group_penalties(
        &mut self,
        w: Var,
        partition: &GroupPartition,
    ) -> Result<(Var, GroupValues)> {
        let eval = penalty::layer_penalty_fused(self.value(w), partition, self.exec, true)?;
        let values = GroupValues {
            per_group: eval.per_group,
            total: eval.total,
        };
        let grad = eval.grad.expect("gradient requested");
        let v = self.push(
            Tensor::scalar(values.total),
            Op::GroupPenalties { w, grad },
            &[w],
        );
        Ok((v, values))
    }

    /// Reverse pass from a scalar `loss`; leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            for (input, delta) in self.adjoints(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        for (i, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[i].value.accumulate_grad(&g);
            }
        }
        Ok(())
    }

    /// Contributions of `node`'s output adjoint `g` to each of its inputs.
    fn adjoints(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut res = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    let bt = kernels::transpose(self.data(*b), k, n);
                    res.push((*a, kernels::matmul(g, &bt, m, n, k, self.exec)));
                }
                if self.nodes[b.0].needs_grad {
                    let at = kernels::transpose(self.data(*a), m, k);
                    res.push((*b, kernels::matmul(&at, g, k, m, n, self.exec)));
                }
                res
            }
            Op::Transpose(a) => {
                let (m, n) = (out_shape[0], out_shape[1]);
                vec![(*a, kernels::transpose(g, m, n))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Relu(a) => {
                let mask = self.data(*a);
                let d = g
                    .iter()
                    .zip(mask)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*a, d)]
            }
            Op::SubIdentity(a) => vec![(*a, g.to_vec())],
            Op::FrobeniusSq(a) => vec![(*a, self.data(*a).iter().map(|x| 2.0 * x * g[0]).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::WeightedSum(a, w) => vec![(*a, w.iter().map(|v| v * g[0]).collect())],
            Op::GatherCols(a, idx) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = idx.len();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for (c, &j) in idx.iter().enumerate() {
                        d[i * n + j] += g[i * k + c];
                    }
                }
                vec![(*a, d)]
            }
            Op::Im2col(x, geom) => vec![(*x, kernels::col2im(g, geom))],
            Op::RowsToNchw { x, batch, spatial } => {
                let c = out_shape[1];
                let mut d = vec![0.0; g.len()];
                for b in 0..*batch {
                    for s in 0..*spatial {
                        for ch in 0..c {
                            d[(b * spatial + s) * c + ch] = g[(b * c + ch) * spatial + s];
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).numel();
                let mut db = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    db[i % n] += v;
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::AddChannelBias(x, bias) => {
                let (_, c, spatial) = channel_dims(out_shape, "add_channel_bias").unwrap();
                let mut db = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    db[(i / spatial) % c] += v;
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (_, c, spatial) = channel_dims(out_shape, "groupnorm").unwrap();
                let gm = self.data(*gamma);
                let block = c / groups * spatial;
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (bg, &r) in rstd.iter().enumerate() {
                    let range = bg * block..(bg + 1) * block;
                    let (mut mean_d, mut mean_dx) = (0.0, 0.0);
                    for i in range.clone() {
                        let ch = (i / spatial) % c;
                        let dxhat = g[i] * gm[ch];
                        mean_d += dxhat;
                        mean_dx += dxhat * xhat[i];
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                    mean_d /= block as f64;
                    mean_dx /= block as f64;
                    for i in range {
                        let ch = (i / spatial) % c;
                        dx[i] = r * (g[i] * gm[ch] - mean_d - xhat[i] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::GlobalAvgPool(x) => {
                let spatial = self.value(*x).numel() / g.len();
                let d = (0..self.value(*x).numel())
                    .map(|i| g[i / spatial] / spatial as f64)
                    .collect();
                vec![(*x, d)]
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                vec![(*logits, d)]
            }
            Op::GroupPenalties { w, grad } => vec![(*w, grad.iter().map(|v| v * g[0]).collect())],
        }
    }
}

/// `(batch, channels, spatial)` for a `B×C×…` shape (spatial = 1 for rank 2).
fn channel_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            op,
            format!("expected B×C×… input, got shape {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

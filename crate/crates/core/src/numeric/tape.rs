//! Reverse-mode differentiation over a linear record of primitive applications.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs to replay its adjoint. Nodes only reference earlier nodes, so the
//! record is topologically ordered by construction and the backward pass is a
//! single reverse sweep. Gradient contributions are accumulated in that fixed
//! order, which keeps results bit-reproducible.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::kernels::{self, col2im, gemm, im2col, sigmoid, ConvGeom, Mat};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvOpts {
    /// Stride 1 with "same" padding for an odd square kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolOpts {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

const GROUP_NORM_EPS: f64 = 1e-5;

enum Op<S> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        opts: ConvOpts,
    },
    UpsampleNearest {
        x: NodeId,
        factor: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    AddRowBias {
        x: NodeId,
        b: NodeId,
    },
    AddChannelBias {
        x: NodeId,
        v: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Silu {
        x: NodeId,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Vec<S>,
        rstd: Vec<S>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: S,
    },
    Softmax {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    MseLoss {
        pred: NodeId,
        target: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Sum {
        x: NodeId,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::MatMul { .. } => "matmul",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Relu { .. } => "relu",
            Op::Silu { .. } => "silu",
            Op::GroupNorm { .. } => "group_norm",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Concat { .. } => "concat_channels",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::Reshape { .. } => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::MseLoss { .. } => "mse_loss",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Computation record: the ordered list of primitive applications of one
/// forward evaluation.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    named: IndexMap<String, NodeId>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            named: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Names of the differentiable leaves, in registration order.
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            tracked,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Named differentiable leaf. Registering an existing name returns the
    /// node already bound to it.
    pub fn input(&mut self, name: &str, value: Tensor<S>) -> NodeId {
        if let Some(&id) = self.named.get(name) {
            return id;
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.named.insert(name.to_owned(), id);
        id
    }

    /// Named differentiable leaf copied from a parameter tensor.
    pub fn param(&mut self, name: &str, value: &Tensor<S>) -> NodeId {
        if let Some(&id) = self.named.get(name) {
            return id;
        }
        self.input(name, value.clone())
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        opts: ConvOpts,
    ) -> Result<NodeId> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let (cout, cin_g, kh, kw) = self.value(w).dims4("conv2d")?;
        let g = opts.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin}, weight {:?}, groups {g}", self.value(w).shape()),
            ));
        }
        if opts.stride == 0 || h + 2 * opts.padding < kh || wd + 2 * opts.padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit {h}x{wd} with padding {}", opts.padding),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom {
            channels: cin_g,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride: opts.stride,
            padding: opts.padding,
            out_h: (h + 2 * opts.padding - kh) / opts.stride + 1,
            out_w: (wd + 2 * opts.padding - kw) / opts.stride + 1,
        };
        let cout_g = cout / g;
        let plane_in = h * wd;
        let plane_out = geom.out_h * geom.out_w;
        let rows = geom.col_rows();
        let direct = kh == 1 && kw == 1 && opts.stride == 1 && opts.padding == 0;
        let mut scratch = Vec::new();
        let mut col = if direct {
            Vec::new()
        } else {
            vec![S::zero(); rows * plane_out]
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![S::zero(); n * cout * plane_out];
        for s in 0..n {
            for gi in 0..g {
                let img = &xv[(s * cin + gi * cin_g) * plane_in..(s * cin + (gi + 1) * cin_g) * plane_in];
                let wg = &wv[gi * cout_g * rows..(gi + 1) * cout_g * rows];
                let dst = &mut out
                    [(s * cout + gi * cout_g) * plane_out..(s * cout + (gi + 1) * cout_g) * plane_out];
                let colm = if direct {
                    img
                } else {
                    im2col(img, &geom, &mut scratch, &mut col);
                    &col[..]
                };
                gemm(
                    Mat::new(wg, cout_g, rows),
                    Mat::new(colm, rows, plane_out),
                    dst,
                    S::zero(),
                );
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for c in 0..cout {
                    let bc = bv[c];
                    out[(s * cout + c) * plane_out..(s * cout + c + 1) * plane_out]
                        .iter_mut()
                        .for_each(|v| *v += bc);
                }
            }
        }
        let value = Tensor::new(vec![n, cout, geom.out_h, geom.out_w], out)?;
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(value, Op::Conv2d { x, w, b, opts }, tracked)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("upsample_nearest")?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    dst[oy * ow + ox] = row[ox / factor];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let tracked = self.tracked(x);
        self.push(value, Op::UpsampleNearest { x, factor }, tracked)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if k != kb {
            return Err(Error::shape("matmul", format!("{m}x{k} times {kb}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            S::zero(),
        );
        let value = Tensor::new(vec![m, n], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul { a, b }, tracked)
    }

    /// `x[i, j] + b[j]` for `x` of shape `(rows, features)`.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, f) = self.value(x).dims2("add_row_bias")?;
        if self.value(b).shape() != [f] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for {f} features", self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(f) {
            for (v, &bj) in row.iter_mut().zip(&bv) {
                *v += bj;
            }
        }
        let tracked = self.tracked(x) || self.tracked(b);
        self.push(value, Op::AddRowBias { x, b }, tracked)
    }

    /// `x[n, c, :, :] + v[n, c]`: per-sample channel offsets.
    pub fn add_channel_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("add_channel_bias")?;
        if self.value(v).shape() != [n, c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("offsets {:?} for activations {:?}", self.value(v).shape(), [n, c, h, w]),
            ));
        }
        let vv = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (plane, &off) in value.data_mut().chunks_mut(h * w).zip(&vv) {
            plane.iter_mut().for_each(|p| *p += off);
        }
        let tracked = self.tracked(x) || self.tracked(v);
        self.push(value, Op::AddChannelBias { x, v }, tracked)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.max(S::zero()));
        let tracked = self.tracked(x);
        self.push(value, Op::Relu { x }, tracked)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let tracked = self.tracked(x);
        self.push(value, Op::Silu { x }, tracked)
    }

    /// Group normalization over `(channels / groups) x H x W` blocks with a
    /// per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("group_norm", "affine parameters must have one entry per channel"));
        }
        let cg = c / groups;
        let block = cg * h * w;
        let eps = S::from_f64_lossy(GROUP_NORM_EPS);
        let count = S::from_count(block);
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for (bi, (src, dst)) in xv.chunks(block).zip(out.chunks_mut(block)).enumerate() {
            let mean = src.iter().copied().sum::<S>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / count;
            let rstd = S::one() / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g0 = (bi % groups) * cg;
            for (ci, (s, d)) in src.chunks(h * w).zip(dst.chunks_mut(h * w)).enumerate() {
                let (ga, be) = (gv[g0 + ci], bv[g0 + ci]);
                for (sv, dv) in s.iter().zip(d.iter_mut()) {
                    *dv = (*sv - mean) * rstd * ga + be;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            tracked,
        )
    }

    pub fn max_pool2d(&mut self, x: NodeId, opts: PoolOpts) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2d")?;
        let PoolOpts {
            kernel,
            stride,
            padding,
        } = opts;
        if kernel == 0 || stride == 0 || padding >= kernel || h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(Error::shape("max_pool2d", format!("window {opts:?} on {h}x{w}")));
        }
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::neg_infinity();
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let tracked = self.tracked(x);
        self.push(value, Op::MaxPool { x, argmax }, tracked)
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let inv = S::one() / S::from_count(h * w);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<S>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let tracked = self.tracked(x);
        self.push(value, Op::GlobalAvgPool { x }, tracked)
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
        let shape0 = self.value(*first).shape().to_vec();
        if shape0.len() < 2 {
            return Err(Error::shape("concat_channels", format!("rank of {shape0:?} below 2")));
        }
        let n = shape0[0];
        let inner: usize = shape0[2..].iter().product();
        let mut channels = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != shape0.len() || s[0] != n || s[2..] != shape0[2..] {
                return Err(Error::shape("concat_channels", format!("{s:?} vs {shape0:?}")));
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * inner);
        for s in 0..n {
            for &id in inputs {
                let v = self.value(id);
                let chunk = v.shape()[1] * inner;
                data.extend_from_slice(&v.data()[s * chunk..(s + 1) * chunk]);
            }
        }
        let mut shape = shape0.clone();
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        let tracked = inputs.iter().any(|&id| self.tracked(id));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            tracked,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add { a, b }, tracked)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul { a, b }, tracked)
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        let value = self.value(x).scale(factor);
        let tracked = self.tracked(x);
        self.push(value, Op::Scale { x, factor }, tracked)
    }

    /// Row-wise softmax of a `(rows, classes)` matrix.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("softmax")?;
        let mut out = vec![S::zero(); r * c];
        kernels::softmax_rows(self.value(x).data(), c, &mut out);
        let value = Tensor::new(vec![r, c], out)?;
        let tracked = self.tracked(x);
        self.push(value, Op::Softmax { x }, tracked)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let tracked = self.tracked(x);
        self.push(value, Op::Reshape { x }, tracked)
    }

    /// `(N, ...) -> (N, prod(...))`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// Embedding lookup: rows of a `(K, D)` table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (k, d) = self.value(table).dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= k {
                return Err(Error::LabelOutOfRange { label: i, classes: k });
            }
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let tracked = self.tracked(table);
        self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        )
    }

    /// Mean squared difference over every element.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let total: S = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(total / S::from_count(p.len()));
        let tracked = self.tracked(pred) || self.tracked(target);
        self.push(value, Op::MseLoss { pred, target }, tracked)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, c) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![S::zero(); n * c];
        kernels::softmax_rows(lv, c, &mut probs);
        let total: S = lv
            .chunks(c)
            .zip(labels)
            .map(|(row, &l)| kernels::log_sum_exp(row) - row[l])
            .sum();
        let value = Tensor::scalar(total / S::from_count(n));
        let tracked = self.tracked(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::Sum { x }, tracked)
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients<S>> {
        let seed = Tensor::full(self.value(output).shape().to_vec(), S::one());
        self.backward(output, seed)
    }

    /// Adjoint accumulation: the gradient of `<output, seed>` with respect to
    /// every named leaf. Leaves the output does not depend on get zeros.
    pub fn backward(&self, output: NodeId, seed: Tensor<S>) -> Result<Gradients<S>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Replay(format!("node {} not in record", output.0)));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(node, &g, &mut grads)?;
        }
        let mut named = IndexMap::with_capacity(self.named.len());
        for (name, &id) in &self.named {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(id).shape().to_vec()));
            named.insert(name.clone(), g);
        }
        Ok(Gradients { named })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
        if !self.tracked(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn node_backward(
        &self,
        node: &Node<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, opts } => self.conv2d_backward(*x, *w, *b, *opts, g, grads)?,
            Op::UpsampleNearest { x, factor } => {
                if self.tracked(*x) {
                    let (n, c, h, w) = self.value(*x).dims4("upsample_nearest")?;
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = vec![S::zero(); n * c * h * w];
                    for p in 0..n * c {
                        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let (_, n) = self.value(*b).dims2("matmul")?;
                if self.tracked(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(
                        Mat::new(g.data(), m, n),
                        Mat::t(self.value(*b).data(), k, n),
                        &mut da,
                        S::zero(),
                    );
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.tracked(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(
                        Mat::t(self.value(*a).data(), m, k),
                        Mat::new(g.data(), m, n),
                        &mut db,
                        S::zero(),
                    );
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::AddRowBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*b) {
                    let f = self.value(*b).len();
                    let mut db = vec![S::zero(); f];
                    for row in g.data().chunks(f) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![f], db)?);
                }
            }
            Op::AddChannelBias { x, v } => {
                self.accumulate(grads, *x, g.clone());
                if self.tracked(*v) {
                    let (n, c, h, w) = self.value(*x).dims4("add_channel_bias")?;
                    let dv = g
                        .data()
                        .chunks(h * w)
                        .map(|p| p.iter().copied().sum::<S>())
                        .collect();
                    self.accumulate(grads, *v, Tensor::new(vec![n, c], dv)?);
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .zip_map(g, |xv, gv| if xv > S::zero() { gv } else { S::zero() })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Silu { x } => {
                let dx = self.value(*x).zip_map(g, |xv, gv| {
                    let s = sigmoid(xv);
                    gv * s * (S::one() + xv * (S::one() - s))
                })?;
                self.accumulate(grads, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.group_norm_backward(*x, *gamma, *beta, *groups, mean, rstd, g, grads)?,
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).shape().to_vec());
                let d = dx.data_mut();
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d[i] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4("global_avg_pool")?;
                let inv = S::one() / S::from_count(h * w);
                let mut dx = Vec::with_capacity(n * c * h * w);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, h * w));
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            Op::Concat { inputs } => {
                let shape = node.value.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for &id in inputs {
                    let cs = self.value(id).shape()[1] * inner;
                    if self.tracked(id) {
                        let mut d = Vec::with_capacity(n * cs);
                        for s in 0..n {
                            d.extend_from_slice(&g.data()[s * total + offset..s * total + offset + cs]);
                        }
                        self.accumulate(grads, id, Tensor::new(self.value(id).shape().to_vec(), d)?);
                    }
                    offset += cs;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                if self.tracked(*a) {
                    let da = g.zip_map(self.value(*b), |gv, bv| gv * bv)?;
                    self.accumulate(grads, *a, da);
                }
                if self.tracked(*b) {
                    let db = g.zip_map(self.value(*a), |gv, av| gv * av)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale { x, factor } => self.accumulate(grads, *x, g.scale(*factor)),
            Op::Softmax { x } => {
                let (_, c) = node.value.dims2("softmax")?;
                let y = node.value.data();
                let mut dx = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.data().chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).shape().to_vec());
                let d = self.value(*table).shape()[1];
                let dd = dt.data_mut();
                for (row, &i) in g.data().chunks(d).zip(ids) {
                    for (t, &v) in dd[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *t += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MseLoss { pred, target } => {
                let p = self.value(*pred);
                let two = S::from_f64_lossy(2.0) * g.item() / S::from_count(p.len());
                let dp = p.zip_map(self.value(*target), |a, b| two * (a - b))?;
                if self.tracked(*target) {
                    self.accumulate(grads, *target, dp.scale(-S::one()));
                }
                self.accumulate(grads, *pred, dp);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (n, c) = self.value(*logits).dims2("cross_entropy")?;
                let scale = g.item() / S::from_count(n);
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(c).zip(labels) {
                    row[l] -= S::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, Tensor::new(vec![n, c], d)?);
            }
            Op::Sum { x } => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), gv));
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        opts: ConvOpts,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let (cout, cin_g, kh, kw) = self.value(w).dims4("conv2d")?;
        let (_, _, oh, ow) = g.dims4("conv2d")?;
        let groups = opts.groups;
        let cout_g = cout / groups;
        let geom = ConvGeom {
            channels: cin_g,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride: opts.stride,
            padding: opts.padding,
            out_h: oh,
            out_w: ow,
        };
        let rows = geom.col_rows();
        let plane_in = h * wd;
        let plane_out = oh * ow;
        let direct = kh == 1 && kw == 1 && opts.stride == 1 && opts.padding == 0;
        let need_dx = self.tracked(x);
        let need_dw = self.tracked(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gv = g.data();
        let mut dw = vec![S::zero(); if need_dw { wv.len() } else { 0 }];
        let mut dx = vec![S::zero(); if need_dx { xv.len() } else { 0 }];
        let mut scratch = Vec::new();
        let mut col = vec![S::zero(); if direct { 0 } else { rows * plane_out }];
        let mut dcol = vec![S::zero(); if direct || !need_dx { 0 } else { rows * plane_out }];
        for s in 0..n {
            for gi in 0..groups {
                let in_range = (s * cin + gi * cin_g) * plane_in..(s * cin + (gi + 1) * cin_g) * plane_in;
                let gy = &gv[(s * cout + gi * cout_g) * plane_out..(s * cout + (gi + 1) * cout_g) * plane_out];
                let w_range = gi * cout_g * rows..(gi + 1) * cout_g * rows;
                if need_dw {
                    let colm = if direct {
                        &xv[in_range.clone()]
                    } else {
                        im2col(&xv[in_range.clone()], &geom, &mut scratch, &mut col);
                        &col[..]
                    };
                    gemm(
                        Mat::new(gy, cout_g, plane_out),
                        Mat::t(colm, rows, plane_out),
                        &mut dw[w_range.clone()],
                        S::one(),
                    );
                }
                if need_dx {
                    let wg = Mat::t(&wv[w_range], cout_g, rows);
                    if direct {
                        gemm(wg, Mat::new(gy, cout_g, plane_out), &mut dx[in_range], S::one());
                    } else {
                        gemm(wg, Mat::new(gy, cout_g, plane_out), &mut dcol, S::zero());
                        col2im(&dcol, &geom, &mut dx[in_range]);
                    }
                }
            }
        }
        if need_dw {
            self.accumulate(grads, w, Tensor::new(self.value(w).shape().to_vec(), dw)?);
        }
        if need_dx {
            self.accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
        }
        if let Some(b) = b.filter(|&b| self.tracked(b)) {
            let mut db = vec![S::zero(); cout];
            for (i, p) in gv.chunks(plane_out).enumerate() {
                db[i % cout] += p.iter().copied().sum::<S>();
            }
            self.accumulate(grads, b, Tensor::new(vec![cout], db)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: &[S],
        rstd: &[S],
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) -> Result<()> {
        let (_, c, h, w) = self.value(x).dims4("group_norm")?;
        let cg = c / groups;
        let plane = h * w;
        let block = cg * plane;
        let count = S::from_count(block);
        let xv = self.value(x).data();
        let gam = self.value(gamma).data();
        let mut dgamma = vec![S::zero(); c];
        let mut dbeta = vec![S::zero(); c];
        let mut dx = vec![S::zero(); xv.len()];
        for bi in 0..xv.len() / block {
            let src = &xv[bi * block..(bi + 1) * block];
            let gy = &g.data()[bi * block..(bi + 1) * block];
            let (mu, rs) = (mean[bi], rstd[bi]);
            let g0 = (bi % groups) * cg;
            let mut sum_dxhat = S::zero();
            let mut sum_dxhat_xhat = S::zero();
            for ci in 0..cg {
                let ch = g0 + ci;
                for j in ci * plane..(ci + 1) * plane {
                    let xhat = (src[j] - mu) * rs;
                    dgamma[ch] += gy[j] * xhat;
                    dbeta[ch] += gy[j];
                    let dxhat = gy[j] * gam[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            let dst = &mut dx[bi * block..(bi + 1) * block];
            for ci in 0..cg {
                let ga = gam[g0 + ci];
                for j in ci * plane..(ci + 1) * plane {
                    let xhat = (src[j] - mu) * rs;
                    dst[j] = rs * (gy[j] * ga - m1 - xhat * m2);
                }
            }
        }
        self.accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
        self.accumulate(grads, gamma, Tensor::new(vec![c], dgamma)?);
        self.accumulate(grads, beta, Tensor::new(vec![c], dbeta)?);
        Ok(())
    }
}

/// Gradients of named leaves, in registration order.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    named: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.named.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.named.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> IndexMap<String, Tensor<S>> {
        self.named
    }

    pub fn len(&self) -> usize {
        self.named.len()
    }

    pub fn is_empty(&self) -> bool {
        self.named.is_empty()
    }
}

/// Evaluates a program over named inputs, returning the output value and the
/// record needed for [`Tape::backward`].
pub fn forward_eval<S, F>(inputs: &HashMap<String, Tensor<S>>, program: F) -> Result<(Tensor<S>, Tape<S>, NodeId)>
where
    S: Scalar,
    F: FnOnce(&mut Tape<S>, &HashMap<String, NodeId>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let mut names: Vec<&String> = inputs.keys().collect();
    names.sort();
    let mut ids = HashMap::with_capacity(inputs.len());
    for name in names {
        let id = tape.input(name, inputs[name].clone());
        ids.insert(name.clone(), id);
    }
    let out = program(&mut tape, &ids)?;
    Ok((tape.value(out).clone(), tape, out))
}

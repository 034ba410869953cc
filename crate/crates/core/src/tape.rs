//! Reverse-mode automatic differentiation over the closed op set the
//! ensemble graph needs.
//!
//! The tape is an arena of value nodes; every op validates shapes, computes
//! its forward value, scans the result for non-finite entries (an error,
//! never silent) and records itself for the backward replay. Backward walks
//! the ops in exact reverse execution order and accumulates one gradient
//! per registered parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::softlog::DOMAIN_TOL;
use crate::tensor::Tensor;

/// Handle to a value node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Gradients keyed by registered parameter name.
pub type GradMap<E> = BTreeMap<String, Tensor<E>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    /// Normalize with statistics of the current batch (training).
    Batch,
    /// Normalize with externally supplied running statistics (inference).
    Fixed,
}

/// Batch statistics observed by a batch-mode normalization, for running
/// stat updates by the caller.
#[derive(Debug, Clone)]
pub struct BnBatchStats<E: Scalar> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

pub struct BnOutput<E: Scalar> {
    pub id: ValueId,
    pub batch_stats: Option<BnBatchStats<E>>,
}

enum Op<E: Scalar> {
    Leaf,
    Matmul {
        a: ValueId,
        b: ValueId,
    },
    /// out = a * b^T with b stored row-major (n,k)
    MatmulTB {
        a: ValueId,
        b: ValueId,
    },
    Conv2d {
        input: ValueId,
        weight: ValueId,
    },
    DepthwiseConv2d {
        input: ValueId,
        weight: ValueId,
    },
    PointwiseConv {
        input: ValueId,
        weight: ValueId,
    },
    Relu {
        input: ValueId,
    },
    BatchNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mode: BnMode,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    MaxPool {
        input: ValueId,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: ValueId,
        window: usize,
        stride: usize,
    },
    Concat {
        inputs: Vec<ValueId>,
        axis: usize,
    },
    Reshape {
        input: ValueId,
    },
    AffineCombine {
        inputs: Vec<ValueId>,
        weights: ValueId,
    },
    Softmax {
        input: ValueId,
    },
    Softlog {
        input: ValueId,
    },
    Log {
        input: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        input: ValueId,
        c: E,
    },
    SumAll {
        input: ValueId,
    },
}

impl<E: Scalar> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatmulTB { .. } => "matmul_tb",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::PointwiseConv { .. } => "pointwise_conv",
            Op::Relu { .. } => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool { .. } => "avgpool",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::AffineCombine { .. } => "affine_combine",
            Op::Softmax { .. } => "softmax",
            Op::Softlog { .. } => "softlog",
            Op::Log { .. } => "log",
            Op::Mul { .. } => "mul",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

pub struct Tape<E: Scalar = f64> {
    nodes: Vec<Tensor<E>>,
    ops: Vec<Op<E>>,
    params: Vec<(String, ValueId)>,
    grad_enabled: bool,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Forward-only tape: values are computed but nothing is recorded for
    /// backward.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded ops whose name matches, a probe for structural
    /// tests (e.g. "each branch convolves exactly once per forward pass").
    pub fn count_ops(&self, name: &str) -> usize {
        self.ops.iter().filter(|op| op.name() == name).count()
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>) -> Result<ValueId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let id = ValueId(self.nodes.len());
        self.nodes.push(value);
        self.ops.push(if self.grad_enabled { op } else { Op::Leaf });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor<E>) -> Result<ValueId> {
        self.push(Op::Leaf, value)
    }

    /// Leaf registered in the parameter registry; backward reports exactly
    /// one gradient per registered name (zeros when untouched).
    pub fn param(&mut self, name: &str, value: Tensor<E>) -> Result<ValueId> {
        let id = self.leaf(value)?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    fn dims2(&self, op: &'static str, id: ValueId) -> Result<(usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn dims4(&self, op: &'static str, id: ValueId) -> Result<(usize, usize, usize, usize)> {
        let s = self.value(id).shape();
        if s.len() != 4 {
            return Err(Error::shape(op, format!("expected rank 4, got {s:?}")));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], data)?)
    }

    /// out (m,n) = a (m,k) * b^T where b is stored (n,k).
    pub fn matmul_tb(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.dims2("matmul_tb", a)?;
        let (n, kb) = self.dims2("matmul_tb", b)?;
        if ka != kb {
            return Err(Error::shape(
                "matmul_tb",
                format!("{:?} x {:?}^T", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = kernels::matmul_tb(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.push(Op::MatmulTB { a, b }, Tensor::new(vec![m, n], data)?)
    }

    /// Stride-1 valid convolution; input (B,C,H,W), weight (Co,C,L,L).
    pub fn conv2d(&mut self, input: ValueId, weight: ValueId) -> Result<ValueId> {
        let (b, c, h, w) = self.dims4("conv2d", input)?;
        let (co, ci, l, l2) = self.dims4("conv2d", weight)?;
        if ci != c || l != l2 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} vs weight {:?}",
                    self.value(input).shape(),
                    self.value(weight).shape()
                ),
            ));
        }
        let (ho, wo) = match (kernels::out_extent(h, l, 1), kernels::out_extent(w, l, 1)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("window {l} does not fit extent {h}x{w}"),
                ))
            }
        };
        let cll = c * l * l;
        let mut out = vec![E::ZERO; b * co * ho * wo];
        let mut cols = vec![E::ZERO; cll * ho * wo];
        let img_len = c * h * w;
        for bi in 0..b {
            let img = &self.value(input).data()[bi * img_len..(bi + 1) * img_len];
            kernels::im2col(img, c, h, w, l, &mut cols);
            let o = kernels::matmul(self.value(weight).data(), &cols, co, cll, ho * wo);
            out[bi * co * ho * wo..(bi + 1) * co * ho * wo].copy_from_slice(&o);
        }
        self.push(
            Op::Conv2d { input, weight },
            Tensor::new(vec![b, co, ho, wo], out)?,
        )
    }

    /// Channelwise stride-1 spatial convolution; weight (C,L,L).
    pub fn depthwise_conv2d(&mut self, input: ValueId, weight: ValueId) -> Result<ValueId> {
        let (b, c, h, w) = self.dims4("depthwise_conv2d", input)?;
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 3 || ws[0] != c || ws[1] != ws[2] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input {:?} vs weight {ws:?}", self.value(input).shape()),
            ));
        }
        let l = ws[1];
        let (ho, wo) = match (kernels::out_extent(h, l, 1), kernels::out_extent(w, l, 1)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("window {l} does not fit extent {h}x{w}"),
                ))
            }
        };
        let mut out = vec![E::ZERO; b * c * ho * wo];
        let inp = self.value(input).data();
        let wdat = self.value(weight).data();
        for bi in 0..b {
            for ch in 0..c {
                let img = &inp[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
                let ker = &wdat[ch * l * l..(ch + 1) * l * l];
                let dst = &mut out[(bi * c + ch) * ho * wo..(bi * c + ch + 1) * ho * wo];
                for i in 0..l {
                    for j in 0..l {
                        let kv = ker[i * l + j];
                        for oy in 0..ho {
                            let src = (oy + i) * w + j;
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            let srow = &img[src..src + wo];
                            for (d, &s) in drow.iter_mut().zip(srow) {
                                *d += kv * s;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Op::DepthwiseConv2d { input, weight },
            Tensor::new(vec![b, c, ho, wo], out)?,
        )
    }

    /// 1x1 convolution mixing channels; weight (Co,Ci).
    pub fn pointwise_conv(&mut self, input: ValueId, weight: ValueId) -> Result<ValueId> {
        let (b, c, h, w) = self.dims4("pointwise_conv", input)?;
        let (co, ci) = self.dims2("pointwise_conv", weight)?;
        if ci != c {
            return Err(Error::shape(
                "pointwise_conv",
                format!("input {:?} vs weight {:?}", self.value(input).shape(), (co, ci)),
            ));
        }
        let hw = h * w;
        let mut out = vec![E::ZERO; b * co * hw];
        for bi in 0..b {
            let img = &self.value(input).data()[bi * c * hw..(bi + 1) * c * hw];
            let o = kernels::matmul(self.value(weight).data(), img, co, c, hw);
            out[bi * co * hw..(bi + 1) * co * hw].copy_from_slice(&o);
        }
        self.push(
            Op::PointwiseConv { input, weight },
            Tensor::new(vec![b, co, h, w], out)?,
        )
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId> {
        let out = self.value(input).map(|v| v.maxs(E::ZERO));
        self.push(Op::Relu { input }, out)
    }

    /// Per-channel normalization over (B,H,W). In [`BnMode::Batch`] the
    /// statistics come from the batch and are returned for running-stat
    /// updates; in [`BnMode::Fixed`] the supplied running stats are used.
    pub fn batchnorm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: E,
        fixed_stats: Option<(&[E], &[E])>,
    ) -> Result<BnOutput<E>> {
        let (b, c, h, w) = self.dims4("batchnorm", input)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "{c} channels vs gamma {} / beta {}",
                    self.value(gamma).len(),
                    self.value(beta).len()
                ),
            ));
        }
        let n = b * h * w;
        let hw = h * w;
        let inp = self.value(input).data();
        let (mode, mean, var) = match fixed_stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape(
                        "batchnorm",
                        format!("running stats length {} vs {c} channels", m.len()),
                    ));
                }
                (BnMode::Fixed, m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![E::ZERO; c];
                let mut var = vec![E::ZERO; c];
                let nf = E::from_f64(n as f64);
                for ch in 0..c {
                    let mut s = E::ZERO;
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for &v in &inp[base..base + hw] {
                            s += v;
                        }
                    }
                    let m = s / nf;
                    let mut sq = E::ZERO;
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for &v in &inp[base..base + hw] {
                            let d = v - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / nf;
                }
                (BnMode::Batch, mean, var)
            }
        };
        let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut out = vec![E::ZERO; inp.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], be[ch]);
                for (o, &v) in out[base..base + hw].iter_mut().zip(&inp[base..base + hw]) {
                    *o = gc * ((v - m) * is) + bc;
                }
            }
        }
        let batch_stats = match mode {
            BnMode::Batch => Some(BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            BnMode::Fixed => None,
        };
        let id = self.push(
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
            },
            Tensor::new(vec![b, c, h, w], out)?,
        )?;
        Ok(BnOutput { id, batch_stats })
    }

    fn pool_dims(
        &self,
        op: &'static str,
        input: ValueId,
        window: usize,
        stride: usize,
    ) -> Result<(usize, usize, usize, usize, usize, usize)> {
        let (b, c, h, w) = self.dims4(op, input)?;
        match (
            kernels::out_extent(h, window, stride),
            kernels::out_extent(w, window, stride),
        ) {
            (Some(ho), Some(wo)) => Ok((b, c, h, w, ho, wo)),
            _ => Err(Error::shape(
                op,
                format!("window {window} stride {stride} does not fit extent {h}x{w}"),
            )),
        }
    }

    /// Max pooling, ties resolved to the first element in scan order so
    /// forward and backward stay deterministic.
    pub fn maxpool(&mut self, input: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let (b, c, h, w, ho, wo) = self.pool_dims("maxpool", input, window, stride)?;
        let inp = self.value(input).data();
        let mut out = vec![E::ZERO; b * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        let mut oi = 0;
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = E::neg_infinity();
                        let mut best_idx = 0usize;
                        for i in 0..window {
                            let row = base + (oy * stride + i) * w + ox * stride;
                            for j in 0..window {
                                let v = inp[row + j];
                                if v > best {
                                    best = v;
                                    best_idx = row + j;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        self.push(
            Op::MaxPool { input, argmax },
            Tensor::new(vec![b, c, ho, wo], out)?,
        )
    }

    pub fn avgpool(&mut self, input: ValueId, window: usize, stride: usize) -> Result<ValueId> {
        let (b, c, h, w, ho, wo) = self.pool_dims("avgpool", input, window, stride)?;
        let inp = self.value(input).data();
        let scale = E::ONE / E::from_f64((window * window) as f64);
        let mut out = vec![E::ZERO; b * c * ho * wo];
        let mut oi = 0;
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = E::ZERO;
                        for i in 0..window {
                            let row = base + (oy * stride + i) * w + ox * stride;
                            for j in 0..window {
                                s += inp[row + j];
                            }
                        }
                        out[oi] = s * scale;
                        oi += 1;
                    }
                }
            }
        }
        self.push(
            Op::AvgPool {
                input,
                window,
                stride,
            },
            Tensor::new(vec![b, c, ho, wo], out)?,
        )
    }

    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut mids = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {first:?} vs {s:?} on axis {axis}"),
                ));
            }
            mids.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total_mid: usize = mids.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total_mid;
        let mut out = vec![E::ZERO; outer * total_mid * inner];
        for o in 0..outer {
            let mut offset = 0;
            for (idx, &id) in inputs.iter().enumerate() {
                let chunk = mids[idx] * inner;
                let src = &self.value(id).data()[o * chunk..(o + 1) * chunk];
                let dst_base = o * total_mid * inner + offset;
                out[dst_base..dst_base + chunk].copy_from_slice(src);
                offset += chunk;
            }
        }
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            Tensor::new(shape, out)?,
        )
    }

    pub fn reshape(&mut self, input: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let out = self.value(input).clone().reshaped(shape)?;
        self.push(Op::Reshape { input }, out)
    }

    /// Weighted sum of same-shape tensors with a learnable weight vector:
    /// `out = sum_b w[b] * x_b`.
    pub fn affine_combine(&mut self, inputs: &[ValueId], weights: ValueId) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::shape("affine_combine", "no inputs"));
        }
        let wlen = self.value(weights).len();
        if wlen != inputs.len() {
            return Err(Error::shape(
                "affine_combine",
                format!("{} inputs vs {wlen} weights", inputs.len()),
            ));
        }
        let shape = self.value(inputs[0]).shape().to_vec();
        for &id in inputs {
            if self.value(id).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "affine_combine",
                    format!("{:?} vs {shape:?}", self.value(id).shape()),
                ));
            }
        }
        let mut out = vec![E::ZERO; shape.iter().product()];
        for (bi, &id) in inputs.iter().enumerate() {
            let wv = self.value(weights).data()[bi];
            for (o, &v) in out.iter_mut().zip(self.value(id).data()) {
                *o += wv * v;
            }
        }
        self.push(
            Op::AffineCombine {
                inputs: inputs.to_vec(),
                weights,
            },
            Tensor::new(shape, out)?,
        )
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, input: ValueId) -> Result<ValueId> {
        let shape = self.value(input).shape().to_vec();
        let k = *shape.last().ok_or_else(|| Error::shape("softmax", "rank 0"))?;
        let rows = self.value(input).len() / k;
        let out = kernels::softmax_rows(self.value(input).data(), rows, k);
        self.push(Op::Softmax { input }, Tensor::new(shape, out)?)
    }

    /// Elementwise softlog on probabilities: inputs must lie in [0,1]
    /// within 1e-9 and are clamped before `ln(a*x + b)`.
    pub fn softlog(&mut self, input: ValueId) -> Result<ValueId> {
        let (a, b) = (
            E::from_f64(crate::softlog::alpha_e()),
            E::from_f64(crate::softlog::beta_e()),
        );
        let lo = E::from_f64(-DOMAIN_TOL);
        let hi = E::from_f64(1.0 + DOMAIN_TOL);
        for &v in self.value(input).data() {
            if v < lo || v > hi {
                return Err(Error::domain(
                    "softlog",
                    format!("input {v} outside [0,1] tolerance band"),
                ));
            }
        }
        let out = self
            .value(input)
            .map(|v| (a * v.mins(E::ONE).maxs(E::ZERO) + b).ln());
        self.push(Op::Softlog { input }, out)
    }

    /// Plain elementwise logarithm; kept for the stress mode that
    /// reproduces cross-entropy explosion, where `ln(0)` is the point.
    pub fn log(&mut self, input: ValueId) -> Result<ValueId> {
        let out = self.value(input).map(|v| v.ln());
        self.push(Op::Log { input }, out)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        self.push(Op::Mul { a, b }, out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        self.push(Op::Add { a, b }, out)
    }

    pub fn scale(&mut self, input: ValueId, c: E) -> Result<ValueId> {
        let out = self.value(input).map(|v| v * c);
        self.push(Op::Scale { input, c }, out)
    }

    pub fn sum_all(&mut self, input: ValueId) -> Result<ValueId> {
        let mut s = E::ZERO;
        for &v in self.value(input).data() {
            s += v;
        }
        self.push(Op::SumAll { input }, Tensor::scalar(s))
    }

    /// Reverse pass from a scalar loss. Returns one accumulated gradient
    /// per registered parameter; parameters the loss never touched get
    /// zeros.
    pub fn backward(&self, loss: ValueId) -> Result<GradMap<E>> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument(
                "backward on a no-grad tape".into(),
            ));
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lt.shape()),
            ));
        }
        if !lt.all_finite() {
            // Eager op checks make this unreachable in practice, but keep
            // the contract: name the first op holding a non-finite value.
            for (i, node) in self.nodes.iter().enumerate() {
                if !node.all_finite() {
                    return Err(Error::NonFinite {
                        op: self.ops[i].name().to_string(),
                    });
                }
            }
            return Err(Error::NonFinite {
                op: "backward".to_string(),
            });
        }

        let mut grads: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![E::ONE]);

        for idx in (0..self.ops.len()).rev() {
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            self.backward_op(idx, &dout, &mut grads);
            // Re-install for parameter collection below.
            grads[idx] = Some(dout);
        }

        let mut map = GradMap::new();
        for (name, id) in &self.params {
            let t = match &grads[id.0] {
                Some(g) => Tensor::new(self.value(*id).shape().to_vec(), g.clone())?,
                None => Tensor::zeros(self.value(*id).shape().to_vec()),
            };
            map.insert(name.clone(), t);
        }
        Ok(map)
    }

    fn accumulate(grads: &mut [Option<Vec<E>>], id: ValueId, delta: &[E]) {
        match &mut grads[id.0] {
            Some(g) => {
                for (gv, &d) in g.iter_mut().zip(delta) {
                    *gv += d;
                }
            }
            None => grads[id.0] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, idx: usize, dout: &[E], grads: &mut [Option<Vec<E>>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let da = kernels::matmul_tb(dout, self.value(*b).data(), m, n, k);
                let db = kernels::matmul_ta(self.value(*a).data(), dout, m, k, n);
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *b, &db);
            }
            Op::MatmulTB { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                // out = a * b^T; da = dout * b, db = dout^T * a
                let da = kernels::matmul(dout, self.value(*b).data(), m, n, k);
                let db = kernels::matmul_ta(dout, self.value(*a).data(), m, n, k);
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *b, &db);
            }
            Op::Conv2d { input, weight } => {
                let s = self.value(*input).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let ws = self.value(*weight).shape();
                let (co, l) = (ws[0], ws[2]);
                let (ho, wo) = (h - l + 1, w - l + 1);
                let cll = c * l * l;
                let img_len = c * h * w;
                let out_len = co * ho * wo;
                let mut dinput = vec![E::ZERO; b * img_len];
                let mut dweight = vec![E::ZERO; co * cll];
                let mut cols = vec![E::ZERO; cll * ho * wo];
                for bi in 0..b {
                    let img = &self.value(*input).data()[bi * img_len..(bi + 1) * img_len];
                    kernels::im2col(img, c, h, w, l, &mut cols);
                    let do_mat = &dout[bi * out_len..(bi + 1) * out_len];
                    // dW += dOut (co, howo) * cols^T
                    let dw = kernels::matmul_tb(do_mat, &cols, co, ho * wo, cll);
                    for (acc, v) in dweight.iter_mut().zip(dw) {
                        *acc += v;
                    }
                    // dcols = W^T (cll, co) * dOut
                    let dcols =
                        kernels::matmul_ta(self.value(*weight).data(), do_mat, co, cll, ho * wo);
                    kernels::col2im_add(
                        &dcols,
                        c,
                        h,
                        w,
                        l,
                        &mut dinput[bi * img_len..(bi + 1) * img_len],
                    );
                }
                Self::accumulate(grads, *input, &dinput);
                Self::accumulate(grads, *weight, &dweight);
            }
            Op::DepthwiseConv2d { input, weight } => {
                let s = self.value(*input).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let l = self.value(*weight).shape()[1];
                let (ho, wo) = (h - l + 1, w - l + 1);
                let inp = self.value(*input).data();
                let wdat = self.value(*weight).data();
                let mut dinput = vec![E::ZERO; inp.len()];
                let mut dweight = vec![E::ZERO; wdat.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let ibase = (bi * c + ch) * h * w;
                        let obase = (bi * c + ch) * ho * wo;
                        let ker = &wdat[ch * l * l..(ch + 1) * l * l];
                        for i in 0..l {
                            for j in 0..l {
                                let kv = ker[i * l + j];
                                let mut dk = E::ZERO;
                                for oy in 0..ho {
                                    let src = ibase + (oy + i) * w + j;
                                    let orow = &dout[obase + oy * wo..obase + (oy + 1) * wo];
                                    let irow = &inp[src..src + wo];
                                    let drow = &mut dinput[src..src + wo];
                                    for ((&g, &x), di) in
                                        orow.iter().zip(irow).zip(drow.iter_mut())
                                    {
                                        dk += g * x;
                                        *di += g * kv;
                                    }
                                }
                                dweight[ch * l * l + i * l + j] += dk;
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, &dinput);
                Self::accumulate(grads, *weight, &dweight);
            }
            Op::PointwiseConv { input, weight } => {
                let s = self.value(*input).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let co = self.value(*weight).shape()[0];
                let hw = h * w;
                let mut dinput = vec![E::ZERO; b * c * hw];
                let mut dweight = vec![E::ZERO; co * c];
                for bi in 0..b {
                    let img = &self.value(*input).data()[bi * c * hw..(bi + 1) * c * hw];
                    let dm = &dout[bi * co * hw..(bi + 1) * co * hw];
                    // dW += dOut (co,hw) * img^T; img is (c,hw)
                    let dw = kernels::matmul_tb(dm, img, co, hw, c);
                    for (acc, v) in dweight.iter_mut().zip(dw) {
                        *acc += v;
                    }
                    let di = kernels::matmul_ta(self.value(*weight).data(), dm, co, c, hw);
                    for (acc, v) in dinput[bi * c * hw..(bi + 1) * c * hw].iter_mut().zip(di) {
                        *acc += v;
                    }
                }
                Self::accumulate(grads, *input, &dinput);
                Self::accumulate(grads, *weight, &dweight);
            }
            Op::Relu { input } => {
                let delta: Vec<E> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&x, &g)| if x > E::ZERO { g } else { E::ZERO })
                    .collect();
                Self::accumulate(grads, *input, &delta);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                mean,
                inv_std,
                ..
            } => {
                let s = self.value(*input).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let hw = h * w;
                let n = b * hw;
                let nf = E::from_f64(n as f64);
                let inp = self.value(*input).data();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![E::ZERO; c];
                let mut dbeta = vec![E::ZERO; c];
                let mut dinput = vec![E::ZERO; inp.len()];
                for ch in 0..c {
                    let (m, is, gc) = (mean[ch], inv_std[ch], g[ch]);
                    let mut sum_dy = E::ZERO;
                    let mut sum_dy_xhat = E::ZERO;
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for off in 0..hw {
                            let dy = dout[base + off];
                            let xhat = (inp[base + off] - m) * is;
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    match mode {
                        BnMode::Batch => {
                            let k1 = sum_dy / nf;
                            let k2 = sum_dy_xhat / nf;
                            for bi in 0..b {
                                let base = (bi * c + ch) * hw;
                                for off in 0..hw {
                                    let dy = dout[base + off];
                                    let xhat = (inp[base + off] - m) * is;
                                    dinput[base + off] = gc * is * (dy - k1 - xhat * k2);
                                }
                            }
                        }
                        BnMode::Fixed => {
                            for bi in 0..b {
                                let base = (bi * c + ch) * hw;
                                for off in 0..hw {
                                    dinput[base + off] = dout[base + off] * gc * is;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, &dinput);
                Self::accumulate(grads, *gamma, &dgamma);
                Self::accumulate(grads, *beta, &dbeta);
            }
            Op::MaxPool { input, argmax } => {
                let mut dinput = vec![E::ZERO; self.value(*input).len()];
                for (oi, &src) in argmax.iter().enumerate() {
                    dinput[src] += dout[oi];
                }
                Self::accumulate(grads, *input, &dinput);
            }
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                let s = self.value(*input).shape();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let ho = (h - window) / stride + 1;
                let wo = (w - window) / stride + 1;
                let scale = E::ONE / E::from_f64((window * window) as f64);
                let mut dinput = vec![E::ZERO; self.value(*input).len()];
                let mut oi = 0;
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * h * w;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = dout[oi] * scale;
                                oi += 1;
                                for i in 0..*window {
                                    let row = base + (oy * stride + i) * w + ox * stride;
                                    for j in 0..*window {
                                        dinput[row + j] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *input, &dinput);
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.value(ValueId(idx)).shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_mid = out_shape[*axis];
                for o in 0..outer {
                    let mut offset = 0;
                    for &id in inputs {
                        let mid = self.value(id).shape()[*axis];
                        let chunk = mid * inner;
                        let src_base = o * total_mid * inner + offset;
                        // Accumulate per outer slice without an intermediate buffer
                        // would interleave; simplest correct form clones chunks.
                        let piece = &dout[src_base..src_base + chunk];
                        match &mut grads[id.0] {
                            Some(g) => {
                                for (gv, &d) in
                                    g[o * chunk..(o + 1) * chunk].iter_mut().zip(piece)
                                {
                                    *gv += d;
                                }
                            }
                            None => {
                                let mut fresh = vec![E::ZERO; self.value(id).len()];
                                fresh[o * chunk..(o + 1) * chunk].copy_from_slice(piece);
                                grads[id.0] = Some(fresh);
                            }
                        }
                        offset += chunk;
                    }
                }
            }
            Op::Reshape { input } => {
                Self::accumulate(grads, *input, dout);
            }
            Op::AffineCombine { inputs, weights } => {
                let wv = self.value(*weights).data();
                let mut dw = vec![E::ZERO; wv.len()];
                for (bi, &id) in inputs.iter().enumerate() {
                    let delta: Vec<E> = dout.iter().map(|&g| g * wv[bi]).collect();
                    Self::accumulate(grads, id, &delta);
                    let mut s = E::ZERO;
                    for (&g, &x) in dout.iter().zip(self.value(id).data()) {
                        s += g * x;
                    }
                    dw[bi] = s;
                }
                Self::accumulate(grads, *weights, &dw);
            }
            Op::Softmax { input } => {
                let y = self.value(ValueId(idx)).data();
                let k = *self.value(*input).shape().last().unwrap();
                let rows = y.len() / k;
                let mut dinput = vec![E::ZERO; y.len()];
                for r in 0..rows {
                    let yr = &y[r * k..(r + 1) * k];
                    let dr = &dout[r * k..(r + 1) * k];
                    let mut dot = E::ZERO;
                    for (&yv, &dv) in yr.iter().zip(dr) {
                        dot += yv * dv;
                    }
                    for ((di, &yv), &dv) in
                        dinput[r * k..(r + 1) * k].iter_mut().zip(yr).zip(dr)
                    {
                        *di = yv * (dv - dot);
                    }
                }
                Self::accumulate(grads, *input, &dinput);
            }
            Op::Softlog { input } => {
                let a = E::from_f64(crate::softlog::alpha_e());
                let b = E::from_f64(crate::softlog::beta_e());
                let delta: Vec<E> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&x, &g)| {
                        let xc = x.mins(E::ONE).maxs(E::ZERO);
                        g * a / (a * xc + b)
                    })
                    .collect();
                Self::accumulate(grads, *input, &delta);
            }
            Op::Log { input } => {
                let delta: Vec<E> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&x, &g)| g / x)
                    .collect();
                Self::accumulate(grads, *input, &delta);
            }
            Op::Mul { a, b } => {
                let da: Vec<E> = dout
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&g, &bv)| g * bv)
                    .collect();
                let db: Vec<E> = dout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &av)| g * av)
                    .collect();
                Self::accumulate(grads, *a, &da);
                Self::accumulate(grads, *b, &db);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, dout);
                Self::accumulate(grads, *b, dout);
            }
            Op::Scale { input, c } => {
                let delta: Vec<E> = dout.iter().map(|&g| g * *c).collect();
                Self::accumulate(grads, *input, &delta);
            }
            Op::SumAll { input } => {
                let g = dout[0];
                let delta = vec![g; self.value(*input).len()];
                Self::accumulate(grads, *input, &delta);
            }
        }
    }
}

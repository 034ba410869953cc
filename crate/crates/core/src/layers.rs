//! Layer vocabulary: the compact notation used in configs and reports
//! (`C3[128]`, `D3[96]`, `F5[v1]`, `G5[v2]`), the bias-free dense
//! classification matrix, and the softlog-softmax integrator block.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::softlog::ProbVec;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

/// One layer of a branch column.
///
/// `Conv2d` counts `channels` spatial filters of extent `filter`;
/// `Dsc` is a channelwise spatial convolution followed by `channels`
/// pointwise convolutions; pools carry `(window, stride)`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerSpec {
    Conv2d { filter: usize, channels: usize },
    Dsc { filter: usize, channels: usize },
    BatchNorm,
    Relu,
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
    Dcn,
    Softmax,
    SoftlogIntegrator { branches: Vec<usize> },
}

impl LayerSpec {
    fn validate(self) -> Result<Self> {
        let ok = match &self {
            LayerSpec::Conv2d { filter, channels } | LayerSpec::Dsc { filter, channels } => {
                *filter > 0 && *channels > 0
            }
            LayerSpec::MaxPool { window, stride } | LayerSpec::AvgPool { window, stride } => {
                *window > 0 && *stride > 0
            }
            _ => true,
        };
        if ok {
            Ok(self)
        } else {
            Err(Error::InvalidArgument(format!("degenerate layer {self:?}")))
        }
    }
}

impl std::fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSpec::Conv2d { filter, channels } => write!(f, "C{filter}[{channels}]"),
            LayerSpec::Dsc { filter, channels } => write!(f, "D{filter}[{channels}]"),
            LayerSpec::BatchNorm => write!(f, "BatchNorm"),
            LayerSpec::Relu => write!(f, "ReLU"),
            LayerSpec::MaxPool { window, stride } => write!(f, "G{window}[v{stride}]"),
            LayerSpec::AvgPool { window, stride } => write!(f, "F{window}[v{stride}]"),
            LayerSpec::Dcn => write!(f, "DCN"),
            LayerSpec::Softmax => write!(f, "Softmax"),
            LayerSpec::SoftlogIntegrator { branches } => {
                let list: Vec<String> = branches.iter().map(|b| b.to_string()).collect();
                write!(f, "SLI[{}]", list.join(","))
            }
        }
    }
}

/// Parse a layer token. Grammar:
/// `C{L}[{N}]` | `D{L}[{N}]` | `F{M}[v{N}]` | `G{M}[v{N}]`,
/// plus the plain names `BatchNorm`, `ReLU`, `DCN`, `Softmax` and the
/// integrator form `SLI[b,b,...]`.
pub fn parse_layer_notation(text: &str) -> Result<LayerSpec> {
    let err = |pos: usize, detail: &str| Error::Parse {
        text: text.to_string(),
        pos,
        detail: detail.to_string(),
    };

    match text {
        "BatchNorm" => return Ok(LayerSpec::BatchNorm),
        "ReLU" => return Ok(LayerSpec::Relu),
        "DCN" => return Ok(LayerSpec::Dcn),
        "Softmax" => return Ok(LayerSpec::Softmax),
        _ => {}
    }

    let bytes = text.as_bytes();
    if bytes.is_empty() {
        return Err(err(0, "empty token"));
    }

    if let Some(rest) = text.strip_prefix("SLI[") {
        let inner = rest
            .strip_suffix(']')
            .ok_or_else(|| err(text.len(), "expected `]`"))?;
        let mut branches = Vec::new();
        for part in inner.split(',') {
            let b: usize = part
                .trim()
                .parse()
                .map_err(|_| err(4, "expected branch index"))?;
            branches.push(b);
        }
        return LayerSpec::SoftlogIntegrator { branches }.validate();
    }

    let kind = bytes[0];
    let mut pos = 1;
    let digits = |pos: &mut usize| -> Result<usize> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err(start, "expected digits"));
        }
        text[start..*pos]
            .parse()
            .map_err(|_| err(start, "number out of range"))
    };

    let first = digits(&mut pos)?;
    if pos >= bytes.len() || bytes[pos] != b'[' {
        return Err(err(pos, "expected `[`"));
    }
    pos += 1;

    let downsampled = pos < bytes.len() && bytes[pos] == b'v';
    if downsampled {
        pos += 1;
    }
    let second = digits(&mut pos)?;
    if pos >= bytes.len() || bytes[pos] != b']' {
        return Err(err(pos, "expected `]`"));
    }
    pos += 1;
    if pos != bytes.len() {
        return Err(err(pos, "trailing characters"));
    }

    let spec = match (kind, downsampled) {
        (b'C', false) => LayerSpec::Conv2d {
            filter: first,
            channels: second,
        },
        (b'D', false) => LayerSpec::Dsc {
            filter: first,
            channels: second,
        },
        (b'F', true) => LayerSpec::AvgPool {
            window: first,
            stride: second,
        },
        (b'G', true) => LayerSpec::MaxPool {
            window: first,
            stride: second,
        },
        (b'C' | b'D', true) => return Err(err(pos - 2, "`v` is for pooling tokens")),
        (b'F' | b'G', false) => return Err(err(first.to_string().len() + 2, "expected `v`")),
        _ => return Err(err(0, "unknown layer kind")),
    };
    spec.validate()
}

/// How integrator weights combine the softlogged branch distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorMode {
    /// One learnable scalar per branch.
    ScalarPerBranch,
    /// A learnable K x (B*K) map over the concatenated branch
    /// distributions (default: the combination is free per class).
    DensePerClass,
}

/// Learnable weights of one integrator head.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorWeights<E: Scalar = f64> {
    pub mode: IntegratorMode,
    pub weights: Tensor<E>,
}

impl<E: Scalar> IntegratorWeights<E> {
    pub fn new(mode: IntegratorMode, branches: usize, k: usize, weights: Tensor<E>) -> Result<Self> {
        let expected: &[usize] = match mode {
            IntegratorMode::ScalarPerBranch => &[branches],
            IntegratorMode::DensePerClass => &[k, branches * k],
        };
        if weights.shape() != expected {
            return Err(Error::shape(
                "integrator",
                format!(
                    "weights {:?} do not match mode {mode:?} with {branches} branches, K={k}",
                    weights.shape()
                ),
            ));
        }
        Ok(IntegratorWeights { mode, weights })
    }
}

/// Bias-free dense classification head: `logits = features * dcn^T` with
/// the matrix stored (K, N).
pub fn dcn_apply<E: Scalar>(
    tape: &mut Tape<E>,
    features: ValueId,
    dcn: ValueId,
) -> Result<ValueId> {
    tape.matmul_tb(features, dcn)
}

/// Softlog-softmax integrator on the tape: softlog each branch
/// distribution, combine per class with learnable weights, softmax the
/// result. Gradients flow to the weights and to every branch input.
pub fn softlog_softmax_integrator<E: Scalar>(
    tape: &mut Tape<E>,
    branch_probs: &[ValueId],
    mode: IntegratorMode,
    weights: ValueId,
) -> Result<ValueId> {
    if branch_probs.is_empty() {
        return Err(Error::shape("integrator", "no branch inputs"));
    }
    let k = *tape.value(branch_probs[0]).shape().last().unwrap();
    for &id in branch_probs {
        if *tape.value(id).shape().last().unwrap() != k {
            return Err(Error::shape(
                "integrator",
                format!("K mismatch across branches: {:?}", tape.value(id).shape()),
            ));
        }
    }
    let softlogged: Vec<ValueId> = branch_probs
        .iter()
        .map(|&id| tape.softlog(id))
        .collect::<Result<_>>()?;
    let combined = match mode {
        IntegratorMode::ScalarPerBranch => tape.affine_combine(&softlogged, weights)?,
        IntegratorMode::DensePerClass => {
            let stacked = tape.concat(&softlogged, 1)?;
            tape.matmul_tb(stacked, weights)?
        }
    };
    tape.softmax(combined)
}

/// Pure (non-tape) integrator over probability vectors; used by analysis
/// and tests to recompose an integrator head from stored branch outputs.
pub fn integrate_probs(
    branch_probs: &[ProbVec],
    weights: &IntegratorWeights<f64>,
) -> Result<ProbVec> {
    if branch_probs.is_empty() {
        return Err(Error::shape("integrator", "no branch inputs"));
    }
    let k = branch_probs[0].len();
    let b = branch_probs.len();
    let mut logged = Vec::with_capacity(b * k);
    for p in branch_probs {
        if p.len() != k {
            return Err(Error::shape("integrator", "K mismatch across branches"));
        }
        for &v in p.values() {
            logged.push(crate::softlog::softlog(v)?);
        }
    }
    let combined = match weights.mode {
        IntegratorMode::ScalarPerBranch => {
            let w = weights.weights.data();
            if w.len() != b {
                return Err(Error::shape("integrator", "weight count"));
            }
            let mut acc = vec![0.0; k];
            for (bi, chunk) in logged.chunks_exact(k).enumerate() {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a += w[bi] * v;
                }
            }
            acc
        }
        IntegratorMode::DensePerClass => {
            kernels::matmul_tb(&logged, weights.weights.data(), 1, b * k, k)
        }
    };
    ProbVec::new(kernels::softmax_rows(&combined, 1, k))
}

//! Desk-scale ensemble learning engine: frustum-shaped convolution branches
//! fused by softlog-softmax integrators, trained under a bounded softlog
//! cross-entropy, and analyzed with softlog divergence reports and the
//! performance-tensor / Ability summary.

pub mod check;
pub mod checkpoint;
pub mod dft;
pub mod error;
pub mod kernels;
pub mod frustum;
pub mod layers;
pub mod perf;
pub mod presets;
pub mod scalar;
pub mod sld;
pub mod softlog;
pub mod svg;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use check::{grad_check, GradCheckReport, ParamSet};
pub use error::{Error, Result};
pub use perf::{ability, perf_tensor, AbilityWeights, PerfTensor};
pub use scalar::{DType, Scalar};
pub use softlog::{
    mean_sld, safe_cross_entropy, sld, softlog, softlog_cross_entropy, softlog_entropy,
    softlog_general, softlog_relative_entropy, ProbVec, SoftlogParams,
};
pub use tape::{BnBatchStats, BnMode, BnOutput, GradMap, Tape, ValueId};
pub use tensor::Tensor;

//! Canonical frustum branches and the 17-head ensemble graph.
//!
//! Twelve convolution branches (six frustum profiles, in standard and
//! depthwise-separable flavors) each end in a softmax head; four community
//! integrators fuse sibling branches and one multi-generational integrator
//! fuses all sixteen heads. One forward pass yields every head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{softlog_softmax_integrator, IntegratorMode, LayerSpec};
use crate::scalar::Scalar;
use crate::softlog::ProbVec;
use crate::tape::{BnBatchStats, Tape, ValueId};
use crate::tensor::Tensor;

pub const BRANCH_COUNT: usize = 12;
pub const HEAD_COUNT: usize = 17;

/// Channel-count profile of a branch column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrustumShape {
    CylindricWide,
    CylindricElongated,
    Contractive,
    Hyperbolic,
    Ovoid,
    Expansive,
}

impl FrustumShape {
    pub fn canonical_channels(self) -> &'static [usize] {
        match self {
            FrustumShape::CylindricWide => &[128],
            FrustumShape::CylindricElongated => &[32, 32, 32],
            FrustumShape::Contractive => &[96, 64, 32],
            FrustumShape::Hyperbolic => &[80, 48, 80],
            FrustumShape::Ovoid => &[48, 80, 48],
            FrustumShape::Expansive => &[32, 64, 96],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FrustumShape::CylindricWide => "cylindric-wide",
            FrustumShape::CylindricElongated => "cylindric-elongated",
            FrustumShape::Contractive => "contractive",
            FrustumShape::Hyperbolic => "hyperbolic",
            FrustumShape::Ovoid => "ovoid",
            FrustumShape::Expansive => "expansive",
        }
    }
}

/// Scale the canonical channel list, rounding to nearest with the frustum
/// ordering preserved at common scales; a scale that rounds any width to
/// zero is an error.
pub fn canonical_frustum(shape: FrustumShape, width_scale: f64) -> Result<Vec<usize>> {
    if !(width_scale > 0.0) {
        return Err(Error::ScaleUnderflow {
            shape: shape.name().to_string(),
            scale: width_scale,
        });
    }
    let mut channels = Vec::new();
    for &c in shape.canonical_channels() {
        let scaled = (c as f64 * width_scale).round() as usize;
        if scaled == 0 {
            return Err(Error::ScaleUnderflow {
                shape: shape.name().to_string(),
                scale: width_scale,
            });
        }
        channels.push(scaled.max(1));
    }
    Ok(channels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ConvKind {
    #[serde(rename = "2D-C")]
    Conv2d,
    #[serde(rename = "DSC")]
    Dsc,
}

/// Declarative description of one branch column.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BranchSpec {
    /// Branch position 1..=12 in the ensemble table.
    pub index: usize,
    pub conv_kind: ConvKind,
    pub shape: FrustumShape,
    /// Final average pool (window, stride).
    pub final_avg: (usize, usize),
    /// Final max pool (window, stride).
    pub final_max: (usize, usize),
    pub width_scale: f64,
}

impl BranchSpec {
    /// The canonical branch at a given table position.
    pub fn canonical(index: usize, width_scale: f64) -> Result<BranchSpec> {
        if !(1..=BRANCH_COUNT).contains(&index) {
            return Err(Error::InvalidArgument(format!("branch index {index}")));
        }
        let position = (index - 1) % 6 + 1;
        let shape = match position {
            1 => FrustumShape::CylindricWide,
            2 => FrustumShape::CylindricElongated,
            3 => FrustumShape::Contractive,
            4 => FrustumShape::Hyperbolic,
            5 => FrustumShape::Ovoid,
            _ => FrustumShape::Expansive,
        };
        let (final_avg, final_max) = match position {
            1 => ((7, 3), (11, 5)),
            2 | 3 => ((5, 1), (5, 2)),
            4 | 5 => ((5, 1), (7, 3)),
            _ => ((5, 2), (5, 2)),
        };
        Ok(BranchSpec {
            index,
            conv_kind: if index <= 6 { ConvKind::Conv2d } else { ConvKind::Dsc },
            shape,
            final_avg,
            final_max,
            width_scale,
        })
    }

    pub fn name(&self) -> String {
        format!("n{:02}", self.index)
    }

    /// Scaled channel list of this branch.
    pub fn channels(&self) -> Result<Vec<usize>> {
        canonical_frustum(self.shape, self.width_scale)
    }
}

const CONV_FILTER: usize = 3;
const BLOCK_POOL: (usize, usize) = (5, 2);
const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
enum Stage {
    Conv { w: String },
    Dsc { dw: String, pw: String },
    Bn { name: String },
    Relu,
    MaxPool { window: usize, stride: usize },
    AvgPool { window: usize, stride: usize },
}

/// Parameter slot: name, shape, and fan-in for initialization (`None` for
/// batchnorm scale/shift, which initialize to 1/0).
#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

/// An executable branch plan with resolved extents.
#[derive(Debug, Clone)]
pub struct Branch {
    pub spec: BranchSpec,
    pub name: String,
    stages: Vec<Stage>,
    slots: Vec<ParamSlot>,
    bn_channels: Vec<(String, usize)>,
    pub feature_len: usize,
    pub class_count: usize,
    /// Layer tokens actually executed, classifier head included.
    pub tokens: Vec<String>,
    /// Pooling tokens dropped because the window exceeded the running
    /// extent at this input size.
    pub skipped: Vec<String>,
}

/// Build one branch for a given class count and input extent (H, W, C).
///
/// Convolutions that no longer fit are a hard error naming the stage; a
/// pooling stage whose window exceeds the running extent is dropped so the
/// canonical column still runs on small inputs (the canonical schedule is
/// intact whenever the input is large enough for it).
pub fn build_branch(spec: &BranchSpec, k: usize, input: (usize, usize, usize)) -> Result<Branch> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("class count {k}")));
    }
    let name = spec.name();
    let channels = spec.channels()?;
    let (mut h, mut w, mut c) = input;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!("input extent {input:?}")));
    }

    let mut stages = Vec::new();
    let mut slots = Vec::new();
    let mut bn_channels = Vec::new();
    let mut tokens = Vec::new();
    let mut skipped = Vec::new();

    let underflow = |stage: String, extent: usize| Error::ExtentUnderflow {
        branch: name.clone(),
        stage,
        extent,
    };

    let multi = channels.len() > 1;
    for (bi, &cout) in channels.iter().enumerate() {
        let block = bi + 1;
        let conv_token = match spec.conv_kind {
            ConvKind::Conv2d => LayerSpec::Conv2d { filter: CONV_FILTER, channels: cout },
            ConvKind::Dsc => LayerSpec::Dsc { filter: CONV_FILTER, channels: cout },
        }
        .to_string();
        if h < CONV_FILTER || w < CONV_FILTER {
            return Err(underflow(format!("block{block} {conv_token}"), h.min(w)));
        }
        match spec.conv_kind {
            ConvKind::Conv2d => {
                let wname = format!("{name}.b{block}.conv");
                slots.push(ParamSlot {
                    name: wname.clone(),
                    shape: vec![cout, c, CONV_FILTER, CONV_FILTER],
                    fan_in: Some(c * CONV_FILTER * CONV_FILTER),
                });
                stages.push(Stage::Conv { w: wname });
            }
            ConvKind::Dsc => {
                let dw = format!("{name}.b{block}.dw");
                let pw = format!("{name}.b{block}.pw");
                slots.push(ParamSlot {
                    name: dw.clone(),
                    shape: vec![c, CONV_FILTER, CONV_FILTER],
                    fan_in: Some(CONV_FILTER * CONV_FILTER),
                });
                slots.push(ParamSlot {
                    name: pw.clone(),
                    shape: vec![cout, c],
                    fan_in: Some(c),
                });
                stages.push(Stage::Dsc { dw, pw });
            }
        }
        tokens.push(conv_token);
        h -= CONV_FILTER - 1;
        w -= CONV_FILTER - 1;
        c = cout;

        let bn = format!("{name}.b{block}.bn");
        slots.push(ParamSlot {
            name: format!("{bn}.gamma"),
            shape: vec![c],
            fan_in: None,
        });
        slots.push(ParamSlot {
            name: format!("{bn}.beta"),
            shape: vec![c],
            fan_in: None,
        });
        bn_channels.push((bn.clone(), c));
        stages.push(Stage::Bn { name: bn });
        tokens.push("BatchNorm".to_string());

        if multi && block < channels.len() {
            let (win, stride) = BLOCK_POOL;
            let tok = LayerSpec::MaxPool { window: win, stride }.to_string();
            if h >= win && w >= win {
                stages.push(Stage::MaxPool { window: win, stride });
                h = (h - win) / stride + 1;
                w = (w - win) / stride + 1;
                tokens.push(tok);
            } else {
                skipped.push(tok);
            }
            stages.push(Stage::Relu);
            tokens.push("ReLU".to_string());
        }
    }

    let (win, stride) = spec.final_avg;
    let tok = LayerSpec::AvgPool { window: win, stride }.to_string();
    if h >= win && w >= win {
        stages.push(Stage::AvgPool { window: win, stride });
        h = (h - win) / stride + 1;
        w = (w - win) / stride + 1;
        tokens.push(tok);
    } else {
        skipped.push(tok);
    }

    let (win, stride) = spec.final_max;
    let tok = LayerSpec::MaxPool { window: win, stride }.to_string();
    if h >= win && w >= win {
        stages.push(Stage::MaxPool { window: win, stride });
        h = (h - win) / stride + 1;
        w = (w - win) / stride + 1;
        tokens.push(tok);
    } else {
        skipped.push(tok);
    }

    let feature_len = c * h * w;
    slots.push(ParamSlot {
        name: format!("{name}.dcn"),
        shape: vec![k, feature_len],
        fan_in: Some(feature_len),
    });
    tokens.push("DCN".to_string());
    tokens.push("Softmax".to_string());

    Ok(Branch {
        spec: spec.clone(),
        name,
        stages,
        slots,
        bn_channels,
        feature_len,
        class_count: k,
        tokens,
        skipped,
    })
}

impl Branch {
    pub fn param_slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn conv_block_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Conv { .. } | Stage::Dsc { .. }))
            .count()
    }

    fn forward<E: Scalar>(
        &self,
        tape: &mut Tape<E>,
        params: &BTreeMap<String, Tensor<E>>,
        bn_running: &BTreeMap<String, (Vec<E>, Vec<E>)>,
        input: ValueId,
        mode: Mode,
        register: &mut dyn FnMut(&mut Tape<E>, &str, &Tensor<E>) -> Result<ValueId>,
        bn_updates: &mut Vec<(String, BnBatchStats<E>)>,
    ) -> Result<ValueId> {
        let mut x = input;
        for stage in &self.stages {
            x = match stage {
                Stage::Conv { w } => {
                    let wid = register(tape, w, &params[w])?;
                    tape.conv2d(x, wid)?
                }
                Stage::Dsc { dw, pw } => {
                    let dwid = register(tape, dw, &params[dw])?;
                    let mid = tape.depthwise_conv2d(x, dwid)?;
                    let pwid = register(tape, pw, &params[pw])?;
                    tape.pointwise_conv(mid, pwid)?
                }
                Stage::Bn { name } => {
                    let gamma = register(tape, &format!("{name}.gamma"), &params[&format!("{name}.gamma")])?;
                    let beta = register(tape, &format!("{name}.beta"), &params[&format!("{name}.beta")])?;
                    let out = match mode {
                        Mode::Train => {
                            let o = tape.batchnorm(x, gamma, beta, E::from_f64(BN_EPS), None)?;
                            if let Some(stats) = o.batch_stats {
                                bn_updates.push((name.clone(), stats));
                            }
                            o.id
                        }
                        Mode::Eval => {
                            let (mean, var) = bn_running.get(name).ok_or_else(|| {
                                Error::InvalidArgument(format!("missing running stats for {name}"))
                            })?;
                            tape.batchnorm(x, gamma, beta, E::from_f64(BN_EPS), Some((mean, var)))?
                                .id
                        }
                    };
                    out
                }
                Stage::Relu => tape.relu(x)?,
                Stage::MaxPool { window, stride } => tape.maxpool(x, *window, *stride)?,
                Stage::AvgPool { window, stride } => tape.avgpool(x, *window, *stride)?,
            };
        }
        let batch = tape.value(x).shape()[0];
        let flat = tape.reshape(x, vec![batch, self.feature_len])?;
        let dcn_name = format!("{}.dcn", self.name);
        let dcn = register(tape, &dcn_name, &params[&dcn_name])?;
        let logits = tape.matmul_tb(flat, dcn)?;
        tape.softmax(logits)
    }
}

/// Declarative description of the whole ensemble.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnsembleSpec {
    pub class_count: usize,
    /// (H, W, C) of one input image.
    pub input: (usize, usize, usize),
    pub integrator_mode: IntegratorMode,
    pub branches: Vec<BranchSpec>,
}

/// Fixed integrator wiring: community heads over sibling branch groups,
/// the final head over all sixteen.
pub fn integrator_wiring() -> [(usize, Vec<usize>); 5] {
    [
        (13, vec![1, 2]),
        (14, vec![3, 4, 5, 6]),
        (15, vec![7, 8]),
        (16, vec![9, 10, 11, 12]),
        (17, (1..=16).collect()),
    ]
}

impl EnsembleSpec {
    /// The canonical twelve-branch ensemble.
    pub fn canonical(
        class_count: usize,
        input: (usize, usize, usize),
        width_scale: f64,
        integrator_mode: IntegratorMode,
    ) -> Result<EnsembleSpec> {
        let branches = (1..=BRANCH_COUNT)
            .map(|i| BranchSpec::canonical(i, width_scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleSpec {
            class_count,
            input,
            integrator_mode,
            branches,
        })
    }

    pub fn width_scale(&self) -> f64 {
        self.branches.first().map(|b| b.width_scale).unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass over the whole ensemble: seventeen head outputs plus
/// the batch statistics observed by every normalization layer (train mode).
pub struct ForwardPass<E: Scalar> {
    pub heads: Vec<ValueId>,
    pub bn_updates: Vec<(String, BnBatchStats<E>)>,
}

/// Executable ensemble graph: branch plans plus one flat parameter store.
#[derive(Debug, Clone)]
pub struct ModelGraph<E: Scalar = f64> {
    spec: EnsembleSpec,
    branches: Vec<Branch>,
    params: BTreeMap<String, Tensor<E>>,
    bn_running: BTreeMap<String, (Vec<E>, Vec<E>)>,
    integrator_slots: Vec<ParamSlot>,
}

impl<E: Scalar> ModelGraph<E> {
    /// Build the plan and allocate zeroed parameters; call
    /// [`ModelGraph::init_params`] before training.
    pub fn build(spec: EnsembleSpec) -> Result<Self> {
        if spec.branches.is_empty() {
            return Err(Error::InvalidArgument("no branches".into()));
        }
        let k = spec.class_count;
        let (h, w, c) = spec.input;
        let mut branches = Vec::new();
        for bs in &spec.branches {
            branches.push(build_branch(bs, k, (h, w, c))?);
        }

        let mut params = BTreeMap::new();
        let mut bn_running = BTreeMap::new();
        for br in &branches {
            for slot in br.param_slots() {
                params.insert(slot.name.clone(), Tensor::zeros(slot.shape.clone()));
            }
            for (bn, ch) in &br.bn_channels {
                bn_running.insert(bn.clone(), (vec![E::ZERO; *ch], vec![E::ONE; *ch]));
            }
        }

        let mut integrator_slots = Vec::new();
        for (head, sources) in integrator_wiring() {
            let b = sources.len();
            let shape = match spec.integrator_mode {
                IntegratorMode::ScalarPerBranch => vec![b],
                IntegratorMode::DensePerClass => vec![k, b * k],
            };
            let name = format!("n{head}.w");
            params.insert(name.clone(), Tensor::zeros(shape.clone()));
            integrator_slots.push(ParamSlot {
                name,
                shape,
                fan_in: None,
            });
        }

        Ok(ModelGraph {
            spec,
            branches,
            params,
            bn_running,
            integrator_slots,
        })
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<E>> {
        &self.params
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<E>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            )),
            None => Err(Error::InvalidArgument(format!("unknown parameter {name}"))),
        }
    }

    /// Replace the whole parameter set (names and shapes must match).
    pub fn with_params(&self, params: &BTreeMap<String, Tensor<E>>) -> Result<Self> {
        let mut clone = self.clone();
        for (name, value) in params {
            clone.set_param(name, value.clone())?;
        }
        Ok(clone)
    }

    pub fn bn_running(&self) -> &BTreeMap<String, (Vec<E>, Vec<E>)> {
        &self.bn_running
    }

    pub fn set_bn_running(&mut self, name: &str, mean: Vec<E>, var: Vec<E>) -> Result<()> {
        match self.bn_running.get_mut(name) {
            Some(slot) if slot.0.len() == mean.len() && slot.1.len() == var.len() => {
                *slot = (mean, var);
                Ok(())
            }
            Some(_) => Err(Error::shape("set_bn_running", name.to_string())),
            None => Err(Error::InvalidArgument(format!("unknown bn layer {name}"))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Fan-in-scaled uniform init for conv and classifier weights, 1/0 for
    /// normalization scale/shift, near-averaging weights for integrators;
    /// fully determined by the seed.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.spec.class_count;
        let mode = self.spec.integrator_mode;

        let slots: Vec<ParamSlot> = self
            .branches
            .iter()
            .flat_map(|b| b.param_slots().iter().cloned())
            .collect();
        for slot in slots {
            let tensor = match slot.fan_in {
                Some(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n: usize = slot.shape.iter().product();
                    let data: Vec<E> = (0..n)
                        .map(|_| E::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
                        .collect();
                    Tensor::new(slot.shape.clone(), data).expect("slot shape")
                }
                None => {
                    if slot.name.ends_with(".gamma") {
                        Tensor::filled(slot.shape.clone(), E::ONE)
                    } else {
                        Tensor::zeros(slot.shape.clone())
                    }
                }
            };
            self.params.insert(slot.name.clone(), tensor);
        }
        for (name, (mean, var)) in self.bn_running.iter_mut() {
            let _ = name;
            mean.iter_mut().for_each(|v| *v = E::ZERO);
            var.iter_mut().for_each(|v| *v = E::ONE);
        }

        for (slot, (_, sources)) in self.integrator_slots.clone().iter().zip(integrator_wiring()) {
            let b = sources.len();
            let scale = 1.0 / b as f64;
            let tensor = match mode {
                IntegratorMode::ScalarPerBranch => {
                    let data: Vec<E> = (0..b)
                        .map(|_| E::from_f64((0.5 + rng.gen::<f64>()) * scale))
                        .collect();
                    Tensor::new(vec![b], data).expect("weights")
                }
                IntegratorMode::DensePerClass => {
                    // Class-aligned block structure: each branch's class-k
                    // softlog feeds class k, so the head starts out as a
                    // weighted vote and training is free to move it.
                    let mut t = Tensor::zeros(vec![k, b * k]);
                    for bi in 0..b {
                        for kk in 0..k {
                            let v = E::from_f64((0.5 + rng.gen::<f64>()) * scale);
                            t.data_mut()[kk * (b * k) + bi * k + kk] = v;
                        }
                    }
                    t
                }
            };
            self.params.insert(slot.name.clone(), tensor);
        }
    }

    /// Run the ensemble on a batch (S,C,H,W). All seventeen heads come out
    /// of this single pass; integrator heads reuse the stored branch
    /// outputs rather than recomputing them.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        batch: &Tensor<E>,
        mode: Mode,
    ) -> Result<ForwardPass<E>> {
        let (h, w, c) = self.spec.input;
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
            return Err(Error::shape(
                "forward",
                format!("batch {shape:?} vs input ({h},{w},{c})"),
            ));
        }
        let register_params = tape.grad_enabled();
        let mut register = move |tape: &mut Tape<E>, name: &str, value: &Tensor<E>| {
            if register_params {
                tape.param(name, value.clone())
            } else {
                tape.leaf(value.clone())
            }
        };

        let input = tape.leaf(batch.clone())?;
        let mut bn_updates = Vec::new();
        let mut heads: Vec<ValueId> = Vec::with_capacity(HEAD_COUNT);
        for branch in &self.branches {
            let p = branch.forward(
                tape,
                &self.params,
                &self.bn_running,
                input,
                mode,
                &mut register,
                &mut bn_updates,
            )?;
            heads.push(p);
        }
        for (head, sources) in integrator_wiring() {
            let inputs: Vec<ValueId> = sources.iter().map(|&s| heads[s - 1]).collect();
            let name = format!("n{head}.w");
            let wid = register(tape, &name, &self.params[&name])?;
            let p = softlog_softmax_integrator(tape, &inputs, self.spec.integrator_mode, wid)?;
            heads.push(p);
        }
        debug_assert_eq!(heads.len(), HEAD_COUNT);
        Ok(ForwardPass { heads, bn_updates })
    }

    /// Fold observed batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnBatchStats<E>)]) {
        let momentum = E::from_f64(BN_MOMENTUM);
        let one_minus = E::ONE - momentum;
        for (name, stats) in updates {
            if let Some((mean, var)) = self.bn_running.get_mut(name) {
                for (m, &b) in mean.iter_mut().zip(&stats.mean) {
                    *m = momentum * *m + one_minus * b;
                }
                for (v, &b) in var.iter_mut().zip(&stats.var) {
                    *v = momentum * *v + one_minus * b;
                }
            }
        }
    }

    /// Forward pass on frozen parameters, no tape kept: the seventeen
    /// per-example distributions, promoted to f64.
    pub fn forward_eval(&self, batch: &Tensor<E>) -> Result<Vec<Vec<ProbVec>>> {
        let mut tape = Tape::no_grad();
        let pass = self.forward(&mut tape, batch, Mode::Eval)?;
        let s = batch.shape()[0];
        let k = self.spec.class_count;
        let mut out = Vec::with_capacity(HEAD_COUNT);
        for &head in &pass.heads {
            let t = tape.value(head);
            let mut rows = Vec::with_capacity(s);
            for r in 0..s {
                let mut row: Vec<f64> = t.data()[r * k..(r + 1) * k]
                    .iter()
                    .map(|v| v.to_f64())
                    .collect();
                // 32-bit rows carry rounding at f32 epsilon; renormalize in
                // the promoted domain before the strict simplex check
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(Error::domain("forward_eval", format!("head row sum {sum}")));
                }
                row.iter_mut().for_each(|v| *v /= sum);
                rows.push(ProbVec::new(row)?);
            }
            out.push(rows);
        }
        Ok(out)
    }
}

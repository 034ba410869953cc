//! Minibatch SGD-with-momentum training under the bounded softlog
//! cross-entropy objective on the final head, Monte-Carlo trials over
//! initialization seeds, and the plain-log stress harness.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frustum::{EnsembleSpec, Mode, ModelGraph, HEAD_COUNT};
use crate::scalar::Scalar;
use crate::synth::DatasetManifest;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Softlog,
    /// Raw-log cross-entropy, kept only to demonstrate the failure mode it
    /// has on saturated softmax outputs.
    PlainLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub width_scale: f64,
    pub loss_mode: LossMode,
    /// Add equal-weight auxiliary losses on the four community heads.
    pub aux_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            width_scale: 0.125,
            loss_mode: LossMode::Softlog,
            aux_loss: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub step: usize,
    pub op: String,
}

/// Per-split accuracies in percent, one entry per head (1..=17).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAccuracies {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub learning_rate: f64,
    pub accuracies: SplitAccuracies,
    /// Mean train loss per epoch.
    pub loss_curve: Vec<f64>,
    pub wall_seconds: f64,
    pub divergence: Option<DivergenceInfo>,
}

impl TrialResult {
    /// Test accuracy of the final head.
    pub fn test_accuracy(&self, head: usize) -> f64 {
        self.accuracies.test[head - 1]
    }
}

/// In-memory dataset: per split an (N,1,H,W) image tensor plus labels.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub class_count: usize,
    pub train: (Tensor<f64>, Vec<usize>),
    pub val: (Tensor<f64>, Vec<usize>),
    pub test: (Tensor<f64>, Vec<usize>),
}

impl DatasetBundle {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        Ok(DatasetBundle {
            class_count: manifest.class_count(),
            train: crate::synth::load_split(manifest, "train")?,
            val: crate::synth::load_split(manifest, "val")?,
            test: crate::synth::load_split(manifest, "test")?,
        })
    }

    pub fn split(&self, name: &str) -> Result<&(Tensor<f64>, Vec<usize>)> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

fn one_hot<E: Scalar>(labels: &[usize], k: usize) -> Tensor<E> {
    let mut q = Tensor::zeros(vec![labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        q.data_mut()[i * k + l] = E::ONE;
    }
    q
}

fn gather_batch<E: Scalar>(
    images: &Tensor<f64>,
    labels: &[usize],
    idx: &[usize],
) -> (Tensor<E>, Vec<usize>) {
    let sample: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * sample);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend(
            images.data()[i * sample..(i + 1) * sample]
                .iter()
                .map(|&v| E::from_f64(v)),
        );
        y.push(labels[i]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    (Tensor::new(shape, data).expect("batch shape"), y)
}

/// Cross-entropy of one head against one-hot targets:
/// `-(1/S) * sum q * log-or-softlog(p)`.
pub fn head_loss<E: Scalar>(
    tape: &mut Tape<E>,
    probs: ValueId,
    targets: &[usize],
    k: usize,
    mode: LossMode,
) -> Result<ValueId> {
    let q = tape.leaf(one_hot::<E>(targets, k))?;
    let logged = match mode {
        LossMode::Softlog => tape.softlog(probs)?,
        LossMode::PlainLog => tape.log(probs)?,
    };
    let prod = tape.mul(q, logged)?;
    let total = tape.sum_all(prod)?;
    tape.scale(total, E::from_f64(-1.0 / targets.len() as f64))
}

/// Train a built graph in place. Initializes parameters from the config
/// seed, so a fixed (seed, config, dataset) triple reproduces the trial
/// bit-exactly. A non-finite loss aborts the trial and is reported with
/// its step index (possible only in plain-log mode).
pub fn train<E: Scalar>(
    graph: &mut ModelGraph<E>,
    data: &DatasetBundle,
    config: &TrainConfig,
) -> Result<TrialResult> {
    config.validate()?;
    let start = Instant::now();
    let k = graph.spec().class_count;
    if k != data.class_count {
        return Err(Error::shape(
            "train",
            format!("graph K={k} vs dataset K={}", data.class_count),
        ));
    }
    graph.init_params(config.seed);

    let mut velocity: BTreeMap<String, Vec<E>> = graph
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), vec![E::ZERO; t.len()]))
        .collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5353_5353));
    let lr = E::from_f64(config.learning_rate);
    let mu = E::from_f64(config.momentum);

    let n_train = data.train.1.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut divergence = None;
    let mut step = 0usize;

    'epochs: for _epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (batch, targets) = gather_batch::<E>(&data.train.0, &data.train.1, chunk);
            let outcome = (|| -> Result<(f64, crate::tape::GradMap<E>, Vec<(String, crate::tape::BnBatchStats<E>)>)> {
                let mut tape = Tape::new();
                let pass = graph.forward(&mut tape, &batch, Mode::Train)?;
                let mut loss = head_loss(&mut tape, pass.heads[16], &targets, k, config.loss_mode)?;
                if config.aux_loss {
                    for head in 12..16 {
                        let aux = head_loss(&mut tape, pass.heads[head], &targets, k, config.loss_mode)?;
                        loss = tape.add(loss, aux)?;
                    }
                }
                let value = tape.value(loss).data()[0].to_f64();
                let grads = tape.backward(loss)?;
                Ok((value, grads, pass.bn_updates))
            })();
            let (loss_value, grads, bn_updates) = match outcome {
                Ok(v) => v,
                Err(Error::NonFinite { op }) => {
                    divergence = Some(DivergenceInfo { step, op });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            epoch_loss += loss_value;
            batches += 1;

            for (name, grad) in &grads {
                let v = velocity.get_mut(name).expect("velocity slot");
                for (vel, &g) in v.iter_mut().zip(grad.data()) {
                    *vel = mu * *vel + g;
                }
            }
            let updates: Vec<(String, Vec<E>)> = velocity
                .iter()
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect();
            for (name, v) in updates {
                let current = &graph.params()[&name];
                let stepped = Tensor::new(
                    current.shape().to_vec(),
                    current
                        .data()
                        .iter()
                        .zip(&v)
                        .map(|(&w, &vel)| w - lr * vel)
                        .collect(),
                )
                .expect("param shape");
                graph.set_param(&name, stepped)?;
            }
            graph.apply_bn_updates(&bn_updates);
            step += 1;
        }
        if batches > 0 {
            loss_curve.push(epoch_loss / batches as f64);
        }
    }

    let accuracies = SplitAccuracies {
        train: evaluate(graph, &data.train.0, &data.train.1)?.accuracy,
        val: evaluate(graph, &data.val.0, &data.val.1)?.accuracy,
        test: evaluate(graph, &data.test.0, &data.test.1)?.accuracy,
    };
    if config.loss_mode == LossMode::Softlog {
        debug_assert!(divergence.is_none(), "softlog training must stay finite");
    }

    Ok(TrialResult {
        seed: config.seed,
        learning_rate: config.learning_rate,
        accuracies,
        loss_curve,
        wall_seconds: start.elapsed().as_secs_f64(),
        divergence,
    })
}

/// Per-head accuracy and confusion matrices over a split; argmax decision
/// rule with ties broken toward the lowest class index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent, per head.
    pub accuracy: Vec<f64>,
    /// `confusion[head][true][predicted]`.
    pub confusion: Vec<Vec<Vec<usize>>>,
}

pub fn evaluate<E: Scalar>(
    graph: &ModelGraph<E>,
    images: &Tensor<f64>,
    labels: &[usize],
) -> Result<EvalResult> {
    let k = graph.spec().class_count;
    let n = labels.len();
    if images.shape()[0] != n {
        return Err(Error::shape(
            "evaluate",
            format!("{} images vs {n} labels", images.shape()[0]),
        ));
    }
    let mut confusion = vec![vec![vec![0usize; k]; k]; HEAD_COUNT];
    let chunk_size = 64;
    let mut offset = 0;
    while offset < n {
        let idx: Vec<usize> = (offset..(offset + chunk_size).min(n)).collect();
        let (batch, targets) = gather_batch::<E>(images, labels, &idx);
        let heads = graph.forward_eval(&batch)?;
        for (h, rows) in heads.iter().enumerate() {
            for (row, &truth) in rows.iter().zip(&targets) {
                confusion[h][truth][row.argmax()] += 1;
            }
        }
        offset += chunk_size;
    }
    let accuracy = confusion
        .iter()
        .map(|m| {
            let correct: usize = (0..k).map(|i| m[i][i]).sum();
            100.0 * correct as f64 / n.max(1) as f64
        })
        .collect();
    Ok(EvalResult { accuracy, confusion })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub base: TrainConfig,
    /// Trials per learning rate; trial t uses seed `base.seed + t`.
    pub trials: usize,
    pub learning_rates: Vec<f64>,
    /// Head whose test accuracy lands in Z (1..=17).
    pub head: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TrialOutcome {
    Completed { result: TrialResult },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McResult {
    pub outcomes: Vec<TrialOutcome>,
    /// Test accuracies of the chosen head, pooled across learning rates in
    /// (learning rate, seed) order.
    pub z_pooled: Vec<f64>,
    /// The same accuracies grouped per learning rate.
    pub z_by_lr: BTreeMap<String, Vec<f64>>,
}

/// Independent training trials over `trials x learning_rates`; individual
/// trial failures are recorded, not fatal. Results merge in (lr, seed)
/// order regardless of worker count.
pub fn monte_carlo(spec: &EnsembleSpec, data: &DatasetBundle, mc: &McConfig) -> Result<McResult> {
    if mc.trials == 0 || mc.learning_rates.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one trial and one learning rate".into(),
        ));
    }
    if !(1..=HEAD_COUNT).contains(&mc.head) {
        return Err(Error::InvalidArgument(format!("head {}", mc.head)));
    }
    let mut jobs = Vec::new();
    for &lr in &mc.learning_rates {
        for t in 0..mc.trials {
            let mut config = mc.base.clone();
            config.learning_rate = lr;
            config.seed = mc.base.seed + t as u64;
            jobs.push(config);
        }
    }

    let run_one = |config: &TrainConfig| -> TrialOutcome {
        let built = ModelGraph::<f64>::build(spec.clone());
        match built {
            Ok(mut graph) => match train(&mut graph, data, config) {
                Ok(result) => TrialOutcome::Completed { result },
                Err(e) => TrialOutcome::Failed { error: e.to_string() },
            },
            Err(e) => TrialOutcome::Failed { error: e.to_string() },
        }
    };

    let outcomes: Vec<TrialOutcome> = if mc.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(mc.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            jobs.par_iter().map(run_one).collect()
        })
    } else {
        jobs.iter().map(run_one).collect()
    };

    let mut z_pooled = Vec::new();
    let mut z_by_lr: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (job, outcome) in jobs.iter().zip(&outcomes) {
        if let TrialOutcome::Completed { result } = outcome {
            let acc = result.test_accuracy(mc.head);
            z_pooled.push(acc);
            z_by_lr
                .entry(format!("{}", job.learning_rate))
                .or_default()
                .push(acc);
        }
    }
    Ok(McResult {
        outcomes,
        z_pooled,
        z_by_lr,
    })
}

/// Outcome of the stability stress harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressOutcome {
    pub steps_completed: usize,
    pub first_nonfinite: Option<DivergenceInfo>,
    pub max_abs_logit: f64,
}

/// Two stacked softmax decisions over huge logits (|logit| >= 1e4), with
/// the log layer between them either the bounded softlog or the raw log.
/// The raw log meets an exactly-zero softmax output and the run aborts
/// with a detected non-finite value; the softlog run completes every step.
pub fn stability_stress(mode: LossMode, steps: usize, seed: u64) -> Result<StressOutcome> {
    let magnitude = 1e4;
    // Two separable examples with one feature at +-magnitude.
    let features = Tensor::from_vec(vec![2, 1], vec![magnitude, -magnitude])?;
    let targets = [0usize, 1usize];
    let k = 2;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    // Opposite-sign class rows keep the per-row logit spread >= 2*magnitude,
    // which saturates the first softmax to an exact 0/1 pair.
    let mut dcn = Tensor::from_vec(
        vec![2, 1],
        vec![1.0 + 0.25 * rng.gen::<f64>(), -1.0 - 0.25 * rng.gen::<f64>()],
    )?;
    // Symmetric integrator weights over a single branch.
    let mut iw = Tensor::from_vec(vec![1], vec![1.0])?;

    let lr = 1e-9;
    let mut max_abs_logit: f64 = 0.0;
    for step in 0..steps {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone())?;
        let d = tape.param("dcn", dcn.clone())?;
        let w = tape.param("iw", iw.clone())?;
        let result = (|tape: &mut Tape<f64>| -> Result<(f64, crate::tape::GradMap<f64>)> {
            let logits = tape.matmul_tb(x, d)?;
            max_abs_logit = max_abs_logit.max(tape.value(logits).max_abs());
            let p1 = tape.softmax(logits)?;
            // second-stage decision: log layer, weighted combine, softmax
            let logged = match mode {
                LossMode::Softlog => tape.softlog(p1)?,
                LossMode::PlainLog => tape.log(p1)?,
            };
            let combined = tape.affine_combine(&[logged], w)?;
            let p2 = tape.softmax(combined)?;
            let loss = head_loss(tape, p2, &targets, k, mode)?;
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            Ok((value, grads))
        })(&mut tape);
        match result {
            Ok((_, grads)) => {
                let gd = &grads["dcn"];
                dcn = Tensor::new(
                    vec![2, 1],
                    dcn.data()
                        .iter()
                        .zip(gd.data())
                        .map(|(&p, &g)| p - lr * g)
                        .collect(),
                )?;
                let gw = &grads["iw"];
                iw = Tensor::new(
                    vec![1],
                    iw.data()
                        .iter()
                        .zip(gw.data())
                        .map(|(&p, &g)| p - lr * g)
                        .collect(),
                )?;
            }
            Err(Error::NonFinite { op }) => {
                return Ok(StressOutcome {
                    steps_completed: step,
                    first_nonfinite: Some(DivergenceInfo { step, op }),
                    max_abs_logit,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(StressOutcome {
        steps_completed: steps,
        first_nonfinite: None,
        max_abs_logit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::IntegratorMode;
    use crate::synth::{synth_dataset, Experiment};

    fn tiny_data(k_experiment: Experiment, per: usize) -> DatasetBundle {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_dataset(k_experiment, (per, 2, 2), 32, 9, dir.path(), 0).unwrap();
        DatasetBundle::load(&m).unwrap()
    }

    fn tiny_graph() -> ModelGraph<f64> {
        let spec = EnsembleSpec::canonical(2, (32, 32, 1), 0.125, IntegratorMode::DensePerClass)
            .unwrap();
        ModelGraph::build(spec).unwrap()
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let mut a = tiny_graph();
        let mut b = tiny_graph();
        a.init_params(5);
        b.init_params(5);
        assert_eq!(a.params(), b.params());
        let mut c = tiny_graph();
        c.init_params(6);
        let diff = a
            .params()
            .iter()
            .any(|(n, t)| t.data() != c.params()[n].data());
        assert!(diff);
    }

    #[test]
    fn conv_init_scale_tracks_fan_in() {
        let mut g = tiny_graph();
        g.init_params(1);
        // n01.b1.conv: fan_in = 1*3*3 = 9, expect std close to sqrt(2/9)
        let w = &g.params()["n01.b1.conv"];
        let n = w.len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let std =
            (w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let target = (2.0f64 / 9.0).sqrt();
        assert!(std > target / 2.0 && std < target * 2.0, "std {std} vs {target}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = tiny_data(Experiment::BinaryIo, 8);
        let mut graph = tiny_graph();
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let result = train(&mut graph, &data, &config).unwrap();
        assert!(result.divergence.is_none());
        let mut reference = tiny_graph();
        reference.init_params(3);
        for (name, t) in reference.params() {
            assert_eq!(t.data(), graph.params()[name].data(), "{name} moved");
        }
    }

    #[test]
    fn one_step_reaches_every_branch_conv() {
        let data = tiny_data(Experiment::BinaryIo, 4);
        let mut graph = tiny_graph();
        let config = TrainConfig {
            learning_rate: 0.01,
            epochs: 1,
            batch_size: 8,
            seed: 4,
            ..TrainConfig::default()
        };
        train(&mut graph, &data, &config).unwrap();
        let mut reference = tiny_graph();
        reference.init_params(4);
        for branch in 1..=12 {
            let name = format!("n{branch:02}.b1.{}", if branch <= 6 { "conv" } else { "dw" });
            assert_ne!(
                reference.params()[&name].data(),
                graph.params()[&name].data(),
                "{name} never moved"
            );
        }
    }

    #[test]
    fn evaluate_tie_break_and_trace_identity() {
        // zeroed graph -> every head uniform -> everything predicted class 0
        let data = tiny_data(Experiment::BinaryIo, 4);
        let graph = tiny_graph();
        let eval = evaluate(&graph, &data.test.0, &data.test.1).unwrap();
        for h in 0..HEAD_COUNT {
            assert!((eval.accuracy[h] - 50.0).abs() < 1e-12);
            let m = &eval.confusion[h];
            let trace: usize = m[0][0] + m[1][1];
            let total: usize = m.iter().flatten().sum();
            assert_eq!(total, data.test.1.len());
            assert!((eval.accuracy[h] - 100.0 * trace as f64 / total as f64).abs() < 1e-12);
            assert_eq!(m[0][1] + m[1][1], 0, "ties must go to class 0");
        }
    }

    #[test]
    fn monte_carlo_merges_in_seed_order_and_tolerates_failures() {
        let data = tiny_data(Experiment::BinaryIo, 4);
        let spec = EnsembleSpec::canonical(2, (32, 32, 1), 0.125, IntegratorMode::DensePerClass)
            .unwrap();
        let mc = McConfig {
            base: TrainConfig {
                epochs: 1,
                batch_size: 8,
                seed: 100,
                ..TrainConfig::default()
            },
            trials: 2,
            learning_rates: vec![0.001, 0.01],
            head: 17,
            workers: 1,
        };
        let result = monte_carlo(&spec, &data, &mc).unwrap();
        assert_eq!(result.outcomes.len(), 4);
        assert_eq!(result.z_pooled.len(), 4);
        assert_eq!(result.z_by_lr["0.001"].len(), 2);
        // degenerate perf tensor on a single trial
        let t = crate::perf::perf_tensor(&result.z_pooled[..1]).unwrap();
        assert_eq!(t.min, t.max);
    }

    #[test]
    fn stress_plain_log_detected_softlog_survives() {
        let plain = stability_stress(LossMode::PlainLog, 100, 1).unwrap();
        assert!(plain.first_nonfinite.is_some(), "{plain:?}");
        assert!(plain.max_abs_logit >= 1e4);
        let soft = stability_stress(LossMode::Softlog, 100, 1).unwrap();
        assert!(soft.first_nonfinite.is_none(), "{soft:?}");
        assert_eq!(soft.steps_completed, 100);
        assert!(soft.max_abs_logit >= 1e4);
    }
}

//! Analytic gradients vs central finite differences, per op and for whole
//! branch and ensemble graphs.

use std::collections::BTreeMap;

use dragonfly_core::check::{grad_check, ParamSet};
use dragonfly_core::frustum::{EnsembleSpec, Mode, ModelGraph};
use dragonfly_core::layers::{softlog_softmax_integrator, IntegratorMode};
use dragonfly_core::tape::{Tape, ValueId};
use dragonfly_core::train::{head_loss, LossMode};
use dragonfly_core::{Result, Tensor};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// Run a finite-difference check of `build` with a fixed random projection
/// of the output as the scalar loss.
fn fd_max_err(
    params: &ParamSet,
    build: impl Fn(&mut Tape<f64>, &BTreeMap<String, ValueId>) -> Result<ValueId>,
) -> f64 {
    let eval = |ps: &ParamSet, want: bool| -> Result<(f64, Option<dragonfly_core::GradMap<f64>>)> {
        let mut tape = Tape::new();
        let mut ids = BTreeMap::new();
        for (name, t) in ps {
            ids.insert(name.clone(), tape.param(name, t.clone())?);
        }
        let out = build(&mut tape, &ids)?;
        let n = tape.value(out).len();
        let shape = tape.value(out).shape().to_vec();
        let coeffs = Tensor::from_fn(shape, |i| {
            ((i.wrapping_mul(2_654_435_761) % 1000) as f64) / 1000.0 - 0.3
        });
        let c = tape.leaf(coeffs)?;
        let prod = tape.mul(out, c)?;
        let sum = tape.sum_all(prod)?;
        let loss = tape.scale(sum, 1.0 / n as f64)?;
        let value = tape.value(loss).data()[0];
        let grads = if want { Some(tape.backward(loss)?) } else { None };
        Ok((value, grads))
    };
    grad_check(params, eval, EPS).unwrap().max_rel_err
}

fn params_of(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet {
    entries
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
}

#[test]
fn matmul_variants_20_random_shapes() {
    let mut r = rng(1);
    for trial in 0..20 {
        let (m, k, n) = (
            r.gen_range(1..5usize),
            r.gen_range(1..5usize),
            r.gen_range(1..5usize),
        );
        let params = params_of(vec![
            ("a", random_tensor(&[m, k], &mut r, 1.0)),
            ("b", random_tensor(&[k, n], &mut r, 1.0)),
            ("bt", random_tensor(&[n, k], &mut r, 1.0)),
        ]);
        let err = fd_max_err(&params, |tape, ids| tape.matmul(ids["a"], ids["b"]));
        assert!(err < 1e-4, "matmul trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| tape.matmul_tb(ids["a"], ids["bt"]));
        assert!(err < 1e-4, "matmul_tb trial {trial}: {err}");
    }
}

#[test]
fn conv_family_20_random_shapes() {
    let mut r = rng(2);
    for trial in 0..20 {
        let b = r.gen_range(1..3usize);
        let c = r.gen_range(1..4usize);
        let l = [1usize, 3][r.gen_range(0..2usize)];
        let h = r.gen_range(l..l + 5);
        let w = r.gen_range(l..l + 5);
        let co = r.gen_range(1..4usize);
        let params = params_of(vec![
            ("x", random_tensor(&[b, c, h, w], &mut r, 1.0)),
            ("w", random_tensor(&[co, c, l, l], &mut r, 1.0)),
            ("dw", random_tensor(&[c, l, l], &mut r, 1.0)),
            ("pw", random_tensor(&[co, c], &mut r, 1.0)),
        ]);
        let err = fd_max_err(&params, |tape, ids| tape.conv2d(ids["x"], ids["w"]));
        assert!(err < 1e-4, "conv2d trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| {
            tape.depthwise_conv2d(ids["x"], ids["dw"])
        });
        assert!(err < 1e-4, "depthwise trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| {
            tape.pointwise_conv(ids["x"], ids["pw"])
        });
        assert!(err < 1e-4, "pointwise trial {trial}: {err}");
    }
}

#[test]
fn pooling_relu_and_elementwise_20_random_shapes() {
    let mut r = rng(3);
    for trial in 0..20 {
        let b = r.gen_range(1..3usize);
        let c = r.gen_range(1..3usize);
        let win = r.gen_range(2..4usize);
        let stride = r.gen_range(1..3usize);
        let h = r.gen_range(win..win + 4);
        let w = r.gen_range(win..win + 4);
        // well-separated values keep max-pool argmax away from FD kinks
        let x = Tensor::from_fn(vec![b, c, h, w], |i| {
            (i as f64 * 0.619).sin() * 3.0 + (i as f64 * 0.113).cos()
        });
        let params = params_of(vec![("x", x)]);
        let err = fd_max_err(&params, |tape, ids| tape.maxpool(ids["x"], win, stride));
        assert!(err < 1e-4, "maxpool trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| tape.avgpool(ids["x"], win, stride));
        assert!(err < 1e-4, "avgpool trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| tape.relu(ids["x"]));
        assert!(err < 1e-4, "relu trial {trial}: {err}");

        let n = r.gen_range(1..6usize);
        let params = params_of(vec![
            ("a", random_tensor(&[n, 3], &mut r, 1.0)),
            ("b", random_tensor(&[n, 3], &mut r, 1.0)),
        ]);
        let err = fd_max_err(&params, |tape, ids| tape.mul(ids["a"], ids["b"]));
        assert!(err < 1e-4, "mul trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| tape.add(ids["a"], ids["b"]));
        assert!(err < 1e-4, "add trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| {
            let s = tape.scale(ids["a"], -1.7)?;
            let t = tape.sum_all(s)?;
            tape.reshape(t, vec![1])
        });
        assert!(err < 1e-4, "scale/sum trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| {
            tape.concat(&[ids["a"], ids["b"], ids["a"]], 1)
        });
        assert!(err < 1e-4, "concat trial {trial}: {err}");
    }
}

#[test]
fn softmax_softlog_log_batchnorm_20_random_shapes() {
    let mut r = rng(4);
    for trial in 0..20 {
        let s = r.gen_range(1..4usize);
        let k = r.gen_range(2..6usize);
        let params = params_of(vec![("x", random_tensor(&[s, k], &mut r, 2.0))]);
        let err = fd_max_err(&params, |tape, ids| {
            let p = tape.softmax(ids["x"])?;
            tape.softlog(p)
        });
        assert!(err < 1e-4, "softmax+softlog trial {trial}: {err}");

        // softlog and plain log on interior probabilities
        let probs = Tensor::from_fn(vec![s, k], |i| 0.1 + 0.8 * ((i as f64 * 0.37).sin() * 0.5 + 0.5));
        let params = params_of(vec![("p", probs)]);
        let err = fd_max_err(&params, |tape, ids| tape.softlog(ids["p"]));
        assert!(err < 1e-4, "softlog trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| tape.log(ids["p"]));
        assert!(err < 1e-4, "log trial {trial}: {err}");

        // batchnorm, training statistics
        let b = r.gen_range(2..4usize);
        let c = r.gen_range(1..3usize);
        let h = r.gen_range(1..4usize);
        let w = r.gen_range(1..4usize);
        let params = params_of(vec![
            ("x", random_tensor(&[b, c, h, w], &mut r, 1.5)),
            ("gamma", random_tensor(&[c], &mut r, 0.5).map(|v| v + 1.0)),
            ("beta", random_tensor(&[c], &mut r, 0.5)),
        ]);
        let err = fd_max_err(&params, |tape, ids| {
            Ok(tape
                .batchnorm(ids["x"], ids["gamma"], ids["beta"], 1e-5, None)?
                .id)
        });
        assert!(err < 1e-4, "batchnorm trial {trial}: {err}");
    }
}

#[test]
fn affine_combine_and_integrator_both_modes() {
    let mut r = rng(5);
    for trial in 0..10 {
        let s = r.gen_range(1..3usize);
        let k = r.gen_range(2..5usize);
        let b = r.gen_range(2..4usize);
        let mut entries = vec![("w".to_string(), random_tensor(&[b], &mut r, 1.0))];
        entries.push((
            "wd".to_string(),
            random_tensor(&[k, b * k], &mut r, 1.0),
        ));
        for bi in 0..b {
            entries.push((format!("logit{bi}"), random_tensor(&[s, k], &mut r, 1.5)));
        }
        let params: ParamSet = entries.into_iter().collect();
        let make_probs = move |tape: &mut Tape<f64>,
                               ids: &BTreeMap<String, ValueId>|
              -> Result<Vec<ValueId>> {
            (0..b)
                .map(|bi| tape.softmax(ids[&format!("logit{bi}")]))
                .collect()
        };
        let err = fd_max_err(&params, |tape, ids| {
            let probs = make_probs(tape, ids)?;
            softlog_softmax_integrator(tape, &probs, IntegratorMode::ScalarPerBranch, ids["w"])
        });
        assert!(err < 1e-4, "scalar integrator trial {trial}: {err}");
        let err = fd_max_err(&params, |tape, ids| {
            let probs = make_probs(tape, ids)?;
            softlog_softmax_integrator(tape, &probs, IntegratorMode::DensePerClass, ids["wd"])
        });
        assert!(err < 1e-4, "dense integrator trial {trial}: {err}");
    }
}

#[test]
fn dense_layer_is_tight_to_1e6() {
    let mut r = rng(6);
    let params = params_of(vec![("w", random_tensor(&[4, 10], &mut r, 0.7))]);
    let x = random_tensor(&[3, 10], &mut r, 1.0);
    let targets = vec![0usize, 2, 1];
    let eval = move |ps: &ParamSet, want: bool| {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone())?;
        let wi = tape.param("w", ps["w"].clone())?;
        let logits = tape.matmul_tb(xi, wi)?;
        let p = tape.softmax(logits)?;
        let loss = head_loss(&mut tape, p, &targets, 4, LossMode::Softlog)?;
        let v = tape.value(loss).data()[0];
        let g = if want { Some(tape.backward(loss)?) } else { None };
        Ok((v, g))
    };
    let report = grad_check(&params, eval, EPS).unwrap();
    assert!(report.max_rel_err < 1e-6, "{report}");
}

fn model_check(spec: EnsembleSpec, batch: Tensor<f64>, targets: Vec<usize>, seed: u64) -> f64 {
    let mut graph = ModelGraph::<f64>::build(spec).unwrap();
    graph.init_params(seed);
    let k = graph.spec().class_count;
    let params: ParamSet = graph.params().clone();
    let eval = move |ps: &ParamSet, want: bool| {
        let candidate = graph.with_params(ps)?;
        let mut tape = Tape::new();
        let pass = candidate.forward(&mut tape, &batch, Mode::Train)?;
        let loss = head_loss(&mut tape, pass.heads[16], &targets, k, LossMode::Softlog)?;
        let v = tape.value(loss).data()[0];
        let g = if want { Some(tape.backward(loss)?) } else { None };
        Ok((v, g))
    };
    grad_check(&params, eval, EPS).unwrap().max_rel_err
}

#[test]
fn branch_n2_at_eighth_scale_16x16() {
    // single-branch ensemble membership isn't a thing; check the branch
    // through its own head by zero-weighting nothing: build the full spec
    // but measure only the N2 path via a dedicated tiny graph.
    let mut r = rng(7);
    let spec = dragonfly_core::frustum::BranchSpec::canonical(2, 0.125).unwrap();
    let branch = dragonfly_core::frustum::build_branch(&spec, 2, (16, 16, 1)).unwrap();
    assert_eq!(branch.conv_block_count(), 3);

    // Drive the branch through the full graph API with every other branch
    // contributing: cheaper and stricter is the whole-model test below, so
    // here check the composed ops that make up an N2 column directly.
    let params = params_of(vec![
        ("w1", random_tensor(&[4, 1, 3, 3], &mut r, 0.5)),
        ("g1", random_tensor(&[4], &mut r, 0.3).map(|v| v + 1.0)),
        ("b1", random_tensor(&[4], &mut r, 0.3)),
        ("w2", random_tensor(&[4, 4, 3, 3], &mut r, 0.5)),
        ("g2", random_tensor(&[4], &mut r, 0.3).map(|v| v + 1.0)),
        ("b2", random_tensor(&[4], &mut r, 0.3)),
        ("w3", random_tensor(&[4, 4, 3, 3], &mut r, 0.5)),
        ("g3", random_tensor(&[4], &mut r, 0.3).map(|v| v + 1.0)),
        ("b3", random_tensor(&[4], &mut r, 0.3)),
        ("dcn", random_tensor(&[2, 4], &mut r, 0.5)),
    ]);
    let x = random_tensor(&[2, 1, 16, 16], &mut r, 0.5).map(|v| v * 0.5 + 0.5);
    let targets = vec![0usize, 1];
    let eval = move |ps: &ParamSet, want: bool| {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone())?;
        let mut ids = BTreeMap::new();
        for (name, t) in ps {
            ids.insert(name.clone(), tape.param(name, t.clone())?);
        }
        // N2 column at 16x16: conv/bn/pool/relu, conv/bn/(skip)/relu, conv/bn
        let c1 = tape.conv2d(xi, ids["w1"])?;
        let n1 = tape.batchnorm(c1, ids["g1"], ids["b1"], 1e-5, None)?.id;
        let p1 = tape.maxpool(n1, 5, 2)?;
        let r1 = tape.relu(p1)?;
        let c2 = tape.conv2d(r1, ids["w2"])?;
        let n2 = tape.batchnorm(c2, ids["g2"], ids["b2"], 1e-5, None)?.id;
        let r2 = tape.relu(n2)?;
        let c3 = tape.conv2d(r2, ids["w3"])?;
        let n3 = tape.batchnorm(c3, ids["g3"], ids["b3"], 1e-5, None)?.id;
        let flat = tape.reshape(n3, vec![2, 4])?;
        let logits = tape.matmul_tb(flat, ids["dcn"])?;
        let p = tape.softmax(logits)?;
        let loss = head_loss(&mut tape, p, &targets, 2, LossMode::Softlog)?;
        let v = tape.value(loss).data()[0];
        let g = if want { Some(tape.backward(loss)?) } else { None };
        Ok((v, g))
    };
    let report = grad_check(&params, eval, EPS).unwrap();
    assert!(report.max_rel_err < 1e-3, "{report}");
}

#[test]
fn full_ensemble_at_eighth_scale_16x16() {
    let spec =
        EnsembleSpec::canonical(2, (16, 16, 1), 0.125, IntegratorMode::DensePerClass).unwrap();
    let mut r = rng(8);
    let batch = Tensor::from_fn(vec![2, 1, 16, 16], |_| r.gen::<f64>());
    let err = model_check(spec, batch, vec![0, 1], 21);
    assert!(err < 1e-3, "full ensemble max rel err {err}");
}

//! Shared helpers for the integration and acceptance suites: naive
//! reference oracles (Kahan-compensated, algebraically independent routes)
//! and random simplex points.

#![allow(dead_code)]

use dragonfly_core::softlog::{ratio_kernel, softlog_general, ProbVec, SoftlogParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn kahan(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

pub fn entropy_oracle(p: &ProbVec) -> f64 {
    let params = SoftlogParams::canonical();
    -kahan(
        p.values()
            .iter()
            .map(|&v| v * softlog_general(v.max(0.0), params).unwrap()),
    )
}

pub fn cross_entropy_oracle(p: &ProbVec, q: &ProbVec) -> f64 {
    let params = SoftlogParams::canonical();
    -kahan(
        p.values()
            .iter()
            .zip(q.values())
            .map(|(&a, &b)| a * softlog_general(b.max(0.0), params).unwrap()),
    )
}

pub fn relative_entropy_oracle(p: &ProbVec, q: &ProbVec) -> f64 {
    0.5 * kahan(
        p.values()
            .iter()
            .zip(q.values())
            .map(|(&a, &b)| a * (ratio_kernel(a) / ratio_kernel(b)).ln()),
    )
}

/// Single-pass route `1/4 * sum (p_k - q_k) * ln(g(p_k)/g(q_k))`, distinct
/// from the implementation's symmetrized-halves route.
pub fn sld_oracle(p: &ProbVec, q: &ProbVec) -> f64 {
    0.25 * kahan(
        p.values()
            .iter()
            .zip(q.values())
            .map(|(&a, &b)| (a - b) * (ratio_kernel(a) / ratio_kernel(b)).ln()),
    )
}

/// Finite-difference check of a tape subgraph: loss is a fixed random
/// projection of the output, gradients compared at every parameter
/// element. Returns the worst relative error.
pub fn fd_max_err(
    params: &dragonfly_core::ParamSet,
    build: impl Fn(
        &mut dragonfly_core::Tape<f64>,
        &std::collections::BTreeMap<String, dragonfly_core::ValueId>,
    ) -> dragonfly_core::Result<dragonfly_core::ValueId>,
    eps: f64,
) -> f64 {
    use dragonfly_core::Tensor;
    let eval = |ps: &dragonfly_core::ParamSet,
                want: bool|
     -> dragonfly_core::Result<(f64, Option<dragonfly_core::GradMap<f64>>)> {
        let mut tape = dragonfly_core::Tape::new();
        let mut ids = std::collections::BTreeMap::new();
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
    dragonfly_core::grad_check(params, eval, eps)
        .unwrap()
        .max_rel_err
}

/// Random simplex point mixing dense, sparse and Dirac draws.
pub fn random_probvec(k: usize, rng: &mut ChaCha8Rng) -> ProbVec {
    match rng.gen_range(0..4u8) {
        0 => ProbVec::dirac(k, rng.gen_range(0..k)).unwrap(),
        1 => {
            let mut w: Vec<f64> = (0..k)
                .map(|i| if i % 2 == 0 { -(rng.gen::<f64>()).ln() } else { 0.0 })
                .collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            ProbVec::new(w).unwrap()
        }
        _ => {
            let mut w: Vec<f64> = (0..k).map(|_| -(rng.gen::<f64>()).ln()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            ProbVec::new(w).unwrap()
        }
    }
}

//! Bounded-logarithm information measures.
//!
//! The softlog maps the probability interval [0,1] onto [-1,1] through
//! `ln(a*x + b)` with `a = e - 1/e`, `b = 1/e`, so that a logarithm can sit
//! inside cross-entropy and divergence formulas without ever reaching
//! `ln(0) = -inf`. Entropy, cross-entropy and relative entropy built on it
//! stay on closed intervals, and the symmetric divergence [`sld`] lands in
//! [0,1] with 0 only at equality.

use crate::error::{Error, Result};

/// Domain tolerance for probability inputs; values this far outside [0,1]
/// are clamped (32-bit softmax rows can leak just past the endpoints),
/// anything worse is a domain error.
pub const DOMAIN_TOL: f64 = 1e-9;

/// `a = e - 1/e`, computed from the platform exponential so the endpoint
/// identities hold to machine precision.
pub fn alpha_e() -> f64 {
    let e = 1f64.exp();
    e - 1.0 / e
}

/// `b = 1/e`.
pub fn beta_e() -> f64 {
    (-1f64).exp()
}

/// Scale/shift pair of the parametric logarithm `ln(alpha*x + beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftlogParams {
    pub alpha: f64,
    pub beta: f64,
}

impl SoftlogParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::domain("softlog_general", format!("alpha {alpha} <= 0")));
        }
        if beta < 0.0 {
            return Err(Error::domain("softlog_general", format!("beta {beta} < 0")));
        }
        Ok(SoftlogParams { alpha, beta })
    }

    /// The canonical pair mapping [0,1] onto [-1,1].
    pub fn canonical() -> Self {
        SoftlogParams {
            alpha: alpha_e(),
            beta: beta_e(),
        }
    }
}

/// Parametric logarithm `ln(alpha*x + beta)`; errors when the argument of
/// the log is not positive.
pub fn softlog_general(x: f64, params: SoftlogParams) -> Result<f64> {
    let arg = params.alpha * x + params.beta;
    if !(arg > 0.0) {
        return Err(Error::domain(
            "softlog_general",
            format!("ln argument {arg} (x={x}, alpha={}, beta={})", params.alpha, params.beta),
        ));
    }
    Ok(arg.ln())
}

/// Clamp a probability into [0,1], rejecting values beyond [`DOMAIN_TOL`].
fn clamp_prob(op: &'static str, x: f64) -> Result<f64> {
    if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&x) {
        return Err(Error::domain(op, format!("{x} outside [0,1] tolerance band")));
    }
    Ok(x.clamp(0.0, 1.0))
}

/// The softlog: monotone bijection [0,1] -> [-1,1] with exact endpoints.
pub fn softlog(x: f64) -> Result<f64> {
    let x = clamp_prob("softlog", x)?;
    Ok((alpha_e() * x + beta_e()).ln())
}

/// d/dx softlog(x) = a / (a*x + b); ranges over [1 - e^-2, e^2 - 1] on [0,1].
pub fn softlog_derivative(x: f64) -> Result<f64> {
    let x = clamp_prob("softlog", x)?;
    let a = alpha_e();
    Ok(a / (a * x + beta_e()))
}

/// Length-K categorical distribution on the simplex.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    /// Validates entries in [0,1] (within tolerance) summing to 1 within 1e-9.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("probvec", "empty distribution"));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&v) {
                return Err(Error::domain("probvec", format!("entry {v} outside [0,1]")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > DOMAIN_TOL {
            return Err(Error::domain("probvec", format!("sum {sum} != 1")));
        }
        Ok(ProbVec(values))
    }

    /// Dirac distribution concentrated on `class`.
    pub fn dirac(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::domain("probvec", format!("class {class} >= K={k}")));
        }
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Ok(ProbVec(v))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("probvec", "K = 0"));
        }
        Ok(ProbVec(vec![1.0 / k as f64; k]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

fn check_same_k(op: &'static str, a: &ProbVec, b: &ProbVec) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("K mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Batch cross-entropy with the softlog in place of the raw logarithm:
/// `-(1/S) * sum_s sum_k q_k * softlog(p_k)`. Finite for every input in
/// domain, exact zeros included, and inside [-1,1] for monolabel targets.
pub fn safe_cross_entropy(p_batch: &[ProbVec], q_batch: &[ProbVec]) -> Result<f64> {
    if p_batch.is_empty() || p_batch.len() != q_batch.len() {
        return Err(Error::shape(
            "safe_cross_entropy",
            format!("batch lengths {} vs {}", p_batch.len(), q_batch.len()),
        ));
    }
    let mut total = 0.0;
    for (p, q) in p_batch.iter().zip(q_batch) {
        check_same_k("safe_cross_entropy", p, q)?;
        for (&pk, &qk) in p.values().iter().zip(q.values()) {
            total += qk * softlog(pk)?;
        }
    }
    Ok(-total / p_batch.len() as f64)
}

/// Softlog categorical entropy `-sum_k p_k * softlog(p_k)`, in [-1,1]:
/// -1 for a Dirac, `-softlog(1/K)` for the uniform distribution.
pub fn softlog_entropy(p: &ProbVec) -> Result<f64> {
    let mut acc = 0.0;
    for &pk in p.values() {
        acc += pk * softlog(pk)?;
    }
    Ok(-acc)
}

/// Softlog categorical cross-entropy `-sum_k p_i[k] * softlog(p_j[k])`,
/// in [-1,1]; collapses to `1 - 2*p_i[k*]` when `p_j` is Dirac at `k*`.
pub fn softlog_cross_entropy(p_i: &ProbVec, p_j: &ProbVec) -> Result<f64> {
    check_same_k("softlog_cross_entropy", p_i, p_j)?;
    let mut acc = 0.0;
    for (&pi, &pj) in p_i.values().iter().zip(p_j.values()) {
        acc += pi * softlog(pj)?;
    }
    Ok(-acc)
}

/// `g(t) = (e^2 - 1) * t + 1`, the ratio kernel of the relative entropy.
pub fn ratio_kernel(t: f64) -> f64 {
    let e = 1f64.exp();
    (e * e - 1.0) * t + 1.0
}

/// Asymmetric softlog relative entropy
/// `(1/2) * sum_k p_i[k] * ln(g(p_i[k]) / g(p_j[k]))`.
///
/// Defined for every pair of distributions, zeros included; no bound is
/// asserted on the asymmetric form, only the symmetric [`sld`] carries the
/// [0,1] contract.
pub fn softlog_relative_entropy(p_i: &ProbVec, p_j: &ProbVec) -> Result<f64> {
    check_same_k("softlog_relative_entropy", p_i, p_j)?;
    let mut acc = 0.0;
    for (&pi, &pj) in p_i.values().iter().zip(p_j.values()) {
        let pi = clamp_prob("softlog_relative_entropy", pi)?;
        let pj = clamp_prob("softlog_relative_entropy", pj)?;
        acc += pi * (ratio_kernel(pi) / ratio_kernel(pj)).ln();
    }
    Ok(0.5 * acc)
}

/// Symmetric softlog divergence, in [0,1]; 0 iff the inputs coincide and 1
/// exactly for opposite Diracs.
pub fn sld(p_i: &ProbVec, p_j: &ProbVec) -> Result<f64> {
    check_same_k("sld", p_i, p_j)?;
    Ok(0.5 * (softlog_relative_entropy(p_i, p_j)? + softlog_relative_entropy(p_j, p_i)?))
}

/// Mean divergence of two aligned output lists over the same example set.
pub fn mean_sld(outputs_i: &[ProbVec], outputs_ref: &[ProbVec]) -> Result<f64> {
    if outputs_i.is_empty() || outputs_i.len() != outputs_ref.len() {
        return Err(Error::shape(
            "mean_sld",
            format!("lengths {} vs {}", outputs_i.len(), outputs_ref.len()),
        ));
    }
    let mut acc = 0.0;
    for (p, q) in outputs_i.iter().zip(outputs_ref) {
        acc += sld(p, q)?;
    }
    Ok(acc / outputs_i.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TIGHT: f64 = 1e-12;

    #[test]
    fn general_form_recovers_endpoints_and_plain_log() {
        let c = SoftlogParams::canonical();
        assert!((softlog_general(0.0, c).unwrap() + 1.0).abs() < TIGHT);
        assert!((softlog_general(1.0, c).unwrap() - 1.0).abs() < TIGHT);
        let plain = SoftlogParams::new(1.0, 0.0).unwrap();
        assert_eq!(softlog_general(1.0, plain).unwrap(), 0.0);
    }

    #[test]
    fn general_form_rejects_nonpositive_argument() {
        let plain = SoftlogParams::new(1.0, 0.0).unwrap();
        assert!(softlog_general(0.0, plain).is_err());
        assert!(softlog_general(-1.0, plain).is_err());
        assert!(SoftlogParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn softlog_endpoints_zero_crossing_and_midpoint() {
        assert!((softlog(0.0).unwrap() + 1.0).abs() < TIGHT);
        assert!((softlog(1.0).unwrap() - 1.0).abs() < TIGHT);
        // (e - 1/e) * x + 1/e = 1 solved by x = 1/(1+e)
        let e = 1f64.exp();
        assert!(softlog(1.0 / (1.0 + e)).unwrap().abs() < TIGHT);
        // ln((e^2+1)/(2e)), frozen from a 30-digit evaluation
        assert!((softlog(0.5).unwrap() - 0.433_780_830_483_027_2).abs() < TIGHT);
    }

    #[test]
    fn softlog_clamps_tolerance_band_and_rejects_beyond() {
        assert!((softlog(-1e-10).unwrap() + 1.0).abs() < TIGHT);
        assert!((softlog(1.0 + 1e-10).unwrap() - 1.0).abs() < TIGHT);
        assert!(softlog(-1e-8).is_err());
        assert!(softlog(1.0 + 1e-8).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let hit = ProbVec::dirac(2, 0).unwrap();
        let miss = ProbVec::dirac(2, 1).unwrap();
        let half = ProbVec::new(vec![0.5, 0.5]).unwrap();
        assert!((safe_cross_entropy(&[hit.clone()], &[hit.clone()]).unwrap() + 1.0).abs() < TIGHT);
        assert!((safe_cross_entropy(&[miss], &[hit.clone()]).unwrap() - 1.0).abs() < TIGHT);
        assert!(
            (safe_cross_entropy(&[half], &[hit]).unwrap() + 0.433_780_830_483_027_2).abs() < TIGHT
        );
    }

    #[test]
    fn cross_entropy_rejects_mismatched_batches() {
        let a = ProbVec::uniform(2).unwrap();
        let b = ProbVec::uniform(3).unwrap();
        assert!(safe_cross_entropy(&[a.clone()], &[b]).is_err());
        assert!(safe_cross_entropy(&[a.clone(), a.clone()], &[a]).is_err());
        assert!(safe_cross_entropy(&[], &[]).is_err());
    }

    #[test]
    fn entropy_dirac_and_uniform() {
        let dirac = ProbVec::dirac(5, 2).unwrap();
        assert!((softlog_entropy(&dirac).unwrap() + 1.0).abs() < TIGHT);
        for k in [2usize, 3, 4, 10, 64] {
            let u = ProbVec::uniform(k).unwrap();
            let expected = -softlog(1.0 / k as f64).unwrap();
            assert!((softlog_entropy(&u).unwrap() - expected).abs() < TIGHT);
        }
        let u2 = ProbVec::uniform(2).unwrap();
        assert!((softlog_entropy(&u2).unwrap() + 0.433_780_830_483_027_2).abs() < TIGHT);
    }

    #[test]
    fn cross_entropy_dirac_cases() {
        let d0 = ProbVec::dirac(3, 0).unwrap();
        let d1 = ProbVec::dirac(3, 1).unwrap();
        assert!((softlog_cross_entropy(&d0, &d0).unwrap() + 1.0).abs() < TIGHT);
        assert!((softlog_cross_entropy(&d0, &d1).unwrap() - 1.0).abs() < TIGHT);
        // closed form 1 - 2f against a Dirac reference
        let p = ProbVec::new(vec![0.3, 0.7]).unwrap();
        let q = ProbVec::dirac(2, 0).unwrap();
        assert!((softlog_cross_entropy(&p, &q).unwrap() - 0.4).abs() < TIGHT);
    }

    #[test]
    fn relative_entropy_examples() {
        let half = ProbVec::new(vec![0.5, 0.5]).unwrap();
        let d0 = ProbVec::dirac(2, 0).unwrap();
        let d1 = ProbVec::dirac(2, 1).unwrap();
        assert!(softlog_relative_entropy(&half, &half).unwrap().abs() < TIGHT);
        assert!((softlog_relative_entropy(&d1, &d0).unwrap() - 1.0).abs() < TIGHT);
        // 1/4 * ln(((e^2+1)/2)^2 / e^2), frozen from a 30-digit evaluation
        assert!(
            (softlog_relative_entropy(&half, &d0).unwrap() - 0.216_890_415_241_513_6).abs() < TIGHT
        );
        assert!(
            (softlog_relative_entropy(&d0, &half).unwrap() - 0.283_109_584_758_486_4).abs() < TIGHT
        );
    }

    #[test]
    fn sld_examples() {
        let half = ProbVec::new(vec![0.5, 0.5]).unwrap();
        let d0 = ProbVec::dirac(2, 0).unwrap();
        let d1 = ProbVec::dirac(2, 1).unwrap();
        assert!(sld(&half, &half).unwrap().abs() < TIGHT);
        assert!((sld(&d0, &d1).unwrap() - 1.0).abs() < TIGHT);
        // (0.21689... + 0.28310...) / 2 is exactly 1/4
        assert!((sld(&half, &d0).unwrap() - 0.25).abs() < TIGHT);
        let a = ProbVec::new(vec![0.2, 0.8]).unwrap();
        let b = ProbVec::new(vec![0.6, 0.4]).unwrap();
        assert!((sld(&a, &b).unwrap() - sld(&b, &a).unwrap()).abs() == 0.0);
    }

    #[test]
    fn mean_sld_examples() {
        let d0 = ProbVec::dirac(2, 0).unwrap();
        let d1 = ProbVec::dirac(2, 1).unwrap();
        let same = vec![d0.clone(), d1.clone()];
        assert!(mean_sld(&same, &same).unwrap().abs() < TIGHT);
        let left = vec![d0.clone(), d1.clone()];
        let right = vec![d1.clone(), d0.clone()];
        assert!((mean_sld(&left, &right).unwrap() - 1.0).abs() < TIGHT);
        let mixed_ref = vec![d0.clone(), d0.clone()];
        let mixed = vec![d0, d1];
        assert!((mean_sld(&mixed, &mixed_ref).unwrap() - 0.5).abs() < TIGHT);
        assert!(mean_sld(&mixed_ref, &[]).is_err());
    }

    #[test]
    fn probvec_validation() {
        assert!(ProbVec::new(vec![0.5, 0.5]).is_ok());
        assert!(ProbVec::new(vec![0.6, 0.6]).is_err());
        assert!(ProbVec::new(vec![1.2, -0.2]).is_err());
        assert!(ProbVec::new(vec![]).is_err());
        assert_eq!(ProbVec::new(vec![0.5, 0.5]).unwrap().argmax(), 0);
        assert_eq!(ProbVec::new(vec![0.1, 0.9]).unwrap().argmax(), 1);
    }
}

//! Gradient checking against central finite differences (64-bit only).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::GradMap;
use crate::tensor::Tensor;

pub type ParamSet = BTreeMap<String, Tensor<f64>>;

/// Per-parameter worst relative error of analytic vs numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub evaluated: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, err) in &self.per_param {
            writeln!(f, "{name}: max rel err {err:.3e}")?;
        }
        write!(f, "overall: {:.3e} over {} elements", self.max_rel_err, self.evaluated)
    }
}

/// Relative error with an absolute floor so finite-difference noise on
/// near-zero gradients does not dominate.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-2);
    (analytic - numeric).abs() / scale
}

/// Compare the analytic gradients of a scalar function against central
/// finite differences at every parameter element.
///
/// `eval(params, want_grads)` must run the subgraph on a fresh tape and
/// return the loss value, plus the gradient map when `want_grads` is set.
pub fn grad_check<F>(params: &ParamSet, eval: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet, bool) -> Result<(f64, Option<GradMap<f64>>)>,
{
    let (_, grads) = eval(params, true)?;
    let grads = grads.ok_or_else(|| {
        Error::InvalidArgument("grad_check eval returned no gradients".into())
    })?;

    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut evaluated = 0usize;

    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?
            .clone();
        let len = params[&name].len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = work[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
            evaluated += 1;
        }
        max_rel = max_rel.max(worst);
        per_param.insert(name, worst);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        evaluated,
    })
}

//! Performance tensor and Ability summary over Monte-Carlo accuracy sets.

use crate::error::{Error, Result};

/// Four order/centrality statistics of a trial accuracy set, in percent.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerfTensor {
    pub min: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

impl PerfTensor {
    pub fn new(min: f64, mean: f64, median: f64, max: f64) -> Result<Self> {
        let t = PerfTensor {
            min,
            mean,
            median,
            max,
        };
        if !(min <= median && median <= max && min <= mean && mean <= max) {
            return Err(Error::InvalidArgument(format!(
                "inconsistent performance tensor {t:?}"
            )));
        }
        Ok(t)
    }
}

/// Convex weights of the Ability combination; defaults 1/2, 1/4, 1/4.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AbilityWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for AbilityWeights {
    fn default() -> Self {
        AbilityWeights {
            alpha: 0.5,
            beta: 0.25,
            gamma: 0.25,
        }
    }
}

impl AbilityWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || gamma < 0.0 {
            return Err(Error::InvalidArgument(
                "ability weights must be non-negative".into(),
            ));
        }
        if (alpha + beta + gamma - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "ability weights must sum to 1, got {}",
                alpha + beta + gamma
            )));
        }
        Ok(AbilityWeights { alpha, beta, gamma })
    }
}

/// Exact order statistics of a non-empty accuracy set; even-length medians
/// take the midpoint of the two central values.
pub fn perf_tensor(z: &[f64]) -> Result<PerfTensor> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("empty trial set".into()));
    }
    for &v in z {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "accuracy {v} outside [0,100]"
            )));
        }
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    PerfTensor::new(sorted[0], mean, median, sorted[n - 1])
}

/// `alpha*Max + beta*(Mean+Median)/2 + gamma*Min`; with convex weights the
/// result stays inside [Min, Max].
pub fn ability(t: &PerfTensor, w: &AbilityWeights) -> f64 {
    w.alpha * t.max + w.beta * (t.mean + t.median) / 2.0 + w.gamma * t.min
}

pub const CSV_HEADER: &str = "experiment,head,n_trials,min,mean,median,max,ability";

/// One report row in the fixed CSV schema.
pub fn csv_row(experiment: u8, head: &str, n_trials: usize, t: &PerfTensor, a: f64) -> String {
    format!(
        "{experiment},{head},{n_trials},{:.4},{:.4},{:.4},{:.4},{:.4}",
        t.min, t.mean, t.median, t.max, a
    )
}

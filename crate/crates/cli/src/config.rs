//! Declarative experiment configuration: JSON in, fully-defaulted and
//! validated configuration out, with aggregated, path-annotated errors.

use std::collections::BTreeMap;
use std::path::Path;

use dragonfly_core::frustum::EnsembleSpec;
use dragonfly_core::layers::{parse_layer_notation, IntegratorMode, LayerSpec};
use dragonfly_core::presets;
use dragonfly_core::synth::Experiment;
use dragonfly_core::train::{LossMode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Per-class (train, val, test) sample counts.
    pub counts: (usize, usize, usize),
    pub image_size: usize,
    pub previews: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub width_scale: f64,
    pub integrator_mode: IntegratorMode,
    /// Optional final-pool overrides per branch, as layer tokens,
    /// e.g. `"n01": ["F7[v3]", "G11[v5]"]`.
    #[serde(default)]
    pub final_pools: BTreeMap<String, (String, String)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_mode: LossMode,
    pub aux_loss: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub trials: usize,
    pub learning_rates: Vec<f64>,
    /// Head whose test accuracy forms Z (1..=17).
    pub head: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SldSection {
    pub split: String,
    pub bins: usize,
}

/// A fully-resolved experiment configuration; a pipeline run is
/// reproducible from this plus the seed it contains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: u8,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub montecarlo: MonteCarloSection,
    pub sld: SldSection,
}

impl ExperimentConfig {
    pub fn defaults(experiment: u8) -> Self {
        let exp = Experiment::from_id(experiment).unwrap_or(Experiment::BinaryIo);
        let preset = presets::desk_preset(exp);
        ExperimentConfig {
            experiment,
            seed: 1,
            dataset: DatasetSection {
                counts: preset.counts,
                image_size: preset.image_size,
                previews: 4,
            },
            model: ModelSection {
                width_scale: preset.width_scale,
                integrator_mode: IntegratorMode::DensePerClass,
                final_pools: BTreeMap::new(),
            },
            train: TrainSection {
                learning_rate: preset.train.learning_rate,
                momentum: preset.train.momentum,
                batch_size: preset.train.batch_size,
                epochs: preset.train.epochs,
                loss_mode: LossMode::Softlog,
                aux_loss: false,
            },
            montecarlo: MonteCarloSection {
                trials: 5,
                learning_rates: presets::LEARNING_RATES.to_vec(),
                head: 17,
            },
            sld: SldSection {
                split: "test".to_string(),
                bins: 20,
            },
        }
    }

    pub fn experiment_kind(&self) -> Result<Experiment, String> {
        Experiment::from_id(self.experiment).map_err(|e| e.to_string())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
            width_scale: self.model.width_scale,
            loss_mode: self.train.loss_mode,
            aux_loss: self.train.aux_loss,
        }
    }

    pub fn ensemble_spec(&self) -> Result<EnsembleSpec, String> {
        let exp = self.experiment_kind()?;
        let mut spec = EnsembleSpec::canonical(
            exp.classes().len(),
            (self.dataset.image_size, self.dataset.image_size, 1),
            self.model.width_scale,
            self.model.integrator_mode,
        )
        .map_err(|e| e.to_string())?;
        for (branch, (avg, max)) in &self.model.final_pools {
            let slot = spec
                .branches
                .iter_mut()
                .find(|b| b.name() == *branch)
                .ok_or_else(|| format!("model.final_pools.{branch}: unknown branch"))?;
            match parse_layer_notation(avg) {
                Ok(LayerSpec::AvgPool { window, stride }) => slot.final_avg = (window, stride),
                Ok(other) => {
                    return Err(format!(
                        "model.final_pools.{branch}[0]: expected an F token, got {other}"
                    ))
                }
                Err(e) => return Err(format!("model.final_pools.{branch}[0]: {e}")),
            }
            match parse_layer_notation(max) {
                Ok(LayerSpec::MaxPool { window, stride }) => slot.final_max = (window, stride),
                Ok(other) => {
                    return Err(format!(
                        "model.final_pools.{branch}[1]: expected a G token, got {other}"
                    ))
                }
                Err(e) => return Err(format!("model.final_pools.{branch}[1]: {e}")),
            }
        }
        Ok(spec)
    }
}

/// Strip keys starting with `_` (the template's comment convention),
/// recursively.
fn strip_comments(value: Value) -> Value {
    match value {
        Value::Object(map) => Value::Object(
            map.into_iter()
                .filter(|(k, _)| !k.starts_with('_'))
                .map(|(k, v)| (k, strip_comments(v)))
                .collect(),
        ),
        Value::Array(items) => Value::Array(items.into_iter().map(strip_comments).collect()),
        other => other,
    }
}

fn merge_defaults(user: &Value, defaults: Value) -> Value {
    match (user, defaults) {
        (Value::Object(u), Value::Object(d)) => {
            let mut out = serde_json::Map::new();
            for (k, dv) in d {
                match u.get(&k) {
                    Some(uv) => out.insert(k, merge_defaults(uv, dv)),
                    None => out.insert(k, dv),
                };
            }
            // keep unknown user keys so deny_unknown_fields can name them
            for (k, uv) in u {
                if !out.contains_key(k) {
                    out.insert(k.clone(), uv.clone());
                }
            }
            Value::Object(out)
        }
        (user, _) => user.clone(),
    }
}

/// Parse, default-fill and validate a config file. All detectable problems
/// are aggregated into one error list.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let raw: Value =
        serde_json::from_str(&text).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    let raw = strip_comments(raw);

    let experiment = raw
        .get("experiment")
        .and_then(Value::as_u64)
        .ok_or_else(|| vec!["experiment: required integer 1..=3".to_string()])?;
    let mut errors = Vec::new();
    if !(1..=3).contains(&experiment) {
        errors.push(format!("experiment: {experiment} outside 1..=3"));
    }

    let defaults = serde_json::to_value(ExperimentConfig::defaults(experiment.clamp(1, 3) as u8))
        .expect("defaults serialize");
    let merged = merge_defaults(&raw, defaults);
    let config: ExperimentConfig = match serde_json::from_value(merged) {
        Ok(c) => c,
        Err(e) => {
            errors.push(e.to_string());
            return Err(errors);
        }
    };

    if config.model.width_scale <= 0.0 {
        errors.push(format!(
            "model.width_scale: {} must be positive",
            config.model.width_scale
        ));
    }
    if config.train.learning_rate <= 0.0 {
        errors.push(format!(
            "train.learning_rate: {} must be positive",
            config.train.learning_rate
        ));
    }
    if config.train.batch_size == 0 {
        errors.push("train.batch_size: must be >= 1".to_string());
    }
    if config.train.epochs == 0 {
        errors.push("train.epochs: must be >= 1".to_string());
    }
    let (a, b, c) = config.dataset.counts;
    if a == 0 || b == 0 || c == 0 {
        errors.push(format!("dataset.counts: {:?} must all be >= 1", config.dataset.counts));
    }
    if config.dataset.image_size < 16 {
        errors.push(format!(
            "dataset.image_size: {} must be >= 16",
            config.dataset.image_size
        ));
    }
    if config.montecarlo.trials == 0 {
        errors.push("montecarlo.trials: must be >= 1".to_string());
    }
    if config.montecarlo.learning_rates.is_empty() {
        errors.push("montecarlo.learning_rates: must not be empty".to_string());
    }
    if !(1..=17).contains(&config.montecarlo.head) {
        errors.push(format!("montecarlo.head: {} outside 1..=17", config.montecarlo.head));
    }
    if !["train", "val", "test"].contains(&config.sld.split.as_str()) {
        errors.push(format!("sld.split: `{}` not one of train/val/test", config.sld.split));
    }
    if config.sld.bins < 2 {
        errors.push(format!("sld.bins: {} must be >= 2", config.sld.bins));
    }
    // a bad pool token must surface here, annotated with its key
    if config.model.width_scale > 0.0 {
        if let Err(e) = config.ensemble_spec() {
            errors.push(e);
        }
    }

    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}

/// Commented template: every field present, `_doc` keys explaining them.
pub fn template_json() -> String {
    let defaults = ExperimentConfig::defaults(1);
    let mut value = serde_json::to_value(&defaults).expect("serialize");
    let doc = |v: &mut Value, key: &str, text: &str| {
        if let Value::Object(map) = v {
            map.insert(format!("_doc_{key}"), Value::String(text.to_string()));
        }
    };
    doc(
        &mut value,
        "experiment",
        "1 = binary {I,O}; 2 = binary {B,D,O,Q}; 3 = texture-encrypted {I,O}",
    );
    doc(&mut value, "seed", "master seed; the whole run is reproducible from it");
    doc(
        &mut value,
        "dataset",
        "counts are per-class (train, val, test); full-scale counts are (3519, 621, 460)",
    );
    doc(
        &mut value,
        "model",
        "width_scale 1 is the published ensemble; 0.125 is the desk default. final_pools overrides take layer tokens like [\"F5[v1]\", \"G5[v2]\"]",
    );
    doc(
        &mut value,
        "train",
        "loss_mode plain-log exists only to demonstrate the explosion the softlog prevents",
    );
    doc(
        &mut value,
        "montecarlo",
        "trials per learning rate; Z is the chosen head's test accuracy",
    );
    serde_json::to_string_pretty(&value).expect("pretty")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn minimal_config_gets_full_defaults() {
        let (_d, path) = write(r#"{"experiment": 1}"#);
        let config = validate_config(&path).unwrap();
        assert_eq!(config.dataset.counts, (200, 50, 100));
        assert_eq!(config.train.epochs, 10);
        assert_eq!(config.montecarlo.learning_rates, vec![0.001, 0.005, 0.01]);
        assert_eq!(config.model.width_scale, 0.125);
    }

    #[test]
    fn bad_pool_token_is_named() {
        let (_d, path) = write(
            r#"{"experiment": 1, "model": {"final_pools": {"n01": ["F7[v3]", "G5[x2]"]}}}"#,
        );
        let errors = validate_config(&path).unwrap_err();
        assert!(
            errors.iter().any(|e| e.contains("final_pools.n01") && e.contains("position")),
            "{errors:?}"
        );
    }

    #[test]
    fn zero_width_scale_is_rejected() {
        let (_d, path) = write(r#"{"experiment": 1, "model": {"width_scale": 0.0}}"#);
        let errors = validate_config(&path).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("width_scale")), "{errors:?}");
    }

    #[test]
    fn multiple_errors_aggregate() {
        let (_d, path) = write(
            r#"{"experiment": 9, "train": {"epochs": 0}, "sld": {"bins": 1}}"#,
        );
        let errors = validate_config(&path).unwrap_err();
        assert!(errors.len() >= 3, "{errors:?}");
    }

    #[test]
    fn unknown_keys_are_named_but_comments_ignored() {
        let (_d, path) = write(r#"{"experiment": 1, "_doc": "hi", "train": {"epoks": 3}}"#);
        let errors = validate_config(&path).unwrap_err();
        assert!(errors.iter().any(|e| e.contains("epoks")), "{errors:?}");

        let (_d2, path2) = write(r#"{"experiment": 1, "_doc": "hi"}"#);
        assert!(validate_config(&path2).is_ok());
    }

    #[test]
    fn template_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, template_json()).unwrap();
        let config = validate_config(&path).unwrap();
        assert_eq!(config.experiment, 1);
    }
}

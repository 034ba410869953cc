//! Staged pipeline: dataset -> train -> montecarlo -> perf -> evaluate.
//!
//! Every stage hashes its inputs (config slice plus upstream hashes); a
//! rerun with an unchanged configuration skips completed stages, so
//! repeating a run is idempotent. Partial artifacts survive failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dragonfly_core::checkpoint::{load_checkpoint, save_checkpoint};
use dragonfly_core::frustum::ModelGraph;
use dragonfly_core::perf::{ability, perf_tensor, AbilityWeights};
use dragonfly_core::sld::{branch_sld_report, failure_report, write_report_dir};
use dragonfly_core::synth::{synth_dataset, DatasetManifest};
use dragonfly_core::train::{evaluate, monte_carlo, train, DatasetBundle, McConfig, McResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub message: String,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.message)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Built,
    Cached,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageState {
    input_hash: String,
    outputs: Vec<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StageLedger {
    stages: BTreeMap<String, StageState>,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub stages: Vec<(String, StageStatus)>,
    pub index: PathBuf,
}

pub const STAGES: [&str; 5] = ["dataset", "train", "montecarlo", "perf", "evaluate"];

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub workers: usize,
}

fn hash_of(value: &impl Serialize) -> String {
    let text = serde_json::to_string(value).expect("hash serialize");
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Pipeline {
    fn ledger_path(&self) -> PathBuf {
        self.out.join(".stages.json")
    }

    fn load_ledger(&self) -> StageLedger {
        std::fs::read_to_string(self.ledger_path())
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok())
            .unwrap_or_default()
    }

    fn store_ledger(&self, ledger: &StageLedger) -> Result<(), StageError> {
        std::fs::write(
            self.ledger_path(),
            serde_json::to_string_pretty(ledger).expect("ledger json"),
        )
        .map_err(|e| StageError {
            stage: "pipeline",
            message: e.to_string(),
        })
    }

    fn stage<F>(
        &self,
        ledger: &mut StageLedger,
        name: &'static str,
        input_hash: String,
        outputs: Vec<PathBuf>,
        build: F,
    ) -> Result<StageStatus, StageError>
    where
        F: FnOnce() -> Result<(), String>,
    {
        if let Some(state) = ledger.stages.get(name) {
            if state.input_hash == input_hash && state.outputs.iter().all(|p| p.exists()) {
                return Ok(StageStatus::Cached);
            }
        }
        build().map_err(|message| StageError { stage: name, message })?;
        ledger.stages.insert(
            name.to_string(),
            StageState {
                input_hash,
                outputs,
            },
        );
        self.store_ledger(ledger)?;
        Ok(StageStatus::Built)
    }

    pub fn run(&self) -> Result<RunSummary, StageError> {
        std::fs::create_dir_all(&self.out).map_err(|e| StageError {
            stage: "pipeline",
            message: e.to_string(),
        })?;
        let mut ledger = self.load_ledger();
        let mut statuses = Vec::new();
        let config = &self.config;
        let experiment = config.experiment_kind().map_err(|message| StageError {
            stage: "dataset",
            message,
        })?;
        let spec = config.ensemble_spec().map_err(|message| StageError {
            stage: "train",
            message,
        })?;

        // dataset
        let dataset_dir = self.out.join("dataset");
        let manifest_path = dataset_dir.join("manifest.json");
        let dataset_hash = hash_of(&(
            "dataset",
            config.experiment,
            config.dataset.counts,
            config.dataset.image_size,
            config.seed,
        ));
        let status = self.stage(
            &mut ledger,
            "dataset",
            dataset_hash.clone(),
            vec![manifest_path.clone()],
            || {
                synth_dataset(
                    experiment,
                    config.dataset.counts,
                    config.dataset.image_size,
                    config.seed,
                    &dataset_dir,
                    config.dataset.previews,
                )
                .map(|_| ())
                .map_err(|e| e.to_string())
            },
        )?;
        statuses.push(("dataset".to_string(), status));

        // train (the reference checkpoint for analysis)
        let checkpoint_dir = self.out.join("checkpoint");
        let train_config = config.train_config();
        let train_hash = hash_of(&("train", &dataset_hash, &train_config, &spec));
        let status = self.stage(
            &mut ledger,
            "train",
            train_hash.clone(),
            vec![checkpoint_dir.join("index.json")],
            || {
                let manifest = DatasetManifest::load(&manifest_path).map_err(|e| e.to_string())?;
                let data = DatasetBundle::load(&manifest).map_err(|e| e.to_string())?;
                let mut graph = ModelGraph::<f64>::build(spec.clone()).map_err(|e| e.to_string())?;
                let result = train(&mut graph, &data, &train_config).map_err(|e| e.to_string())?;
                save_checkpoint(&graph, Some(&train_config), Some(&manifest_path), &checkpoint_dir)
                    .map_err(|e| e.to_string())?;
                std::fs::write(
                    checkpoint_dir.join("trial.json"),
                    serde_json::to_string_pretty(&result).map_err(|e| e.to_string())?,
                )
                .map_err(|e| e.to_string())
            },
        )?;
        statuses.push(("train".to_string(), status));

        // montecarlo
        let trials_path = self.out.join("trials.json");
        let mc = McConfig {
            base: train_config.clone(),
            trials: config.montecarlo.trials,
            learning_rates: config.montecarlo.learning_rates.clone(),
            head: config.montecarlo.head,
            workers: self.workers,
        };
        // worker count is an execution detail, not an input
        let mc_hash = hash_of(&(
            "montecarlo",
            &dataset_hash,
            &spec,
            &train_config,
            config.montecarlo.trials,
            &config.montecarlo.learning_rates,
            config.montecarlo.head,
        ));
        let status = self.stage(
            &mut ledger,
            "montecarlo",
            mc_hash.clone(),
            vec![trials_path.clone()],
            || {
                let manifest = DatasetManifest::load(&manifest_path).map_err(|e| e.to_string())?;
                let data = DatasetBundle::load(&manifest).map_err(|e| e.to_string())?;
                let result = monte_carlo(&spec, &data, &mc).map_err(|e| e.to_string())?;
                std::fs::write(
                    &trials_path,
                    serde_json::to_string_pretty(&result).map_err(|e| e.to_string())?,
                )
                .map_err(|e| e.to_string())
            },
        )?;
        statuses.push(("montecarlo".to_string(), status));

        // perf
        let perf_csv = self.out.join("perf.csv");
        let perf_json = self.out.join("perf.json");
        let perf_hash = hash_of(&("perf", &mc_hash));
        let experiment_id = config.experiment;
        let status = self.stage(
            &mut ledger,
            "perf",
            perf_hash,
            vec![perf_csv.clone(), perf_json.clone()],
            || {
                let text = std::fs::read_to_string(&trials_path).map_err(|e| e.to_string())?;
                let result: McResult = serde_json::from_str(&text).map_err(|e| e.to_string())?;
                write_perf_outputs(experiment_id, &result, &perf_csv, &perf_json)
            },
        )?;
        statuses.push(("perf".to_string(), status));

        // evaluate: checkpoint accuracy plus the divergence reports
        let sld_dir = self.out.join("sld");
        let eval_path = self.out.join("eval.json");
        let eval_hash = hash_of(&("evaluate", &train_hash, &config.sld.split, config.sld.bins));
        let split = config.sld.split.clone();
        let status = self.stage(
            &mut ledger,
            "evaluate",
            eval_hash,
            vec![sld_dir.join("report.csv"), eval_path.clone()],
            || {
                let (graph, _) = load_checkpoint::<f64>(&checkpoint_dir).map_err(|e| e.to_string())?;
                let manifest = DatasetManifest::load(&manifest_path).map_err(|e| e.to_string())?;
                let data = DatasetBundle::load(&manifest).map_err(|e| e.to_string())?;
                let (images, labels) = data.split(&split).map_err(|e| e.to_string())?;
                let eval = evaluate(&graph, images, labels).map_err(|e| e.to_string())?;
                std::fs::write(
                    &eval_path,
                    serde_json::to_string_pretty(&eval).map_err(|e| e.to_string())?,
                )
                .map_err(|e| e.to_string())?;
                let report = branch_sld_report(&graph, images, labels).map_err(|e| e.to_string())?;
                let outputs: Vec<Vec<dragonfly_core::softlog::ProbVec>> = collect_outputs(&graph, images)
                    .map_err(|e| e.to_string())?;
                let failures = failure_report(&outputs, labels).map_err(|e| e.to_string())?;
                write_report_dir(
                    &report,
                    &failures,
                    Some((images, &manifest.classes)),
                    &sld_dir,
                )
                .map_err(|e| e.to_string())
            },
        )?;
        statuses.push(("evaluate".to_string(), status));

        // artifact index
        let index_path = self.out.join("index.json");
        let index = serde_json::json!({
            "config": config,
            "groups": {
                "dataset": manifest_path,
                "checkpoint": checkpoint_dir,
                "trials": trials_path,
                "perf": perf_csv,
                "sld": sld_dir,
            },
            "stages": statuses.iter().map(|(n, s)| (n.clone(), s.clone())).collect::<BTreeMap<_, _>>(),
        });
        std::fs::write(
            &index_path,
            serde_json::to_string_pretty(&index).expect("index json"),
        )
        .map_err(|e| StageError {
            stage: "pipeline",
            message: e.to_string(),
        })?;

        Ok(RunSummary {
            stages: statuses,
            index: index_path,
        })
    }
}

pub fn collect_outputs(
    graph: &ModelGraph<f64>,
    images: &dragonfly_core::Tensor<f64>,
) -> dragonfly_core::Result<Vec<Vec<dragonfly_core::softlog::ProbVec>>> {
    let n = images.shape()[0];
    let sample: usize = images.shape()[1..].iter().product();
    let mut outputs: Vec<Vec<dragonfly_core::softlog::ProbVec>> =
        vec![Vec::with_capacity(n); dragonfly_core::frustum::HEAD_COUNT];
    let mut offset = 0;
    while offset < n {
        let end = (offset + 64).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - offset;
        let batch = dragonfly_core::Tensor::new(
            shape,
            images.data()[offset * sample..end * sample].to_vec(),
        )?;
        for (h, rows) in graph.forward_eval(&batch)?.into_iter().enumerate() {
            outputs[h].extend(rows);
        }
        offset = end;
    }
    Ok(outputs)
}

/// Per-head performance rows in the fixed CSV schema, the final head last.
pub fn write_perf_outputs(
    experiment: u8,
    result: &McResult,
    csv_path: &Path,
    json_path: &Path,
) -> Result<(), String> {
    use dragonfly_core::train::TrialOutcome;
    let completed: Vec<&dragonfly_core::train::TrialResult> = result
        .outcomes
        .iter()
        .filter_map(|o| match o {
            TrialOutcome::Completed { result } => Some(result),
            TrialOutcome::Failed { .. } => None,
        })
        .collect();
    if completed.is_empty() {
        return Err("no completed trials".to_string());
    }
    let weights = AbilityWeights::default();
    let mut csv = String::from(dragonfly_core::perf::CSV_HEADER);
    csv.push('\n');
    let mut rows_json = Vec::new();
    for head in 1..=dragonfly_core::frustum::HEAD_COUNT {
        let z: Vec<f64> = completed
            .iter()
            .map(|r| r.accuracies.test[head - 1])
            .collect();
        let tensor = perf_tensor(&z).map_err(|e| e.to_string())?;
        let a = ability(&tensor, &weights);
        csv.push_str(&dragonfly_core::perf::csv_row(
            experiment,
            &format!("N{head}"),
            z.len(),
            &tensor,
            a,
        ));
        csv.push('\n');
        rows_json.push(serde_json::json!({
            "head": format!("N{head}"),
            "n_trials": z.len(),
            "tensor": tensor,
            "ability": a,
            "z": z,
        }));
    }
    std::fs::write(csv_path, csv).map_err(|e| e.to_string())?;
    std::fs::write(
        json_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "experiment": experiment,
            "z_by_lr": result.z_by_lr,
            "heads": rows_json,
        }))
        .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())
}

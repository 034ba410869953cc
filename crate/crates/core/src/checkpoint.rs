//! Checkpoint directory: one tensor file per parameter and per running
//! statistic, plus a JSON index tying them to the ensemble description.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dft;
use crate::error::{Error, Result};
use crate::frustum::{EnsembleSpec, ModelGraph};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: PathBuf,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatEntry {
    pub name: String,
    pub mean_file: PathBuf,
    pub var_file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub spec: EnsembleSpec,
    pub dtype: DType,
    pub params: Vec<ParamEntry>,
    pub stats: Vec<StatEntry>,
    /// Training configuration that produced the checkpoint, when known.
    pub config: Option<TrainConfig>,
    /// Dataset manifest the checkpoint was trained against, when known.
    pub dataset_manifest: Option<PathBuf>,
    /// Per-branch audit: the layer tokens actually executed.
    pub layers: Vec<BranchAudit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchAudit {
    pub branch: String,
    pub tokens: Vec<String>,
    pub skipped: Vec<String>,
    pub param_count: usize,
}

fn file_name(param: &str) -> String {
    format!("{}.dft", param.replace('/', "_"))
}

pub fn save_checkpoint<E: Scalar>(
    graph: &ModelGraph<E>,
    config: Option<&TrainConfig>,
    dataset_manifest: Option<&Path>,
    dir: &Path,
) -> Result<()> {
    let params_dir = dir.join("params");
    let stats_dir = dir.join("stats");
    std::fs::create_dir_all(&params_dir)?;
    std::fs::create_dir_all(&stats_dir)?;

    let mut params = Vec::new();
    for (name, tensor) in graph.params() {
        let file = params_dir.join(file_name(name));
        dft::write_tensor(&file, tensor)?;
        params.push(ParamEntry {
            name: name.clone(),
            file,
            shape: tensor.shape().to_vec(),
        });
    }
    let mut stats = Vec::new();
    for (name, (mean, var)) in graph.bn_running() {
        let mean_file = stats_dir.join(file_name(&format!("{name}.mean")));
        let var_file = stats_dir.join(file_name(&format!("{name}.var")));
        dft::write_tensor(&mean_file, &Tensor::new(vec![mean.len()], mean.clone())?)?;
        dft::write_tensor(&var_file, &Tensor::new(vec![var.len()], var.clone())?)?;
        stats.push(StatEntry {
            name: name.clone(),
            mean_file,
            var_file,
        });
    }
    let layers = graph
        .branches()
        .iter()
        .map(|b| BranchAudit {
            branch: b.name.clone(),
            tokens: b.tokens.clone(),
            skipped: b.skipped.clone(),
            param_count: b.param_count(),
        })
        .collect();
    let index = CheckpointIndex {
        spec: graph.spec().clone(),
        dtype: E::DTYPE,
        params,
        stats,
        config: config.cloned(),
        dataset_manifest: dataset_manifest.map(|p| p.to_path_buf()),
        layers,
    };
    std::fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

pub fn load_index(dir: &Path) -> Result<CheckpointIndex> {
    let text = std::fs::read_to_string(dir.join("index.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuild a graph from a checkpoint directory; values promote or narrow
/// to the requested element type.
pub fn load_checkpoint<E: Scalar>(dir: &Path) -> Result<(ModelGraph<E>, CheckpointIndex)> {
    let index = load_index(dir)?;
    let mut graph = ModelGraph::<E>::build(index.spec.clone())?;
    for entry in &index.params {
        let tensor = dft::read(&entry.file)?.into_f64()?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: shape {:?} does not match index {:?}",
                entry.file.display(),
                tensor.shape(),
                entry.shape
            )));
        }
        graph.set_param(&entry.name, tensor.convert())?;
    }
    for entry in &index.stats {
        let mean = dft::read(&entry.mean_file)?.into_f64()?;
        let var = dft::read(&entry.var_file)?.into_f64()?;
        graph.set_bn_running(
            &entry.name,
            mean.data().iter().map(|&v| E::from_f64(v)).collect(),
            var.data().iter().map(|&v| E::from_f64(v)).collect(),
        )?;
    }
    Ok((graph, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::IntegratorMode;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let spec =
            EnsembleSpec::canonical(2, (32, 32, 1), 0.125, IntegratorMode::DensePerClass).unwrap();
        let mut graph = ModelGraph::<f64>::build(spec).unwrap();
        graph.init_params(77);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&graph, None, None, dir.path()).unwrap();
        let (loaded, index) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(graph.params(), loaded.params());
        assert_eq!(graph.bn_running(), loaded.bn_running());
        assert_eq!(index.dtype, DType::F64);
        assert_eq!(index.layers.len(), 12);
        assert!(index.layers[0].param_count > 0);
    }

    #[test]
    fn corrupt_index_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("index.json"), "{not json").unwrap();
        assert!(load_checkpoint::<f64>(dir.path()).is_err());
    }
}

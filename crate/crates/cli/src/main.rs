//! `dragonfly`: synth, train, evaluate and analyze the frustum ensemble
//! from the command line.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 stage failure.

mod config;
mod pipeline;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dragonfly_core::checkpoint::{load_checkpoint, save_checkpoint};
use dragonfly_core::frustum::{EnsembleSpec, ModelGraph};
use dragonfly_core::layers::IntegratorMode;
use dragonfly_core::presets;
use dragonfly_core::sld::{branch_sld_report, failure_report, write_report_dir};
use dragonfly_core::synth::{synth_dataset, DatasetManifest, Experiment};
use dragonfly_core::train::{
    evaluate, monte_carlo, train, DatasetBundle, LossMode, McConfig, McResult, TrainConfig,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F64,
    F32,
}

#[derive(Parser)]
#[command(
    name = "dragonfly",
    about = "Frustum-branch ensemble engine with softlog-softmax integrators",
    version
)]
struct Cli {
    /// Output format of the final report on stdout.
    #[arg(long, global = true, value_enum, default_value = "text")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a commented experiment-config template.
    Init(InitArgs),
    /// Generate a glyph dataset for one experiment.
    Synth(SynthArgs),
    /// Train one ensemble and write a checkpoint.
    Train(TrainArgs),
    /// Independent training trials over seeds and learning rates.
    Montecarlo(McArgs),
    /// Per-head accuracy of a checkpoint on a split.
    Eval(EvalArgs),
    /// Performance tensor and Ability from a trials file.
    Perf(PerfArgs),
    /// Divergence report, histograms and failure cases of a checkpoint.
    Sld(SldArgs),
    /// Finite-difference gradient verification.
    Gradcheck(GradcheckArgs),
    /// Full pipeline from a config file (idempotent per stage).
    Run(RunArgs),
}

#[derive(Args)]
struct InitArgs {
    /// Where to write the template.
    #[arg(long, default_value = "dragonfly.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment id: 1 binary {I,O}, 2 binary {B,D,O,Q}, 3 encrypted {I,O}.
    #[arg(long)]
    experiment: u8,
    /// Per-class train,val,test counts.
    #[arg(long, value_parser = parse_counts, default_value = "200,50,100")]
    counts: (usize, usize, usize),
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// PGM previews per split.
    #[arg(long, default_value_t = 4)]
    previews: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    experiment: u8,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Width scale; accepts decimals or fractions like `1/8`.
    #[arg(long, value_parser = parse_scale, default_value = "1/8")]
    scale: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "softlog")]
    loss_mode: CliLossMode,
    /// Add auxiliary losses on the community heads.
    #[arg(long)]
    aux: bool,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: Dtype,
    /// Existing dataset manifest; generated under --out when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliLossMode {
    Softlog,
    PlainLog,
}

impl From<CliLossMode> for LossMode {
    fn from(m: CliLossMode) -> Self {
        match m {
            CliLossMode::Softlog => LossMode::Softlog,
            CliLossMode::PlainLog => LossMode::PlainLog,
        }
    }
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    experiment: u8,
    /// Trials per learning rate.
    #[arg(long, default_value_t = 5)]
    trials: usize,
    /// Comma-separated learning rates.
    #[arg(long, value_parser = parse_lrs, default_value = "0.001,0.005,0.01")]
    lrs: std::vec::Vec<f64>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_parser = parse_scale, default_value = "1/8")]
    scale: f64,
    /// Head whose test accuracy forms Z.
    #[arg(long, default_value_t = 17)]
    head: usize,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Dataset manifest; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PerfArgs {
    /// Trials file produced by `montecarlo` or `run`.
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, default_value_t = 1)]
    experiment: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SldArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Input extent of the verification ensemble.
    #[arg(long, default_value_t = 16)]
    extent: usize,
    #[arg(long, value_parser = parse_scale, default_value = "1/8")]
    scale: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    #[arg(long, default_value_t = 505)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_counts(text: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err("expected train,val,test".to_string());
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, String>>()?;
    Ok((nums[0], nums[1], nums[2]))
}

fn parse_lrs(text: &str) -> Result<Vec<f64>, String> {
    text.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}")))
        .collect()
}

fn parse_scale(text: &str) -> Result<f64, String> {
    let value = if let Some((num, den)) = text.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|e| format!("{num}: {e}"))?;
        let d: f64 = den.trim().parse().map_err(|e| format!("{den}: {e}"))?;
        if d == 0.0 {
            return Err("zero denominator".to_string());
        }
        n / d
    } else {
        text.trim().parse().map_err(|e| format!("{text}: {e}"))?
    };
    if value > 0.0 {
        Ok(value)
    } else {
        Err(format!("width scale {value} must be positive"))
    }
}

/// Worker pool size: `DRAGONFLY_WORKERS` caps trial parallelism, the
/// machine's parallelism is the default, and there is never more than one
/// worker per job.
fn workers_from_env(jobs: usize) -> usize {
    let cpus = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("DRAGONFLY_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(cpus);
    cap.min(jobs).max(1)
}

fn emit(format: Format, json: serde_json::Value, text: String) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&json).expect("json")),
        Format::Text => println!("{text}"),
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn stage(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_STAGE,
            message: message.into(),
        }
    }
}

fn ensure_dataset(
    data: Option<&Path>,
    experiment: Experiment,
    size: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest, Failure> {
    match data {
        Some(path) => DatasetManifest::load(path).map_err(|e| Failure::config(e.to_string())),
        None => {
            let preset = presets::desk_preset(experiment);
            synth_dataset(experiment, preset.counts, size, seed, &out.join("dataset"), 0)
                .map_err(|e| Failure::stage(e.to_string()))
        }
    }
}

fn spec_for(experiment: Experiment, size: usize, scale: f64) -> Result<EnsembleSpec, Failure> {
    EnsembleSpec::canonical(
        experiment.classes().len(),
        (size, size, 1),
        scale,
        IntegratorMode::DensePerClass,
    )
    .map_err(|e| Failure::config(e.to_string()))
}

fn cmd_init(args: &InitArgs, format: Format) -> Result<(), Failure> {
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Failure::stage(e.to_string()))?;
        }
    }
    std::fs::write(&args.out, config::template_json())
        .map_err(|e| Failure::stage(e.to_string()))?;
    emit(
        format,
        serde_json::json!({"written": args.out}),
        format!("wrote config template to {}", args.out.display()),
    );
    Ok(())
}

fn cmd_synth(args: &SynthArgs, format: Format) -> Result<(), Failure> {
    let experiment =
        Experiment::from_id(args.experiment).map_err(|e| Failure::config(e.to_string()))?;
    let manifest = synth_dataset(
        experiment,
        args.counts,
        args.size,
        args.seed,
        &args.out,
        args.previews,
    )
    .map_err(|e| Failure::stage(e.to_string()))?;
    emit(
        format,
        serde_json::to_value(&manifest).expect("manifest json"),
        format!(
            "experiment {} dataset: {} classes, splits {} written under {}",
            manifest.experiment,
            manifest.classes.len(),
            manifest
                .splits
                .iter()
                .map(|(k, v)| format!("{k}:{}", v.total))
                .collect::<Vec<_>>()
                .join(" "),
            args.out.display()
        ),
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, format: Format) -> Result<(), Failure> {
    let experiment =
        Experiment::from_id(args.experiment).map_err(|e| Failure::config(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::stage(e.to_string()))?;
    let manifest = ensure_dataset(args.data.as_deref(), experiment, 32, args.seed, &args.out)?;
    let manifest_path = args
        .data
        .clone()
        .unwrap_or_else(|| args.out.join("dataset/manifest.json"));
    let spec = spec_for(experiment, manifest.image_size, args.scale)?;
    let config = TrainConfig {
        learning_rate: args.lr,
        momentum: 0.9,
        batch_size: args.batch_size,
        epochs: args.epochs,
        seed: args.seed,
        width_scale: args.scale,
        loss_mode: args.loss_mode.into(),
        aux_loss: args.aux,
    };
    let data = DatasetBundle::load(&manifest).map_err(|e| Failure::stage(e.to_string()))?;
    let ckpt = args.out.join("checkpoint");
    let result = match args.dtype {
        Dtype::F64 => {
            let mut graph =
                ModelGraph::<f64>::build(spec).map_err(|e| Failure::config(e.to_string()))?;
            let result =
                train(&mut graph, &data, &config).map_err(|e| Failure::stage(e.to_string()))?;
            save_checkpoint(&graph, Some(&config), Some(&manifest_path), &ckpt)
                .map_err(|e| Failure::stage(e.to_string()))?;
            result
        }
        Dtype::F32 => {
            let mut graph =
                ModelGraph::<f32>::build(spec).map_err(|e| Failure::config(e.to_string()))?;
            let result =
                train(&mut graph, &data, &config).map_err(|e| Failure::stage(e.to_string()))?;
            save_checkpoint(&graph, Some(&config), Some(&manifest_path), &ckpt)
                .map_err(|e| Failure::stage(e.to_string()))?;
            result
        }
    };
    std::fs::write(
        args.out.join("trial.json"),
        serde_json::to_string_pretty(&result).map_err(|e| Failure::stage(e.to_string()))?,
    )
    .map_err(|e| Failure::stage(e.to_string()))?;
    let text = match &result.divergence {
        Some(d) => format!(
            "diverged at step {} in `{}` (loss mode {:?})",
            d.step, d.op, config.loss_mode
        ),
        None => format!(
            "final-head accuracy: train {:.2}% val {:.2}% test {:.2}% ({:.1}s); checkpoint under {}",
            result.accuracies.train[16],
            result.accuracies.val[16],
            result.accuracies.test[16],
            result.wall_seconds,
            ckpt.display()
        ),
    };
    emit(format, serde_json::to_value(&result).expect("json"), text);
    Ok(())
}

fn cmd_montecarlo(args: &McArgs, format: Format) -> Result<(), Failure> {
    let experiment =
        Experiment::from_id(args.experiment).map_err(|e| Failure::config(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::stage(e.to_string()))?;
    let manifest = ensure_dataset(args.data.as_deref(), experiment, 32, args.seed, &args.out)?;
    let data = DatasetBundle::load(&manifest).map_err(|e| Failure::stage(e.to_string()))?;
    let spec = spec_for(experiment, manifest.image_size, args.scale)?;
    let jobs = args.trials * args.lrs.len();
    let mc = McConfig {
        base: TrainConfig {
            epochs: args.epochs,
            seed: args.seed,
            width_scale: args.scale,
            ..TrainConfig::default()
        },
        trials: args.trials,
        learning_rates: args.lrs.clone(),
        head: args.head,
        workers: workers_from_env(jobs),
    };
    let result = monte_carlo(&spec, &data, &mc).map_err(|e| Failure::stage(e.to_string()))?;
    let trials_path = args.out.join("trials.json");
    std::fs::write(
        &trials_path,
        serde_json::to_string_pretty(&result).map_err(|e| Failure::stage(e.to_string()))?,
    )
    .map_err(|e| Failure::stage(e.to_string()))?;
    let tensor = dragonfly_core::perf::perf_tensor(&result.z_pooled)
        .map_err(|e| Failure::stage(e.to_string()))?;
    emit(
        format,
        serde_json::json!({
            "trials": trials_path,
            "z_pooled": result.z_pooled,
            "z_by_lr": result.z_by_lr,
            "tensor": tensor,
        }),
        format!(
            "{} trials done; Z min {:.2} mean {:.2} median {:.2} max {:.2}; wrote {}",
            result.z_pooled.len(),
            tensor.min,
            tensor.mean,
            tensor.median,
            tensor.max,
            trials_path.display()
        ),
    );
    Ok(())
}

fn load_manifest_for(
    checkpoint_manifest: Option<&PathBuf>,
    data: Option<&PathBuf>,
) -> Result<DatasetManifest, Failure> {
    let path = data
        .or(checkpoint_manifest)
        .ok_or_else(|| Failure::config("no dataset manifest recorded; pass --data".to_string()))?;
    DatasetManifest::load(path).map_err(|e| Failure::config(e.to_string()))
}

fn cmd_eval(args: &EvalArgs, format: Format) -> Result<(), Failure> {
    let (graph, index) =
        load_checkpoint::<f64>(&args.checkpoint).map_err(|e| Failure::stage(e.to_string()))?;
    let manifest = load_manifest_for(index.dataset_manifest.as_ref(), args.data.as_ref())?;
    let data = DatasetBundle::load(&manifest).map_err(|e| Failure::stage(e.to_string()))?;
    let (images, labels) = data
        .split(&args.split)
        .map_err(|e| Failure::config(e.to_string()))?;
    let eval = evaluate(&graph, images, labels).map_err(|e| Failure::stage(e.to_string()))?;
    let mut text = format!("split {} ({} examples)\n", args.split, labels.len());
    for (i, acc) in eval.accuracy.iter().enumerate() {
        text.push_str(&format!("N{:<2} {:6.2}%\n", i + 1, acc));
    }
    emit(
        format,
        serde_json::to_value(&eval).expect("json"),
        text.trim_end().to_string(),
    );
    Ok(())
}

fn cmd_perf(args: &PerfArgs, format: Format) -> Result<(), Failure> {
    let text =
        std::fs::read_to_string(&args.trials).map_err(|e| Failure::config(e.to_string()))?;
    let result: McResult =
        serde_json::from_str(&text).map_err(|e| Failure::config(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::stage(e.to_string()))?;
    let csv_path = args.out.join("perf.csv");
    let json_path = args.out.join("perf.json");
    pipeline::write_perf_outputs(args.experiment, &result, &csv_path, &json_path)
        .map_err(Failure::stage)?;
    emit(
        format,
        serde_json::json!({"csv": csv_path, "json": json_path}),
        format!("wrote {} and {}", csv_path.display(), json_path.display()),
    );
    Ok(())
}

fn cmd_sld(args: &SldArgs, format: Format) -> Result<(), Failure> {
    let (graph, index) =
        load_checkpoint::<f64>(&args.checkpoint).map_err(|e| Failure::stage(e.to_string()))?;
    let manifest = load_manifest_for(index.dataset_manifest.as_ref(), args.data.as_ref())?;
    let data = DatasetBundle::load(&manifest).map_err(|e| Failure::stage(e.to_string()))?;
    let (images, labels) = data
        .split(&args.split)
        .map_err(|e| Failure::config(e.to_string()))?;
    let report =
        branch_sld_report(&graph, images, labels).map_err(|e| Failure::stage(e.to_string()))?;
    let outputs =
        pipeline::collect_outputs(&graph, images).map_err(|e| Failure::stage(e.to_string()))?;
    let failures = failure_report(&outputs, labels).map_err(|e| Failure::stage(e.to_string()))?;
    write_report_dir(&report, &failures, Some((images, &manifest.classes)), &args.out)
        .map_err(|e| Failure::stage(e.to_string()))?;
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("N{:<2} acc {:6.2}%  sld {:.4}", r.head, r.accuracy, r.mean_sld))
        .collect();
    emit(
        format,
        serde_json::json!({
            "out": args.out,
            "rows": report.rows,
            "failures": failures.len(),
        }),
        format!(
            "{}\n{} failures; report under {}",
            rows.join("\n"),
            failures.len(),
            args.out.display()
        ),
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, format: Format) -> Result<(), Failure> {
    use dragonfly_core::train::head_loss;
    let spec = EnsembleSpec::canonical(
        2,
        (args.extent, args.extent, 1),
        args.scale,
        IntegratorMode::DensePerClass,
    )
    .map_err(|e| Failure::config(e.to_string()))?;
    let mut graph = ModelGraph::<f64>::build(spec).map_err(|e| Failure::config(e.to_string()))?;
    graph.init_params(args.seed);
    let mut state = args.seed;
    let batch = dragonfly_core::Tensor::from_fn(vec![2, 1, args.extent, args.extent], |_| {
        // splitmix64 stream keeps the probe input reproducible
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        (z >> 11) as f64 / (1u64 << 53) as f64
    });
    let targets = vec![0usize, 1];
    let params = graph.params().clone();
    let eval = |ps: &dragonfly_core::ParamSet, want: bool| {
        let candidate = graph.with_params(ps)?;
        let mut tape = dragonfly_core::Tape::new();
        let pass = candidate.forward(&mut tape, &batch, dragonfly_core::frustum::Mode::Train)?;
        let loss = head_loss(&mut tape, pass.heads[16], &targets, 2, LossMode::Softlog)?;
        let v = tape.value(loss).data()[0];
        let g = if want { Some(tape.backward(loss)?) } else { None };
        Ok((v, g))
    };
    let report = dragonfly_core::grad_check(&params, eval, args.eps)
        .map_err(|e| Failure::stage(e.to_string()))?;
    let passed = report.passes(args.threshold);
    emit(
        format,
        serde_json::json!({
            "max_rel_err": report.max_rel_err,
            "threshold": args.threshold,
            "elements": report.evaluated,
            "passed": passed,
        }),
        format!(
            "max rel err {:.3e} over {} elements (threshold {:.1e}): {}",
            report.max_rel_err,
            report.evaluated,
            args.threshold,
            if passed { "pass" } else { "FAIL" }
        ),
    );
    if passed {
        Ok(())
    } else {
        Err(Failure::stage(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_err, args.threshold
        )))
    }
}

fn cmd_run(args: &RunArgs, format: Format) -> Result<(), Failure> {
    let config = config::validate_config(&args.config).map_err(|errors| Failure {
        code: EXIT_CONFIG,
        message: errors.join("\n"),
    })?;
    let jobs = config.montecarlo.trials * config.montecarlo.learning_rates.len();
    let pipe = pipeline::Pipeline {
        config,
        out: args.out.clone(),
        workers: workers_from_env(jobs),
    };
    let summary = pipe.run().map_err(|e| Failure::stage(e.to_string()))?;
    let stages: BTreeMap<String, pipeline::StageStatus> =
        summary.stages.iter().cloned().collect();
    emit(
        format,
        serde_json::json!({"stages": stages, "index": summary.index}),
        summary
            .stages
            .iter()
            .map(|(n, s)| {
                format!(
                    "{n}: {}",
                    match s {
                        pipeline::StageStatus::Built => "built",
                        pipeline::StageStatus::Cached => "cached",
                    }
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
            + &format!("\nindex: {}", summary.index.display()),
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = cli.format;
    let outcome = match &cli.command {
        Command::Init(args) => cmd_init(args, format),
        Command::Synth(args) => cmd_synth(args, format),
        Command::Train(args) => cmd_train(args, format),
        Command::Montecarlo(args) => cmd_montecarlo(args, format),
        Command::Eval(args) => cmd_eval(args, format),
        Command::Perf(args) => cmd_perf(args, format),
        Command::Sld(args) => cmd_sld(args, format),
        Command::Gradcheck(args) => cmd_gradcheck(args, format),
        Command::Run(args) => cmd_run(args, format),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

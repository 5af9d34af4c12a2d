//! Command-line entry point.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::ablate::{ablate, best_lambda_per_seed, to_markdown, Matrix, Sweep};
use crate::datamodel::{
    read_ground_truth, read_predictions, write_annotations, write_features, write_ground_truth, write_predictions,
    Dataset, GroundTruth, Manifest,
};
use crate::error::{Error, Result};
use crate::evaluation::{format_table, mean_ap, parse_iou_grid};
use crate::experiment::{synth_split, ExperimentConfig};
use crate::inference::{infer_dataset, InferConfig};
use crate::network::read_checkpoint;
use crate::plot::{plot_lambda_sweep, plot_loss_curves, read_report};
use crate::synthgen::{PointStrategy, SynthSpec, DEFAULT_SIGMA_FRACTION};
use crate::trainer::{evaluate_proxy, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ptal", version, about = "Point-supervised temporal action localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train a model on a dataset split.
    Train(TrainArgs),
    /// Write proposals for every video of a split.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Score the action-completion, order and regularity heads.
    ProxyEval(ProxyArgs),
    /// Run ablation sweeps on synthetic data.
    Ablate(AblateArgs),
    /// Render loss curves and the mAP-vs-lambda plot as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct PointArgs {
    /// Point placement: uniform, center, gaussian or file.
    #[arg(long, default_value = "gaussian")]
    strategy: String,
    /// Gaussian std as a fraction of the instance length.
    #[arg(long, default_value_t = DEFAULT_SIGMA_FRACTION)]
    sigma: f64,
    /// Point annotations (JSONL) for the file strategy.
    #[arg(long)]
    points_file: Option<PathBuf>,
}

impl PointArgs {
    fn strategy(&self) -> Result<PointStrategy> {
        PointStrategy::parse(&self.strategy, self.sigma, self.points_file.clone())
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator settings (JSON); defaults apply to missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of videos in the train split; the rest form the test split.
    #[arg(long, default_value_t = 20)]
    train_videos: usize,
    #[command(flatten)]
    points: PointArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Training settings (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Manifest split to train on (default: train when present, else all videos).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Proposal and Soft-NMS settings (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest split (default: test when present, else all videos).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// IoU grid as lo:hi:step.
    #[arg(long, default_value = "0.1:0.7:0.1")]
    iou: String,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ProxyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[command(flatten)]
    points: PointArgs,
    /// Point draws per ground-truth instance.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Experiment settings (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Which sweep: all, tasks, window, points or lambda.
    #[arg(long, default_value = "all")]
    sweep: String,
    /// Number of seeds per setup.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for results.json and results.md.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Training report (report.jsonl).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Ablation results (results.json).
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns 0 on success, 2 on usage errors and 1 on runtime errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::ProxyEval(a) => proxy_eval(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Plot(a) => plot(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Loads `split`, or `fallback` when the manifest defines it, or every video.
fn load_split(dir: &Path, split: Option<&str>, fallback: &str) -> Result<Dataset> {
    let manifest = Manifest::read(dir.join("manifest.json"))?;
    let name = match split {
        Some(s) => Some(s),
        None if manifest.splits.contains_key(fallback) => Some(fallback),
        None => None,
    };
    Dataset::load(dir, name)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let strategy = a.points.strategy()?;
    if matches!(strategy, PointStrategy::File { .. }) {
        return Err(Error::Usage("synthetic points cannot come from a file; use uniform, center or gaussian".into()));
    }
    let (train, test) = synth_split(&spec, a.train_videos, &strategy)?;
    create_dir(&a.out.join("features"))?;

    let all: Vec<_> = train.videos.iter().chain(&test.videos).collect();
    for v in &all {
        write_features(&v.features, Dataset::feature_path(&a.out, v.id()))?;
    }
    let gt: GroundTruth = all.iter().map(|v| (v.id().to_string(), v.ground_truth.clone())).collect();
    let lengths: BTreeMap<String, usize> = all.iter().map(|v| (v.id().to_string(), v.features.len())).collect();
    write_ground_truth(a.out.join("gt.jsonl"), &gt, Some(&lengths))?;
    let points: Vec<_> = train.videos.iter().filter_map(|v| v.points.clone()).collect();
    write_annotations(a.out.join("points.jsonl"), &points)?;
    let ids = |d: &Dataset| d.videos.iter().map(|v| v.id().to_string()).collect::<Vec<_>>();
    let manifest = Manifest {
        num_classes: spec.num_classes,
        videos: all.iter().map(|v| v.id().to_string()).collect(),
        class_names: (0..spec.num_classes).map(|c| format!("class_{c}")).collect(),
        splits: [("train".to_string(), ids(&train)), ("test".to_string(), ids(&test))].into(),
    };
    manifest.write(a.out.join("manifest.json"))?;
    write_text(
        &a.out.join("spec.json"),
        &(serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n"),
    )?;
    println!(
        "wrote {} videos ({} train, {} test) to {}",
        all.len(),
        train.videos.len(),
        test.videos.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(steps) = a.steps {
        config.steps = steps;
    }
    let dataset = load_split(&a.data, a.split.as_deref(), "train")?;
    config.net.num_classes = dataset.num_classes;
    if let Some(v) = dataset.videos.first() {
        config.net.input_dim = v.features.dim();
    }
    let outcome = train(&dataset, &config, Some(&a.out))?;
    let report = &outcome.report;
    if let Some(last) = report.steps.last() {
        println!("step {} total loss {:.6}", last.step, last.total);
    }
    if let Some(path) = &report.checkpoint {
        println!("checkpoint {}", path.display());
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let config: InferConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => InferConfig::default(),
    };
    let ck = read_checkpoint(&a.checkpoint)?;
    let dataset = load_split(&a.data, a.split.as_deref(), "test")?;
    let preds = infer_dataset(&dataset, &ck.params, &config)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_predictions(&a.out, &preds)?;
    let n: usize = preds.iter().map(|(_, p)| p.len()).sum();
    println!("wrote {n} proposals for {} videos to {}", preds.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let grid = parse_iou_grid(&a.iou)?;
    let preds = read_predictions(&a.pred)?;
    let gt: Vec<_> = read_ground_truth(&a.gt)?.into_iter().flat_map(|(_, g)| g).collect();
    let result = mean_ap(&preds, &gt, &grid)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
    } else {
        print!("{}", format_table(&result));
    }
    Ok(())
}

fn proxy_eval(a: ProxyArgs) -> Result<()> {
    let ck = read_checkpoint(&a.checkpoint)?;
    let dataset = load_split(&a.data, a.split.as_deref(), "test")?;
    let metrics = evaluate_proxy(&ck.params, &dataset, &a.points.strategy()?, a.repeats, a.seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
    } else {
        let show = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{:.2}", 100.0 * v));
        println!("windows      {}", metrics.windows);
        println!("AC  cos sim  {}  cos dist {}", show(metrics.ac_cos_sim), show(metrics.ac_cos_dist));
        println!("AOU AUC      {}  ACC {}", show(metrics.aou_auc), show(metrics.aou_acc));
        println!("ARU AUC      {}  ACC {}", show(metrics.aru_auc), show(metrics.aru_acc));
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let base: ExperimentConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ExperimentConfig::default(),
    };
    let sweeps = Sweep::parse(&a.sweep)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    create_dir(&a.out)?;
    let matrix = ablate(&base, &sweeps, &seeds, |row| {
        eprintln!("{:<16} avg mAP@0.1:0.7 {:.2}", row.setup, 100.0 * row.map_bands["0.1:0.7"]);
    })?;
    let json = serde_json::to_string_pretty(&matrix).expect("matrix serializes");
    write_text(&a.out.join("results.json"), &(json + "\n"))?;
    let md = to_markdown(&matrix);
    write_text(&a.out.join("results.md"), &md)?;
    print!("{md}");
    if sweeps.contains(&Sweep::Lambda) {
        println!("\nbest lambda per seed: {:?}", best_lambda_per_seed(&matrix.rows));
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    if a.report.is_none() && a.results.is_none() {
        return Err(Error::Usage("plot needs --report, --results or both".into()));
    }
    create_dir(&a.out)?;
    if let Some(report) = &a.report {
        let path = a.out.join("loss_curves.svg");
        plot_loss_curves(&read_report(report)?, &path)?;
        println!("wrote {}", path.display());
    }
    if let Some(results) = &a.results {
        let matrix: Matrix = read_json(results)?;
        let path = a.out.join("map_vs_lambda.svg");
        plot_lambda_sweep(&matrix.rows, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analyzer::{expectation_gap_report, hidden_case_exactness, GapSpec};
use crate::cam::localize_bbox;
use crate::error::Error;
use crate::numerics::{Checkpoint, ModelParams};
use crate::pipeline::{
    evaluate, predict, run_suite, Budget, Dataset, DatasetRef, EvalSettings, Evaluation,
    ExperimentConfig, SuiteConfig, TrainedModel, train,
};
use crate::cam::extract_temporal_segments;
use crate::synth::{SyntheticImageSpec, SyntheticSequenceSpec};
use crate::viz;

pub const SEED_ENV: &str = "HIDESEEK_SEED";

#[derive(Debug, Parser)]
#[command(name = "hideseek", version, about = "Hide-and-Seek weakly-supervised localization")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train one checkpoint per seed.
    Train(TrainArgs),
    /// Evaluate one checkpoint, or an ensemble of several, on full inputs.
    Eval(EvalArgs),
    /// Train and evaluate every variant over every seed.
    Suite(SuiteArgs),
    /// Window-case and expectation-gap report for the first conv layer.
    Analyze(AnalyzeArgs),
    /// Export box overlays and CAM heatmaps for selected samples.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory (created if absent).
    #[arg(short, long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    Images,
    Sequences,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Dataset description (JSON, a `synthetic_images` or `synthetic_sequences` source).
    #[arg(short, long, conflicts_with = "kind")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "images")]
    kind: DataKind,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Replaces the config's seed list with this single seed.
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file; repeat to evaluate an ensemble.
    #[arg(short = 'k', long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    /// Dataset directory; defaults to the dataset recorded in the checkpoint.
    #[arg(short, long)]
    dataset: Option<PathBuf>,
    /// CAM threshold as a fraction of the maximum.
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SuiteArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Cap every run at a few epochs.
    #[arg(long)]
    quick: bool,
    /// Runs trained concurrently.
    #[arg(short, long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Skip writing per-run checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Experiment config naming the dataset.
    #[arg(short, long)]
    config: PathBuf,
    /// First-layer filters come from this checkpoint; otherwise from a fresh init.
    #[arg(short = 'k', long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    hide_prob: f64,
    #[arg(long, default_value_t = 1)]
    masks_per_image: usize,
    /// Number of training images used (0 = all).
    #[arg(long, default_value_t = 200)]
    images: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(short = 'k', long)]
    checkpoint: PathBuf,
    #[arg(short, long)]
    dataset: Option<PathBuf>,
    /// Sample ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    ids: Vec<u64>,
    /// Integer upscaling of the exported images.
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long)]
    threshold: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(format!("invalid config: {m}")),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `std::env::args`, runs the command, and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Visualize(a) => cmd_visualize(a),
    }
}

fn prepare_out(o: &OutArgs) -> CliResult<&Path> {
    if o.out.exists() {
        if !o.out.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", o.out.display())));
        }
        let non_empty = fs::read_dir(&o.out).map_err(Error::from)?.next().is_some();
        if non_empty && !o.force {
            return Err(usage(format!(
                "{} is not empty; pass --force to overwrite",
                o.out.display()
            )));
        }
    }
    fs::create_dir_all(&o.out).map_err(Error::from)?;
    Ok(&o.out)
}

fn read_config_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))
}

fn load_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let text = read_config_text(path)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(dir) = path.parent() {
        cfg.dataset.rebase(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn load_dataset(r: &DatasetRef) -> CliResult<Dataset> {
    r.load().map_err(|e| match e {
        Error::Io(io) => usage(format!("cannot load dataset: {io}")),
        other => other.into(),
    })
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut source = match &a.config {
        Some(p) => serde_json::from_str::<DatasetRef>(&read_config_text(p)?)
            .map_err(|e| usage(format!("invalid config: {e}")))?,
        None => match a.kind {
            DataKind::Images => DatasetRef::SyntheticImages {
                spec: SyntheticImageSpec::default(),
                n_train: a.n_train,
                n_val: a.n_val,
                seed: 0,
            },
            DataKind::Sequences => DatasetRef::SyntheticSequences {
                spec: SyntheticSequenceSpec::default(),
                n_train: a.n_train,
                n_val: a.n_val,
                seed: 0,
            },
        },
    };
    if let Some(s) = a.seed {
        match &mut source {
            DatasetRef::SyntheticImages { seed, .. } | DatasetRef::SyntheticSequences { seed, .. } => *seed = s,
            DatasetRef::Dir { .. } => {}
        }
    }
    if matches!(source, DatasetRef::Dir { .. }) {
        return Err(usage("gen-data needs a synthetic source, not a directory"));
    }
    let data = load_dataset(&source)?;
    let out = prepare_out(&a.out)?;
    match &data {
        Dataset::Images(d) => d.save(out)?,
        Dataset::Sequences(d) => d.save(out)?,
    }
    write_json(&out.join("source.json"), &source)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    seeds: Vec<u64>,
    checkpoints: Vec<CheckpointEntry>,
}

#[derive(Serialize)]
struct CheckpointEntry {
    seed: u64,
    path: String,
    sha256: String,
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = load_experiment(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    let data = load_dataset(&cfg.dataset)?;
    cfg.validate_against(&data)?;
    let out = prepare_out(&a.out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let mut entries = Vec::new();
    for &seed in &cfg.seeds {
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(Error::from)?;
        let outcome = match train(&cfg, &data, seed, None) {
            Ok(o) => o,
            Err(Error::Diverged { epoch, last_good }) => {
                let ck = Checkpoint {
                    network: cfg.network.clone(),
                    params: *last_good.clone(),
                    seed,
                    epoch,
                    extra: vec![],
                };
                ck.save(&dir.join("last_good.bin"))?;
                return Err(CliError::Runtime(Error::Diverged { epoch, last_good }));
            }
            Err(e) => return Err(e.into()),
        };
        let path = dir.join("checkpoint.bin");
        outcome.checkpoint.save(&path)?;
        fs::write(dir.join("train_log.csv"), outcome.log_csv()).map_err(Error::from)?;
        entries.push(CheckpointEntry {
            seed,
            path: format!("seed-{seed}/checkpoint.bin"),
            sha256: outcome.checkpoint.hash()?,
        });
        println!("seed {seed}: {}", path.display());
    }
    write_json(
        &out.join("checkpoints.json"),
        &TrainSummary {
            config_hash: cfg.hash()?,
            seeds: cfg.seeds.clone(),
            checkpoints: entries,
        },
    )
}

fn load_models(paths: &[PathBuf]) -> CliResult<(Vec<TrainedModel>, ExperimentConfig, Vec<String>)> {
    let mut models = Vec::new();
    let mut first: Option<ExperimentConfig> = None;
    let mut hashes = Vec::new();
    for p in paths {
        let ck = Checkpoint::load(p).map_err(|e| match e {
            Error::Io(io) => usage(format!("cannot read checkpoint {}: {io}", p.display())),
            other => other.into(),
        })?;
        hashes.push(ck.hash()?);
        let (m, cfg) = TrainedModel::from_checkpoint(&ck)?;
        models.push(m);
        first.get_or_insert(cfg);
    }
    Ok((models, first.expect("at least one checkpoint"), hashes))
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config_hash: String,
    seeds: Vec<u64>,
    checkpoints: Vec<String>,
    #[serde(flatten)]
    metrics: MetricsBody<'a>,
}

#[derive(Serialize)]
#[serde(tag = "task", rename_all = "lowercase")]
enum MetricsBody<'a> {
    Image { metrics: &'a crate::eval::ImageReport },
    Temporal { metrics: &'a crate::eval::TemporalReport },
}

fn metrics_body(e: &Evaluation) -> MetricsBody<'_> {
    match e {
        Evaluation::Image { report, .. } => MetricsBody::Image { metrics: report },
        Evaluation::Temporal { report, .. } => MetricsBody::Temporal { metrics: report },
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let (models, mut cfg, hashes) = load_models(&a.checkpoints)?;
    if let Some(d) = &a.dataset {
        cfg.dataset = DatasetRef::Dir { path: d.clone() };
    }
    if let Some(t) = a.threshold {
        cfg.cam_threshold = Some(t);
    }
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let settings = EvalSettings::from_config(&cfg, &data);
    let out = prepare_out(&a.out)?;
    let evaluation = evaluate(&models, &data, &settings, None)?;
    write_json(&out.join("config.json"), &cfg)?;
    let seeds: Vec<u64> = models.iter().map(|m| m.pipeline.seed).collect();
    write_json(
        &out.join("metrics.json"),
        &MetricsFile {
            config_hash: cfg.hash()?,
            seeds,
            checkpoints: hashes,
            metrics: metrics_body(&evaluation),
        },
    )?;
    write_records(out, &evaluation)?;
    print_summary(&evaluation);
    Ok(())
}

fn write_records(out: &Path, e: &Evaluation) -> CliResult<()> {
    let mut lines = String::new();
    let push = |lines: &mut String, v: serde_json::Value| {
        lines.push_str(&v.to_string());
        lines.push('\n');
    };
    match e {
        Evaluation::Image { records, .. } => {
            for r in records {
                push(&mut lines, serde_json::to_value(r).map_err(Error::from)?);
            }
        }
        Evaluation::Temporal { records, .. } => {
            for r in records {
                push(&mut lines, serde_json::to_value(r).map_err(Error::from)?);
            }
        }
    }
    fs::write(out.join("records.jsonl"), lines).map_err(Error::from)?;
    Ok(())
}

fn print_summary(e: &Evaluation) {
    match e {
        Evaluation::Image { report, .. } => println!(
            "GT-known Loc {:.2}  Top-1 Loc {:.2}  Top-1 Clas {:.2}",
            100.0 * report.overall.gt_known_loc,
            100.0 * report.overall.top1_loc,
            100.0 * report.overall.top1_clas
        ),
        Evaluation::Temporal { report, .. } => {
            let cols: Vec<String> = report
                .thresholds
                .iter()
                .zip(&report.map)
                .map(|(t, m)| format!("mAP@{t} {m:.2}"))
                .collect();
            println!("{}", cols.join("  "));
        }
    }
}

#[derive(Serialize)]
struct SuiteMetrics<'a> {
    config_hash: String,
    seeds: Vec<u64>,
    rows: &'a [crate::pipeline::SuiteRow],
    runs: Vec<SuiteRunEntry<'a>>,
}

#[derive(Serialize)]
struct SuiteRunEntry<'a> {
    variant: &'a str,
    seed: u64,
    checkpoint_sha256: Option<String>,
    #[serde(flatten)]
    metrics: MetricsBody<'a>,
}

fn cmd_suite(a: SuiteArgs) -> CliResult<()> {
    let text = read_config_text(&a.config)?;
    let mut cfg = SuiteConfig::from_json(&text)?;
    if let Some(dir) = a.config.parent() {
        cfg.base.dataset.rebase(dir);
    }
    if a.quick {
        cfg.budget = Budget::Quick;
    }
    if let Some(s) = a.seed {
        cfg.base.seeds = vec![s];
    }
    cfg.validate()?;
    let data = load_dataset(&cfg.base.dataset)?;
    cfg.base.validate_against(&data)?;
    let out = prepare_out(&a.out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let report = run_suite(&cfg, &data, a.jobs)?;
    let mut runs = Vec::new();
    for r in &report.runs {
        let mut sha = None;
        if let Some(o) = &r.outcome {
            sha = Some(o.checkpoint.hash()?);
            if !a.no_checkpoints {
                let dir = out.join("runs").join(&r.variant).join(format!("seed-{}", r.seed));
                fs::create_dir_all(&dir).map_err(Error::from)?;
                o.checkpoint.save(&dir.join("checkpoint.bin"))?;
                fs::write(dir.join("train_log.csv"), o.log_csv()).map_err(Error::from)?;
            }
        }
        runs.push(SuiteRunEntry {
            variant: &r.variant,
            seed: r.seed,
            checkpoint_sha256: sha,
            metrics: metrics_body(&r.evaluation),
        });
    }
    let base_hash = serde_json::to_vec(&cfg).map_err(Error::from)?;
    write_json(
        &out.join("metrics.json"),
        &SuiteMetrics {
            config_hash: hex::encode(<sha2::Sha256 as sha2::Digest>::digest(base_hash)),
            seeds: cfg.base.seeds.clone(),
            rows: &report.rows,
            runs,
        },
    )?;
    let table = report.to_csv();
    fs::write(out.join("table.csv"), &table).map_err(Error::from)?;
    print!("{table}");
    let failed: usize = report.rows.iter().map(|r| r.failures.len()).sum();
    if failed > 0 && report.runs.is_empty() {
        return Err(CliError::Runtime(Error::InvalidArgument("every run failed".into())));
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> CliResult<()> {
    let cfg = load_experiment(&a.config)?;
    let data = load_dataset(&cfg.dataset)?;
    let Dataset::Images(d) = &data else {
        return Err(usage("analyze needs an image dataset"));
    };
    let (weights, bias, layer) = match &a.checkpoint {
        Some(p) => {
            let (models, _, _) = load_models(std::slice::from_ref(p))?;
            let m = models.into_iter().next().unwrap();
            let l = m.network.layers[0].clone();
            (m.params.convs[0].weight.clone(), m.params.convs[0].bias.data().to_vec(), l)
        }
        None => {
            let p = ModelParams::init(&cfg.network, a.seed)?;
            (p.convs[0].weight.clone(), p.convs[0].bias.data().to_vec(), cfg.network.layers[0].clone())
        }
    };
    let take = if a.images == 0 { d.train.len() } else { a.images.min(d.train.len()) };
    let images: Vec<_> = d.train[..take].iter().map(|s| s.image.clone()).collect();
    let spec = GapSpec {
        patch_size: a.patch_size,
        hide_prob: a.hide_prob,
        stride: layer.stride,
        pad: layer.pad(),
        masks_per_image: a.masks_per_image,
        seed: a.seed,
        ..Default::default()
    };
    let out = prepare_out(&a.out)?;
    let report = expectation_gap_report(&images, &weights, &bias, &spec)?;
    let residual = hidden_case_exactness(&weights, &bias, &report.mean)?;
    #[derive(Serialize)]
    struct AnalyzeOut<'a> {
        config_hash: String,
        seed: u64,
        spec: &'a GapSpec,
        hidden_case_residual: f64,
        expectation_matched: bool,
        report: &'a crate::analyzer::GapReport,
    }
    write_json(&out.join("config.json"), &cfg)?;
    write_json(
        &out.join("report.json"),
        &AnalyzeOut {
            config_hash: cfg.hash()?,
            seed: a.seed,
            spec: &spec,
            hidden_case_residual: residual,
            expectation_matched: report.expectation_matched(0.05),
            report: &report,
        },
    )?;
    let table = report.to_table();
    fs::write(out.join("report.txt"), &table).map_err(Error::from)?;
    print!("{table}");
    println!("hidden-case residual {residual:.3e}");
    Ok(())
}

fn cmd_visualize(a: VisualizeArgs) -> CliResult<()> {
    let (models, mut cfg, _) = load_models(std::slice::from_ref(&a.checkpoint))?;
    if let Some(d) = &a.dataset {
        cfg.dataset = DatasetRef::Dir { path: d.clone() };
    }
    let data = load_dataset(&cfg.dataset)?;
    let threshold = a.threshold.unwrap_or(cfg.cam_threshold_for(data.task()));
    let out = prepare_out(&a.out)?;
    let ids: BTreeSet<u64> = a.ids.iter().copied().collect();
    let mut written = 0;
    for id in &ids {
        let done = match &data {
            Dataset::Images(d) => match d.train.iter().chain(&d.val).find(|s| s.id == *id) {
                None => false,
                Some(s) => {
                    let p = predict(&models, &s.image, s.id, None)?;
                    let class = p.top_class();
                    let cam = p.cam(&models, class)?;
                    let bbox = localize_bbox(&cam, threshold)?;
                    let (_, h, w) = s.image.dims3()?;
                    viz::overlay(&s.image, bbox.as_ref(), &s.gt_boxes, a.scale)?
                        .save_png(&out.join(format!("{id}_{class}.png")))?;
                    viz::RgbImage::heatmap(&cam, h, w)
                        .upscale(a.scale)
                        .save_png(&out.join(format!("{id}_{class}_cam.png")))?;
                    true
                }
            },
            Dataset::Sequences(d) => match d.train.iter().chain(&d.val).find(|s| s.id == *id) {
                None => false,
                Some(s) => {
                    let p = predict(&models, &s.features, s.id, None)?;
                    let class = p.top_class();
                    let cam = p.cam(&models, class)?;
                    let segs = extract_temporal_segments(&cam, threshold)?;
                    viz::sequence_strip(&cam, &segs, &s.instances, 4 * a.scale)
                        .save_png(&out.join(format!("{id}_{class}.png")))?;
                    viz::sequence_strip(&cam, &[], &[], 4 * a.scale)
                        .save_png(&out.join(format!("{id}_{class}_cam.png")))?;
                    true
                }
            },
        };
        if done {
            written += 1;
        } else {
            log::warn!("sample id {id} not found; skipped");
        }
    }
    if !ids.is_empty() && written == 0 {
        return Err(CliError::Runtime(Error::InvalidArgument(
            "none of the requested sample ids exist".into(),
        )));
    }
    println!("wrote {} files to {}", 2 * written, out.display());
    Ok(())
}

//! `msmc`: crowd anomaly detection over optical-flow files.
//!
//! Every command reads one JSON run config (defaults apply when none is
//! given), optionally patched by repeatable `--set key=value` flags and the
//! command's own path flags. Alongside each primary output the command
//! writes `<output>.config.json`, the exact config that produced it, so any
//! artifact can be regenerated with `-c` and nothing else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use msmc::config::RunConfig;
use msmc::flow::{read_flow_file, read_labels_file, write_flow_file, write_labels_file};
use msmc::net::{grad_check, prepare_snippet, random_graph_set, GradCheckOptions, ModelParams};
use msmc::pipeline::{
    extract_graph_sets, read_scores_tsv, score_pipeline, train_pipeline, write_epochs_jsonl,
    write_graphs_jsonl, write_json_pretty, write_scores_tsv, write_text, Checkpoint,
};
use msmc::synth::{gen_benchmark, parse_plan};
use msmc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "msmc",
    version,
    about = "Detects abnormal crowd behavior in optical-flow sequences via multi-scale motion-consistency graphs"
)]
struct Cli {
    /// JSON run config; built-in defaults apply when omitted.
    #[arg(short = 'c', long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set epochs=50. Repeatable. Values
    /// are parsed as JSON when possible, otherwise taken as strings.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic flow benchmark and its frame labels.
    Synth(SynthArgs),
    /// Extract per-snippet motion graphs from a flow file to JSONL.
    Extract(ExtractArgs),
    /// Train on a flow file of normal footage and write a checkpoint.
    Train(TrainArgs),
    /// Score a flow file against a trained checkpoint.
    Score(ScoreArgs),
    /// Compute ROC metrics from frame scores and labels.
    Eval(EvalArgs),
    /// Verify analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Segment plan, e.g. "laminar:400,counter_flow:250,laminar:300".
    #[arg(long)]
    plan: Option<String>,
    /// Output flow file.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Output labels file (one 0/1 per frame).
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Input flow file.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Output JSONL file, one graph per scale per snippet.
    #[arg(long)]
    graphs: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input flow file of normal footage.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Output checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Optional per-epoch loss log (JSONL).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Input flow file to score.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output TSV of frame scores.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Frame scores TSV, as written by `score`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Frame labels file, one 0/1 per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Optional metrics JSON output.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Fail (exit 5) if AUC falls below this.
    #[arg(long)]
    min_auc: Option<f64>,
    /// Fail (exit 5) if EER rises above this.
    #[arg(long)]
    max_eer: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Minimum coordinates to check across all tensors.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Seed for the test problem and coordinate sampler.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let overrides = cli
        .set
        .iter()
        .map(|s| RunConfig::parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    cfg.apply_overrides(&overrides)?;
    match cli.command {
        Command::Synth(args) => synth(cfg, args),
        Command::Extract(args) => extract(cfg, args),
        Command::Train(args) => train_cmd(cfg, args),
        Command::Score(args) => score(cfg, args),
        Command::Eval(args) => eval(cfg, args),
        Command::Gradcheck(args) => gradcheck(cfg, args),
    }
}

fn require<'a>(path: Option<&'a Path>, field: &str) -> Result<&'a Path> {
    path.ok_or_else(|| Error::InvalidConfig {
        field: field.into(),
        reason: "no path given (pass the flag or set it in the config)".into(),
    })
}

/// Writes `<primary>.config.json` next to the output it describes.
fn write_echo(cfg: &RunConfig, primary: &Path) -> Result<()> {
    let mut name = primary
        .file_name()
        .unwrap_or_else(|| primary.as_os_str())
        .to_os_string();
    name.push(".config.json");
    let mut text = cfg.to_json_pretty();
    text.push('\n');
    write_text(&primary.with_file_name(name), &text)
}

fn synth(mut cfg: RunConfig, args: SynthArgs) -> Result<()> {
    if args.plan.is_some() {
        cfg.plan = args.plan;
    }
    if args.flow.is_some() {
        cfg.flow = args.flow;
    }
    if args.labels.is_some() {
        cfg.labels = args.labels;
    }
    cfg.validate()?;
    let plan_text = cfg.plan.as_deref().ok_or_else(|| Error::InvalidConfig {
        field: "plan".into(),
        reason: "no segment plan given (pass --plan or set it in the config)".into(),
    })?;
    let plan = parse_plan(plan_text)?;
    let flow_path = require(cfg.flow.as_deref(), "flow")?;
    let labels_path = require(cfg.labels.as_deref(), "labels")?;
    let (seq, labels) = gen_benchmark(&cfg.scenario(), &plan, cfg.snippet_frames)?;
    write_flow_file(flow_path, &seq)?;
    write_labels_file(labels_path, &labels)?;
    write_echo(&cfg, flow_path)?;
    let anomalous = labels.iter().filter(|&&l| l == 1).count();
    println!(
        "wrote {} frames ({}x{}, {anomalous} anomalous) to {} and labels to {}",
        seq.frame_count(),
        seq.width(),
        seq.height(),
        flow_path.display(),
        labels_path.display()
    );
    Ok(())
}

fn extract(mut cfg: RunConfig, args: ExtractArgs) -> Result<()> {
    if args.flow.is_some() {
        cfg.flow = args.flow;
    }
    if args.graphs.is_some() {
        cfg.graphs = args.graphs;
    }
    cfg.validate()?;
    let flow_path = require(cfg.flow.as_deref(), "flow")?;
    let graphs_path = require(cfg.graphs.as_deref(), "graphs")?;
    let seq = read_flow_file(flow_path)?;
    let sets = extract_graph_sets(&seq, &cfg)?;
    write_graphs_jsonl(graphs_path, &sets)?;
    write_echo(&cfg, graphs_path)?;
    println!(
        "extracted {} snippets x {} scales from {} frames to {}",
        sets.len(),
        cfg.scale_factors.len(),
        seq.frame_count(),
        graphs_path.display()
    );
    Ok(())
}

fn train_cmd(mut cfg: RunConfig, args: TrainArgs) -> Result<()> {
    if args.flow.is_some() {
        cfg.flow = args.flow;
    }
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    cfg.validate()?;
    let flow_path = require(cfg.flow.as_deref(), "flow")?;
    let ckpt_path = require(cfg.checkpoint.as_deref(), "checkpoint")?;
    let seq = read_flow_file(flow_path)?;
    let arts = train_pipeline(&cfg, &seq)?;
    arts.checkpoint.save(ckpt_path)?;
    write_echo(&cfg, ckpt_path)?;
    if let Some(log_path) = &args.log {
        write_epochs_jsonl(log_path, &arts.epochs)?;
    }
    let last = arts.epochs.last().expect("training ran at least one epoch");
    println!(
        "trained {} epochs on {} frames (final loss {:.6}) into {}",
        arts.epochs.len(),
        seq.frame_count(),
        last.total,
        ckpt_path.display()
    );
    Ok(())
}

fn score(mut cfg: RunConfig, args: ScoreArgs) -> Result<()> {
    if args.flow.is_some() {
        cfg.flow = args.flow;
    }
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint;
    }
    if args.scores.is_some() {
        cfg.scores = args.scores;
    }
    cfg.validate()?;
    let flow_path = require(cfg.flow.as_deref(), "flow")?;
    let ckpt_path = require(cfg.checkpoint.as_deref(), "checkpoint")?;
    let scores_path = require(cfg.scores.as_deref(), "scores")?;
    let seq = read_flow_file(flow_path)?;
    let checkpoint = Checkpoint::load(ckpt_path)?;
    let series = score_pipeline(&cfg, &checkpoint, &seq)?;
    write_scores_tsv(scores_path, &series)?;
    write_echo(&cfg, scores_path)?;
    println!(
        "scored {} frames ({} snippets) into {}",
        series.frame_scores.len(),
        series.snippet_scores.len(),
        scores_path.display()
    );
    Ok(())
}

fn eval(mut cfg: RunConfig, args: EvalArgs) -> Result<()> {
    if args.scores.is_some() {
        cfg.scores = args.scores;
    }
    if args.labels.is_some() {
        cfg.labels = args.labels;
    }
    if args.metrics.is_some() {
        cfg.metrics = args.metrics;
    }
    cfg.validate()?;
    let scores_path = require(cfg.scores.as_deref(), "scores")?;
    let labels_path = require(cfg.labels.as_deref(), "labels")?;
    let scores = read_scores_tsv(scores_path)?;
    let labels = read_labels_file(labels_path)?;
    // Write the report before enforcing thresholds so a failing gate still
    // leaves the metrics on disk.
    let report = msmc::pipeline::evaluate(&scores, &labels, None, None)?;
    if let Some(metrics_path) = cfg.metrics.as_deref() {
        write_json_pretty(metrics_path, &report)?;
        write_echo(&cfg, metrics_path)?;
    }
    println!(
        "AUC {:.4} ({:.2}%), EER {:.4} ({:.2}%) over {} frames ({} anomalous)",
        report.auc,
        report.auc_percent,
        report.eer,
        report.eer_percent,
        scores.len(),
        report.n_pos
    );
    msmc::pipeline::evaluate(&scores, &labels, args.min_auc, args.max_eer)?;
    Ok(())
}

fn gradcheck(cfg: RunConfig, args: GradcheckArgs) -> Result<()> {
    cfg.validate()?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let specs = cfg.scale_specs(cfg.width, cfg.height)?;
    let set = random_graph_set(&specs, cfg.direction_classes, seed);
    let snippet = prepare_snippet(&set)?;
    let params = ModelParams::init(cfg.embed_dim, &cfg.scale_factors, seed ^ 1);
    let options = GradCheckOptions {
        samples: args.samples,
        weights: cfg.loss_weights(),
        seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&params, &snippet, &options)?;
    let worst = report
        .checks
        .iter()
        .map(|c| c.rel_error)
        .fold(0.0_f64, f64::max);
    let checked = report.checks.len();
    let failures = report.failures;
    report.into_result()?;
    println!(
        "gradient check passed: {checked} coordinates, {failures} failures, worst relative error {worst:.3e}"
    );
    Ok(())
}

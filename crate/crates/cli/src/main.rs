mod config;
mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sthode::data::{load_distances, load_signals, Manifest, Part, SensorDistances, TrafficDataset};
use sthode::experiment::{ablate, build_graphs, run};
use sthode::hypergraph::HypergraphSummary;
use sthode::train::{evaluate, Checkpoint};
use sthode::Error;

use config::{RunConfig, RunFlags};

/// Spatio-temporal hypergraph ODE traffic forecasting.
#[derive(Parser, Debug)]
#[command(name = "sthode", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the spatial and temporal hypergraphs.
    BuildGraph(RunFlags),
    /// Train a model and save the best-validation checkpoint.
    Train(RunFlags),
    /// Score a checkpoint on the test split.
    Evaluate(CheckpointArgs),
    /// Train the full model and the four ablations under one seed.
    Ablate(RunFlags),
    /// Export forecasts for chosen sensors.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Defaults to `<out-dir>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// Sensor indices; all sensors when omitted.
    #[arg(long, value_delimiter = ',')]
    nodes: Vec<usize>,
    /// First window start (time step) to export.
    #[arg(long)]
    from: Option<usize>,
    /// Exclusive end of window starts to export.
    #[arg(long)]
    to: Option<usize>,
    /// Split to predict on: train, val or test.
    #[arg(long, default_value = "test")]
    part: String,
}

const EXIT_CONSTRUCTION: u8 = 2;
const EXIT_TRAINING: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_QUERY: u8 = 5;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Training(_) | Error::Integration { .. } | Error::UndefinedMetric => EXIT_TRAINING,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_CONSTRUCTION,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn write(path: &Path, contents: &str) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::new(EXIT_CONSTRUCTION, format!("{}: {e}", path.display())))
}

fn prepare(flags: &RunFlags) -> Outcome<RunConfig> {
    let cfg = RunConfig::resolve(flags).map_err(|m| Failure::new(EXIT_CONSTRUCTION, m))?;
    fs::create_dir_all(cfg.out_dir()).map_err(|e| Failure::new(EXIT_CONSTRUCTION, format!("{}: {e}", cfg.out_dir().display())))?;
    Ok(cfg)
}

fn signals_path(cfg: &RunConfig) -> Outcome<&Path> {
    cfg.signals
        .as_deref()
        .ok_or_else(|| Failure::new(EXIT_CONSTRUCTION, "--signals is required"))
}

fn distances(cfg: &RunConfig, n: usize) -> Outcome<SensorDistances> {
    let path = cfg
        .distances
        .as_deref()
        .ok_or_else(|| Failure::new(EXIT_CONSTRUCTION, "--distances is required"))?;
    Ok(load_distances(path, n)?)
}

fn dataset(cfg: &RunConfig) -> Outcome<TrafficDataset> {
    let signals = load_signals(signals_path(cfg)?)?;
    Ok(TrafficDataset::new(signals, cfg.window, cfg.horizon)?)
}

fn csv_with_echo(cfg: &RunConfig, body: &str) -> String {
    format!("# config {}\n{body}", cfg.echo_line())
}

fn build_graph(flags: &RunFlags) -> Outcome {
    let cfg = prepare(flags)?;
    let ds = dataset(&cfg)?;
    let graphs = build_graphs(&ds, &distances(&cfg, ds.nodes())?, &cfg.graph())?;
    let echo = format!("# config {}\n", cfg.echo_line());
    write(&cfg.out("spatial_hypergraph.txt"), &(echo.clone() + &graphs.spatial.to_text()))?;
    write(&cfg.out("temporal_hypergraph.txt"), &(echo + &graphs.temporal.to_text()))?;
    let summary = json!({
        "config": cfg.echo(),
        "spatial": HypergraphSummary::from(&graphs.spatial),
        "temporal": HypergraphSummary::from(&graphs.temporal),
    });
    write(&cfg.out("graph_summary.json"), &pretty(&summary))?;
    println!(
        "spatial: {} nodes, {} hyperedges; temporal: {} hyperedges",
        graphs.spatial.n_nodes(),
        graphs.spatial.n_hyperedges(),
        graphs.temporal.n_hyperedges()
    );
    Ok(())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json serializes") + "\n"
}

fn train(flags: &RunFlags) -> Outcome {
    let cfg = prepare(flags)?;
    let ds = dataset(&cfg)?;
    let graphs = build_graphs(&ds, &distances(&cfg, ds.nodes())?, &cfg.graph())?;
    let model = cfg.model(ds.nodes(), ds.features());
    let (net, result) = run("train", &ds, &graphs, &model, &cfg.train(), |e| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {:.6}  val MAE {:.4}",
            e.epoch + 1,
            e.train_loss,
            e.val_loss,
            e.val_mae
        )
    })?;
    Checkpoint::new(&net, &ds.stats, cfg.echo()).save(cfg.out("checkpoint.json"))?;
    write(&cfg.out("training_log.csv"), &csv_with_echo(&cfg, &result.log.to_csv()))?;
    let manifest = Manifest::new(
        &ds,
        cfg.signals.as_ref().map(|p| p.display().to_string()),
        cfg.distances.as_ref().map(|p| p.display().to_string()),
    );
    write(
        &cfg.out("manifest.json"),
        &pretty(&json!({ "config": cfg.echo(), "dataset": manifest })),
    )?;
    println!(
        "best epoch {}: val MAE {:.4}, test MAE {:.4}",
        result.log.best_epoch + 1,
        result.val.overall.mae,
        result.test.overall.mae
    );
    Ok(())
}

/// Loads the checkpoint and a dataset normalized with its statistics.
fn restore(args: &CheckpointArgs, cfg: &RunConfig) -> Outcome<(Checkpoint, TrafficDataset)> {
    let path = args.checkpoint.clone().unwrap_or_else(|| cfg.out("checkpoint.json"));
    let ck = Checkpoint::load(&path).map_err(|e| Failure::new(EXIT_CHECKPOINT, e.to_string()))?;
    let m = &ck.model;
    let mismatch = |what: &str, given: usize, stored: usize| {
        Failure::new(EXIT_CHECKPOINT, format!("{what} {given} does not match the checkpoint's {stored}"))
    };
    for (what, flag, stored) in [
        ("window", args.run.window, m.window),
        ("horizon", args.run.horizon, m.horizon),
        ("K", args.run.k, m.mixhop_depth),
        ("blocks", args.run.blocks, m.blocks),
    ] {
        if let Some(given) = flag.filter(|g| *g != stored) {
            return Err(mismatch(what, given, stored));
        }
    }
    let signals = load_signals(signals_path(cfg)?)?;
    if signals.nodes() != m.n_nodes || signals.features() != m.in_features {
        return Err(mismatch("sensor count", signals.nodes(), m.n_nodes));
    }
    let ds = TrafficDataset::with_stats(signals, m.window, m.horizon, ck.stats.clone())?;
    Ok((ck, ds))
}

fn evaluate_cmd(args: &CheckpointArgs) -> Outcome {
    let cfg = prepare(&args.run)?;
    let (ck, ds) = restore(args, &cfg)?;
    let net = ck.network()?;
    let eval = evaluate(&net, &ds, Part::Test, cfg.delta)?;
    let out = json!({
        "config": cfg.echo(),
        "checkpoint_config": ck.run_config,
        "split": "test",
        "windows": eval.starts.len(),
        "metrics": eval.report,
    });
    write(&cfg.out("metrics.json"), &pretty(&out))?;
    let table = eval.report.to_table();
    write(&cfg.out("metrics.txt"), &format!("# config {}\n{table}", cfg.echo_line()))?;
    print!("{table}");
    Ok(())
}

fn ablate_cmd(flags: &RunFlags) -> Outcome {
    let cfg = prepare(flags)?;
    let ds = dataset(&cfg)?;
    let graphs = build_graphs(&ds, &distances(&cfg, ds.nodes())?, &cfg.graph())?;
    let model = cfg.model(ds.nodes(), ds.features());
    let report = ablate(&ds, &graphs, &model, &cfg.train(), |label, e| {
        eprintln!("[{label}] epoch {:>4}  train {:.6}  val MAE {:.4}", e.epoch + 1, e.train_loss, e.val_mae)
    })?;
    write(&cfg.out("ablation.csv"), &csv_with_echo(&cfg, &report.to_csv()))?;
    write(
        &cfg.out("ablation.json"),
        &pretty(&json!({ "config": cfg.echo(), "report": report })),
    )?;
    let labels: Vec<String> = report.runs.iter().map(|r| r.label.clone()).collect();
    let metrics = [
        ("test MAE", report.runs.iter().map(|r| r.test.overall.mae).collect()),
        ("test RMSE", report.runs.iter().map(|r| r.test.overall.rmse).collect()),
    ];
    write(
        &cfg.out("ablation.svg"),
        &svg::grouped_bars("Ablation: test error", &format!("config {}", cfg.echo_line()), &labels, &metrics),
    )?;
    print!("{}", report.to_csv());
    println!("last-value baseline,,{},{},", report.baseline_test.overall.mae, report.baseline_test.overall.rmse);
    Ok(())
}

fn predict_cmd(args: &PredictArgs) -> Outcome {
    let cfg = prepare(&args.ck.run)?;
    let part = match args.part.as_str() {
        "train" => Part::Train,
        "val" => Part::Val,
        "test" => Part::Test,
        other => return Err(Failure::new(EXIT_QUERY, format!("unknown split {other:?}"))),
    };
    let (ck, ds) = restore(&args.ck, &cfg)?;
    let n = ds.nodes();
    let nodes: Vec<usize> = if args.nodes.is_empty() { (0..n).collect() } else { args.nodes.clone() };
    if let Some(bad) = nodes.iter().find(|&&v| v >= n) {
        return Err(Failure::new(EXIT_QUERY, format!("node {bad} out of range for {n} sensors")));
    }
    let net = ck.network()?;
    let eval = evaluate(&net, &ds, part, cfg.delta)?;
    let from = args.from.unwrap_or(0);
    let to = args.to.unwrap_or(usize::MAX);
    let picked: Vec<(usize, usize)> = eval
        .starts
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= from && s < to)
        .map(|(i, &s)| (i, s))
        .collect();
    if picked.is_empty() {
        return Err(Failure::new(EXIT_QUERY, format!("no {} windows start in [{from}, {to})", args.part)));
    }
    let (s, f) = (ds.horizon, ds.features());
    let mut csv = String::from("window_start,node,horizon,time,truth,prediction\n");
    for &(i, start) in &picked {
        for &v in &nodes {
            for h in 0..s {
                let idx = [i, v, h, 0];
                let _ = writeln!(
                    csv,
                    "{start},{v},{},{},{},{}",
                    h + 1,
                    start + ds.window + h,
                    eval.targets.get(&idx),
                    eval.predictions.get(&idx)
                );
            }
        }
    }
    debug_assert_eq!(f, 1);
    write(&cfg.out("predictions.csv"), &csv_with_echo(&cfg, &csv))?;
    let v = nodes[0];
    let truth: Vec<f64> = picked.iter().map(|&(i, _)| eval.targets.get(&[i, v, 0, 0])).collect();
    let pred: Vec<f64> = picked.iter().map(|&(i, _)| eval.predictions.get(&[i, v, 0, 0])).collect();
    let chart = svg::line_chart(
        &format!("Sensor {v}: one-step forecast vs truth"),
        &format!("config {}", cfg.echo_line()),
        &[("truth", &truth), ("forecast", &pred)],
    );
    write(&cfg.out("predictions.svg"), &chart)?;
    println!("wrote {} rows", picked.len() * nodes.len() * s);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::BuildGraph(f) => build_graph(f),
        Command::Train(f) => train(f),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(f) => ablate_cmd(f),
        Command::Predict(a) => predict_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

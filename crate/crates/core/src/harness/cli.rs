use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use super::config::{default_out_root, RunConfig};
use super::pipeline::{background_pool, compute_attributions, run_pipeline, score_records, selected_examples, standardize_dataset};
use super::report::{read_metrics_csv, render_report, write_metrics_csv, ResultsTable};
use crate::attribution::{read_dump, write_dump, MethodId};
use crate::engine::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::model::{build_network, train, NetworkConfig, TrainConfig};
use crate::synth::{gen_dataset, read_dataset, write_dataset, GeneratorParams};

#[derive(Debug, Parser)]
#[command(name = "ecgattr", version, about = "Synthetic ECG attribution benchmark")]
struct Cli {
    /// Suppress JSON progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Attribute the selected test examples.
    Attribute(AttributeArgs),
    /// Score attribution dumps into a metrics CSV.
    Evaluate(EvaluateArgs),
    /// Aggregate metrics CSVs (one per repeat) into a report.
    Report(ReportArgs),
    /// Run the whole pipeline for every repeat.
    RunAll(RunAllArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 600)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Network and training preset: `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Training hyperparameters as `key = value` lines.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Debug, Args)]
struct SelectionArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_examples: Option<usize>,
    /// JSON run config supplying method and evaluation settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct AttributeArgs {
    #[command(flatten)]
    selection: SelectionArgs,
    /// Comma-separated method names; default all.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long)]
    attributions: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    /// Minimum |p_0 - p_N| for an example to get a degradation score.
    #[arg(long)]
    min_gap: Option<f64>,
    /// Metrics CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Metrics CSV of one repeat; repeat the flag for several.
    #[arg(long, required = true)]
    metrics: Vec<PathBuf>,
    /// Seeds of the repeats, in the order of `--metrics`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunAllArgs {
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
}

struct Reporter {
    quiet: bool,
}

impl Reporter {
    fn emit(&self, event: &Value) {
        if !self.quiet {
            let mut err = std::io::stderr().lock();
            let _ = writeln!(err, "{event}");
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Error::Usage(String::new()).exit_code() } else { 0 };
        }
    };
    let reporter = Reporter { quiet: cli.quiet };
    match run(cli.command, &reporter) {
        Ok(()) => 0,
        Err(e) => {
            let event = json!({"event": "error", "category": e.category(), "message": e.to_string()});
            eprintln!("{event}");
            e.exit_code()
        }
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<MethodId>> {
    if names.is_empty() {
        return Ok(MethodId::ALL.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

fn base_config(preset: &str, config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_json_file(path, seed)?,
        None => RunConfig::preset(preset, 0)?,
    };
    if let Some(seed) = seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(command: Command, reporter: &Reporter) -> Result<()> {
    let progress = |v: &Value| reporter.emit(v);
    match command {
        Command::Gen(a) => {
            let out = a.out.unwrap_or_else(|| default_out_root().join("dataset"));
            let params = GeneratorParams { seed: a.seed, ..GeneratorParams::default() };
            let dataset = gen_dataset(a.n_per_class, &params)?;
            write_dataset(&dataset, &out)?;
            progress(&json!({"event": "gen_done", "out": out.display().to_string(),
                "train": dataset.train.len(), "test": dataset.test.len()}));
        }
        Command::Train(a) => {
            let out = a.out.unwrap_or_else(|| default_out_root().join("checkpoint"));
            let run_cfg = RunConfig::preset(&a.preset, a.seed.unwrap_or(0))?;
            let mut cfg: TrainConfig = match &a.train_config {
                Some(path) => TrainConfig::from_kv_file(path, run_cfg.train.clone())?,
                None => run_cfg.train.clone(),
            };
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = a.batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = a.weight_decay {
                cfg.weight_decay = v;
            }
            cfg.validate()?;
            let dataset = standardize_dataset(&read_dataset(&a.data)?)?;
            let net_cfg = NetworkConfig { input_length: dataset.signal_length, ..NetworkConfig::preset(&a.preset)? };
            let net = build_network(&net_cfg, cfg.seed)?;
            progress(&json!({"event": "stage", "stage": "train", "seed": cfg.seed}));
            let (net, history) = train(net, &dataset, &cfg)?;
            save_checkpoint(&net, &out)?;
            let path = out.join("history.json");
            std::fs::write(&path, serde_json::to_string_pretty(&history).expect("history serializes"))
                .map_err(|e| Error::io(&path, e))?;
            for rec in &history.epochs {
                progress(&serde_json::to_value(rec).expect("record serializes"));
            }
            progress(&json!({"event": "train_done", "out": out.display().to_string()}));
        }
        Command::Attribute(a) => {
            let out = a.out.clone().unwrap_or_else(|| default_out_root().join("attributions"));
            let methods = parse_methods(&a.methods)?;
            let s = &a.selection;
            let cfg = selection_config(s)?;
            let dataset = standardize_dataset(&read_dataset(&s.data)?)?;
            let net = load_checkpoint(&s.checkpoint)?.fold_batchnorm();
            with_workers(cfg.workers, || {
                let examples = selected_examples(&net, &dataset.test, cfg.eval.threshold, cfg.eval.max_examples)?;
                progress(&json!({"event": "selected", "scored": examples.len()}));
                let pool = background_pool(&dataset.train);
                let (dump, failures) = compute_attributions(&net, &examples, &methods, &cfg.method_params, &pool, &progress);
                write_dump(&out, &dump)?;
                progress(&json!({"event": "attribute_done", "out": out.display().to_string(),
                    "records": dump.len(), "failed_methods": failures.len()}));
                Ok(())
            })?;
        }
        Command::Evaluate(a) => {
            let out = a.out.clone().unwrap_or_else(|| default_out_root().join("metrics.csv"));
            let s = &a.selection;
            let mut cfg = selection_config(s)?;
            if let Some(w) = a.window {
                cfg.eval.window = w;
            }
            if let Some(g) = a.min_gap {
                cfg.eval.min_gap = g;
            }
            cfg.eval.validate()?;
            let dataset = standardize_dataset(&read_dataset(&s.data)?)?;
            let net = load_checkpoint(&s.checkpoint)?.fold_batchnorm();
            let dump = read_dump(&a.attributions)?;
            with_workers(cfg.workers, || {
                let examples: Vec<_> = dataset.test.iter().collect();
                let records = score_records(&net, &examples, &dump, &cfg.eval)?;
                write_metrics_csv(&out, &records)?;
                progress(&json!({"event": "evaluate_done", "out": out.display().to_string(), "records": records.len()}));
                Ok(())
            })?;
        }
        Command::Report(a) => {
            let out = a.out.unwrap_or_else(default_out_root);
            if !a.seeds.is_empty() && a.seeds.len() != a.metrics.len() {
                return Err(Error::Usage(format!("{} seeds given for {} metrics files", a.seeds.len(), a.metrics.len())));
            }
            let mut repeats = Vec::new();
            for (i, path) in a.metrics.iter().enumerate() {
                repeats.push((a.seeds.get(i).copied().unwrap_or(i as u64), read_metrics_csv(path)?));
            }
            let table = ResultsTable::from_repeats(&repeats);
            let (csv, md) = render_report(&table, &out)?;
            progress(&json!({"event": "report_done", "csv": csv.display().to_string(), "markdown": md.display().to_string()}));
        }
        Command::RunAll(a) => {
            let mut cfg = base_config(&a.preset, a.config.as_deref(), a.seed)?;
            if a.config.is_none() || a.out.is_some() {
                cfg.out_dir = a.out.clone().unwrap_or_else(|| default_out_root().join(format!("{}-seed{}", cfg.preset, cfg.eval.seed)));
            }
            if let Some(w) = a.workers {
                cfg.workers = w;
            }
            if let Some(r) = a.repeats {
                cfg.eval.repeats = r;
            }
            if !a.methods.is_empty() {
                cfg.methods = parse_methods(&a.methods)?;
            }
            let summary = run_pipeline(&cfg, &progress)?;
            for row in &summary.table.rows {
                progress(&json!({"event": "row", "method": row.method.name(), "sign_mode": row.sign_mode.name(),
                    "loc": row.loc, "pointing": row.pointing, "degradation": row.degradation, "average": row.average}));
            }
        }
    }
    Ok(())
}

fn selection_config(s: &SelectionArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&s.preset, s.config.as_deref(), s.seed)?;
    if let Some(t) = s.threshold {
        cfg.eval.threshold = t;
    }
    if s.max_examples.is_some() {
        cfg.eval.max_examples = s.max_examples;
    }
    if let Some(w) = s.workers {
        cfg.workers = w;
    }
    cfg.eval.validate()?;
    if cfg.workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    Ok(cfg)
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?
        .install(f)
}

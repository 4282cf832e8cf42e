use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::RunConfig;
use super::plot::plot_overlay;
use super::report::{render_report, write_metrics_csv, ResultsTable};
use crate::attribution::{attribute_raw, write_dump, AttributionMap, DumpRecord, MethodId, MethodParams, SignMode, Subject};
use crate::engine::{save_checkpoint, Network};
use crate::error::{Error, Result};
use crate::metrics::{score_attribution, EvalConfig, GroundTruthSet, MetricRecord};
use crate::model::{build_network, select_eval_examples, standardize_examples, train, TrainHistory};
use crate::synth::{gen_dataset, write_dataset, BeatClass, Dataset, Example};

/// Receives single-line JSON progress events.
pub type Progress<'a> = &'a (dyn Fn(&Value) + Sync);

pub fn silent(_: &Value) {}

/// Standardizes both splits.
pub fn standardize_dataset(dataset: &Dataset) -> Result<Dataset> {
    Ok(Dataset {
        sampling_rate: dataset.sampling_rate,
        signal_length: dataset.signal_length,
        train: standardize_examples(&dataset.train)?,
        test: standardize_examples(&dataset.test)?,
    })
}

/// Standardized normal-class training signals, the DeepSHAP reference pool.
pub fn background_pool(standardized_train: &[Example]) -> Vec<Vec<f32>> {
    standardized_train.iter().filter(|e| e.label == BeatClass::Normal).map(|e| e.signal.clone()).collect()
}

/// Selected test examples (standardized), capped at `max_examples` in id order.
pub fn selected_examples<'a>(
    net: &Network,
    standardized_test: &'a [Example],
    threshold: f64,
    max_examples: Option<usize>,
) -> Result<Vec<&'a Example>> {
    let mut selected = select_eval_examples(net, standardized_test, threshold)?;
    selected.sort_by_key(|e| e.id);
    if let Some(cap) = max_examples {
        selected.truncate(cap);
    }
    Ok(selected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: MethodId,
    pub example_id: Option<usize>,
    pub message: String,
}

/// Raw and absolute maps of every method on every example. A method that fails
/// on any example is dropped as a whole and reported; the others are kept.
pub fn compute_attributions(
    net: &Network,
    examples: &[&Example],
    methods: &[MethodId],
    params: &MethodParams,
    pool: &[Vec<f32>],
    progress: Progress<'_>,
) -> (Vec<DumpRecord>, Vec<MethodFailure>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &method in methods {
        let maps: Vec<std::result::Result<Vec<f32>, String>> = examples
            .par_iter()
            .map(|e| {
                let subject = Subject { example_id: e.id, signal: &e.signal, target: e.label.index(), background_pool: pool };
                match catch_unwind(AssertUnwindSafe(|| attribute_raw(net, &subject, method, params))) {
                    Ok(Ok(v)) => Ok(v),
                    Ok(Err(err)) => Err(err.to_string()),
                    Err(panic) => Err(panic_message(panic.as_ref())),
                }
            })
            .collect();
        if let Some((e, Err(message))) = examples.iter().zip(&maps).find(|(_, m)| m.is_err()) {
            progress(&json!({"event": "method_failed", "method": method.name(), "example_id": e.id, "error": message}));
            failures.push(MethodFailure { method, example_id: Some(e.id), message: message.clone() });
            continue;
        }
        for (e, raw) in examples.iter().zip(maps) {
            let raw = raw.expect("checked above");
            for sign_mode in SignMode::ALL {
                let map = AttributionMap { values: sign_mode.apply(&raw), method, sign_mode, target_class: e.label.index() };
                records.push(DumpRecord { example_id: e.id, map });
            }
        }
        progress(&json!({"event": "method_done", "method": method.name(), "examples": examples.len()}));
    }
    (records, failures)
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    let text = panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into());
    format!("panic: {text}")
}

/// Scores every map against its example. Output order follows `records`.
pub fn score_records(net: &Network, examples: &[&Example], records: &[DumpRecord], eval: &EvalConfig) -> Result<Vec<MetricRecord>> {
    let by_id: BTreeMap<usize, &Example> = examples.iter().map(|e| (e.id, *e)).collect();
    records
        .par_iter()
        .map(|r| {
            let e = by_id
                .get(&r.example_id)
                .ok_or_else(|| Error::Input(format!("attribution for unknown example {}", r.example_id)))?;
            let gt = GroundTruthSet::from_example(e)?;
            score_attribution(net, e.id, &e.signal, r.map.target_class, &gt, &r.map, eval)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeat: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub selected: usize,
    pub scored: usize,
    pub failures: Vec<MethodFailure>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub repeats: Vec<RepeatSummary>,
    pub table: ResultsTable,
}

pub fn repeat_dir(out: &Path, repeat: usize) -> PathBuf {
    out.join(format!("repeat_{repeat}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

struct RepeatOutput {
    summary: RepeatSummary,
    records: Vec<MetricRecord>,
}

fn run_repeat(cfg: &RunConfig, repeat: usize, seed: u64, progress: Progress<'_>) -> Result<RepeatOutput> {
    let dir = repeat_dir(&cfg.out_dir, repeat);
    let stage = |name: &'static str| {
        progress(&json!({"event": "stage", "stage": name, "repeat": repeat, "seed": seed}));
        move |e: Error| e.in_stage(name, seed)
    };

    let on_err = stage("gen");
    let generator = crate::synth::GeneratorParams { seed, ..cfg.dataset.generator.clone() };
    let dataset = gen_dataset(cfg.dataset.n_per_class, &generator).map_err(&on_err)?;
    write_dataset(&dataset, &dir.join("dataset")).map_err(&on_err)?;
    let standardized = standardize_dataset(&dataset).map_err(&on_err)?;

    let on_err = stage("train");
    let net = build_network(&cfg.network, seed).map_err(&on_err)?;
    let train_cfg = crate::model::TrainConfig { seed, ..cfg.train.clone() };
    let (net, history) = train(net, &standardized, &train_cfg).map_err(&on_err)?;
    save_checkpoint(&net, &dir.join("checkpoint")).map_err(&on_err)?;
    write_json(&dir.join("history.json"), &history).map_err(&on_err)?;
    for rec in &history.epochs {
        progress(&json!({"event": "epoch", "repeat": repeat, "epoch": rec.epoch, "train_loss": rec.train_loss,
            "train_accuracy": rec.train_accuracy, "test_accuracy": rec.test_accuracy}));
    }
    let test_accuracy = history.last().map(|r| r.test_accuracy).unwrap_or(0.0);

    let on_err = stage("attribute");
    let folded = net.fold_batchnorm();
    let mut examples = selected_examples(&folded, &standardized.test, cfg.eval.threshold, None).map_err(&on_err)?;
    let selected = examples.len();
    if let Some(cap) = cfg.eval.max_examples {
        examples.truncate(cap);
    }
    progress(&json!({"event": "selected", "repeat": repeat, "selected": selected, "scored": examples.len()}));
    let pool = background_pool(&standardized.train);
    let params = MethodParams { seed, ..cfg.method_params.clone() };
    let (dump, failures) = compute_attributions(&folded, &examples, &cfg.methods, &params, &pool, progress);
    write_dump(&dir.join("attributions"), &dump).map_err(&on_err)?;

    let on_err = stage("evaluate");
    let records = score_records(&folded, &examples, &dump, &cfg.eval).map_err(&on_err)?;
    write_metrics_csv(&dir.join("metrics.csv"), &records).map_err(&on_err)?;

    let on_err = stage("plot");
    let plot_dir = dir.join("plots");
    std::fs::create_dir_all(&plot_dir).map_err(|e| on_err(Error::io(&plot_dir, e)))?;
    let plotted: Vec<usize> = examples.iter().take(cfg.plots_per_method).map(|e| e.id).collect();
    for r in dump.iter().filter(|r| plotted.contains(&r.example_id)) {
        let original = dataset.find(r.example_id).expect("selected examples come from the dataset");
        let name = format!("{}_{}_{}.svg", r.map.method.name(), r.map.sign_mode.name(), r.example_id);
        plot_overlay(original, &r.map.values, &plot_dir.join(name)).map_err(&on_err)?;
    }

    let summary = RepeatSummary { repeat, seed, test_accuracy, selected, scored: examples.len(), failures, history };
    write_json(&dir.join("summary.json"), &summary).map_err(&on_err)?;
    Ok(RepeatOutput { summary, records })
}

/// Runs every repeat, then writes `report.csv`, `report.md` and `results.json`
/// to the output directory.
pub fn run_pipeline(cfg: &RunConfig, progress: Progress<'_>) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_json(&cfg.out_dir.join("config.json"), cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        let mut repeats = Vec::new();
        let mut per_repeat = Vec::new();
        for (r, seed) in cfg.eval.repeat_seeds().into_iter().enumerate() {
            let out = run_repeat(cfg, r, seed, progress)?;
            per_repeat.push((seed, out.records));
            repeats.push(out.summary);
        }
        let table = ResultsTable::from_repeats(&per_repeat);
        render_report(&table, &cfg.out_dir)?;
        let summary = RunSummary { config: cfg.clone(), repeats, table };
        write_json(&cfg.out_dir.join("results.json"), &summary)?;
        progress(&json!({"event": "done", "out_dir": cfg.out_dir.display().to_string()}));
        Ok(summary)
    })
}

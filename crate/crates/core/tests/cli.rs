use std::path::Path;
use std::process::{Command, Output};

use ecgattr::harness::report::{parse_report, read_metrics_csv};
use ecgattr::synth::read_dataset;

fn ecgattr(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgattr"))
        .args(args)
        .env("ECGATTR_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn ok(output: &Output) {
    assert!(output.status.success(), "exit {:?}\n{}", output.status.code(), String::from_utf8_lossy(&output.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn stepwise_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let ckpt = root.join("ckpt");
    let attr = root.join("attr");
    let metrics = root.join("metrics.csv");

    let gen = ecgattr(&["gen", "--n-per-class", "20", "--seed", "7", "--out", p(&data)], root);
    ok(&gen);
    let dataset = read_dataset(&data).unwrap();
    assert_eq!((dataset.train.len(), dataset.test.len()), (60, 60));
    let events = String::from_utf8_lossy(&gen.stderr);
    let last: serde_json::Value = serde_json::from_str(events.lines().last().unwrap()).unwrap();
    assert_eq!(last["event"], "gen_done");

    ok(&ecgattr(&["train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "4", "--lr", "0.003", "--batch-size", "8", "--seed", "7", "--quiet"], root));
    assert!(ckpt.join("model.json").is_file());
    assert!(ckpt.join("history.json").is_file());

    let selection = ["--data", p(&data), "--checkpoint", p(&ckpt), "--threshold", "0.34", "--max-examples", "4"];
    let mut args = vec!["attribute", "--methods", "Random,Saliency", "--out", p(&attr), "--quiet"];
    args.extend(selection);
    ok(&ecgattr(&args, root));
    assert!(attr.join("index.json").is_file());

    let mut args = vec!["evaluate", "--attributions", p(&attr), "--out", p(&metrics), "--quiet"];
    args.extend(selection);
    ok(&ecgattr(&args, root));
    let records = read_metrics_csv(&metrics).unwrap();
    assert!(!records.is_empty());
    assert_eq!(records.len() % 4, 0);

    let report = root.join("report");
    ok(&ecgattr(&["report", "--metrics", p(&metrics), "--seeds", "7", "--out", p(&report), "--quiet"], root));
    let rows = parse_report(&std::fs::read_to_string(report.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
}

#[test]
fn exit_codes_follow_error_categories() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    assert_eq!(ecgattr(&["gen", "--frobnicate"], root).status.code(), Some(2));
    assert_eq!(ecgattr(&[], root).status.code(), Some(2));
    assert_eq!(ecgattr(&["--help"], root).status.code(), Some(0));
    assert_eq!(ecgattr(&["run-all", "--preset", "huge"], root).status.code(), Some(3));
    let missing = root.join("nowhere");
    let out = ecgattr(&["train", "--data", p(&missing), "--out", p(&root.join("c"))], root);
    assert_eq!(out.status.code(), Some(5));
    let broken = root.join("broken");
    std::fs::create_dir(&broken).unwrap();
    std::fs::write(broken.join("manifest.json"), "[1, 2").unwrap();
    let corrupt = ecgattr(&["train", "--data", p(&broken), "--out", p(&root.join("c"))], root);
    assert_eq!(corrupt.status.code(), Some(5));
    let err: serde_json::Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["event"], "error");
    assert!(err["message"].as_str().unwrap().contains("manifest.json"), "{err}");
    let unwritable = root.join("file");
    std::fs::write(&unwritable, "").unwrap();
    let io = ecgattr(&["gen", "--n-per-class", "1", "--out", p(&unwritable.join("sub"))], root);
    assert_eq!(io.status.code(), Some(6));
    let metrics = root.join("m.csv");
    std::fs::write(&metrics, "example_id,method,sign_mode,loc,hit,degradation,skipped\n").unwrap();
    let mismatch = ecgattr(&["report", "--metrics", p(&metrics), "--seeds", "1,2"], root);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn default_outputs_land_under_the_env_root() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&ecgattr(&["gen", "--n-per-class", "2", "--quiet"], tmp.path()));
    assert!(tmp.path().join("dataset").join("manifest.json").is_file());
}

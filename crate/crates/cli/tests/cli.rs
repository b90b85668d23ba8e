use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rtal::aggregation::{FormulaKind, Structure};
use rtal::model::{AggregationSpec, Checkpoint, Position};
use rtal::train::{list_checkpoints, read_metrics, StepMetrics};
use rtal_cli::ExperimentConfig;

fn rtal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtal"))
        .args(args)
        .env("RTAL_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config small enough to train in well under a second.
fn tiny_config(dir: &Path, name: &str, steps: u64) -> (PathBuf, ExperimentConfig) {
    let mut cfg = ExperimentConfig::toy_copy(dir.join(name));
    cfg.model.num_layers = 2;
    cfg.model.d_model = 16;
    cfg.model.num_heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.vocab_size = 10;
    cfg.model.max_len = 10;
    cfg.task.vocab_size = 10;
    cfg.task.min_len = 2;
    cfg.task.max_len = 5;
    cfg.train.steps = steps;
    cfg.train.batch_tokens = 64;
    cfg.train.warmup = 10;
    cfg.train.checkpoint_every = 2;
    cfg.train.log_every = 1;
    cfg.eval.sentences = 8;
    cfg.eval.beam.max_len = 8;
    let path = dir.join(format!("{name}.json"));
    cfg.save(&path).unwrap();
    (path, cfg)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn without_wall(ms: Vec<StepMetrics>) -> Vec<StepMetrics> {
    ms.into_iter().map(|m| StepMetrics { wall_ms: 0, ..m }).collect()
}

#[test]
fn train_writes_a_self_describing_run() {
    let dir = tempfile::tempdir().unwrap();
    let (path, cfg) = tiny_config(dir.path(), "run", 4);
    let out = rtal(&["train", "-q", "--config", p(&path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = &cfg.output_dir;
    assert!(!list_checkpoints(run).unwrap().is_empty());
    assert_eq!(read_metrics(run).unwrap().len(), 4);
    assert_eq!(ExperimentConfig::load(run).unwrap(), cfg);
    assert!(run.join("eval.jsonl").exists());
    // rerunning into the same directory is refused
    let again = rtal(&["train", "-q", "--config", p(&path)]);
    assert_eq!(again.status.code(), Some(1));
    // but can be resumed to a later step
    let more = rtal(&["train", "-q", "--config", p(run), "--resume", "--steps", "6"]);
    assert!(more.status.success(), "{}", stderr(&more));
    assert_eq!(read_metrics(run).unwrap().last().unwrap().step, 6);
}

#[test]
fn run_log_reports_the_aggregated_span() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut cfg) = tiny_config(dir.path(), "span", 0);
    cfg.model.num_layers = 6;
    cfg.model.aggregation = AggregationSpec::new(Structure::Rtal, FormulaKind::EwpFfn, Position::Both);
    let path = dir.path().join("span6.json");
    cfg.save(&path).unwrap();
    let out = rtal(&["train", "-q", "--config", p(&path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = fs::read_to_string(cfg.output_dir.join("run.log")).unwrap();
    assert!(log.contains("aggregated span: layers 3..6"), "{log}");
}

#[test]
fn same_seed_gives_identical_metric_logs() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = tiny_config(dir.path(), "a", 5);
    let a = dir.path().join("out_a");
    let b = dir.path().join("out_b");
    for out_dir in [&a, &b] {
        let o = rtal(&["train", "-q", "--config", p(&path), "--output-dir", p(out_dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(
        without_wall(read_metrics(&a).unwrap()),
        without_wall(read_metrics(&b).unwrap())
    );
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut cfg) = tiny_config(dir.path(), "bad", 1);
    cfg.model.num_heads = 3;
    let path = dir.path().join("bad.json");
    cfg.save(&path).unwrap();
    let out = rtal(&["train", "--config", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("num_heads"), "{}", stderr(&out));

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["model"]["num_heads"] = 2.into();
    v["model"]["depth"] = 2.into();
    fs::write(&path, v.to_string()).unwrap();
    let out = rtal(&["train", "--config", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("depth"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(rtal(&["train"]).status.code(), Some(1));
    assert_eq!(rtal(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(rtal(&["params", "--preset", "huge"]).status.code(), Some(1));
    assert_eq!(rtal(&["--help"]).status.code(), Some(0));
}

#[test]
fn params_reports_text_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("params.json");
    let out = rtal(&["params", "--preset", "base", "--json", p(&json)]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("total"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let total = v["counts"]["total"].as_f64().unwrap();
    assert!((total - 65e6).abs() / 65e6 <= 0.05, "{total}");
    assert_eq!(v["aggregation_delta"], 0);

    let out = rtal(&["params", "--preset", "base", "--structure", "rtal", "--formula", "mean", "--json", "-"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["aggregation_delta"], 0);
    let out = rtal(&["params", "--preset", "base", "--structure", "rtal", "--json", "-"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(v["aggregation_delta"].as_u64().unwrap() > 0);
}

#[test]
fn ablation_over_positions_writes_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (path, cfg) = tiny_config(dir.path(), "abl", 2);
    let csv = dir.path().join("table.csv");
    let out = rtal(&["ablate", "-q", "--config", p(&path), "--positions", "encoder,decoder,both", "--csv", p(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "cell", "structure", "formula", "position", "status", "params", "final_loss", "token_accuracy",
            "exact_match", "bleu", "error"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let positions: Vec<&str> = rows.iter().map(|r| &r[3]).collect();
    assert_eq!(positions, ["encoder", "decoder", "both"]);
    assert!(rows.iter().all(|r| &r[4] == "ok"));
    assert!(cfg.output_dir.join("cells").join("rtal-ewp_ffn-both").is_dir());

    // rerunning marks every cell failed (directories already hold runs) but completes
    let out = rtal(&["ablate", "-q", "--config", p(&path), "--positions", "encoder", "--csv", p(&csv)]);
    assert!(out.status.success());
    let rows: Vec<csv::StringRecord> = csv::Reader::from_path(&csv).unwrap().records().map(Result::unwrap).collect();
    assert_eq!(&rows[0][4], "failed");
    assert!(!rows[0][10].is_empty());

    let empty = rtal(&["ablate", "-q", "--config", p(&path)]);
    assert_eq!(empty.status.code(), Some(1));
    assert!(stderr(&empty).contains("empty"));
}

#[test]
fn average_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    let (path, cfg) = tiny_config(dir.path(), "dec", 6);
    assert!(rtal(&["train", "-q", "--config", p(&path)]).status.success());
    let run = &cfg.output_dir;
    let cks = list_checkpoints(run).unwrap();
    assert_eq!(cks.len(), 4);

    let one = dir.path().join("one.bin");
    assert!(rtal(&["average", "--run-dir", p(run), "-k", "1", "-o", p(&one)]).status.success());
    let last = Checkpoint::load(&cks[3].1).unwrap();
    assert_eq!(Checkpoint::load(&one).unwrap(), last);
    let too_many = rtal(&["average", "--run-dir", p(run), "-k", "5"]);
    assert_eq!(too_many.status.code(), Some(1));
    assert!(rtal(&["average", "--run-dir", p(run), "-k", "3"]).status.success());
    assert!(run.join("averaged.bin").exists());

    let input = dir.path().join("src.txt");
    fs::write(&input, "3 4 5\n9 8 7 6\n5 5\n").unwrap();
    let beam1 = dir.path().join("beam1.txt");
    let greedy = dir.path().join("greedy.txt");
    let o = rtal(&["decode", "-q", "--run-dir", p(run), "-i", p(&input), "-o", p(&beam1), "--beam", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = rtal(&["decode", "-q", "--run-dir", p(run), "-i", p(&input), "-o", p(&greedy), "--greedy"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&beam1).unwrap(), fs::read(&greedy).unwrap());
    assert_eq!(fs::read_to_string(&beam1).unwrap().lines().count(), 3);

    let report = dir.path().join("report.json");
    let o = rtal(&[
        "decode", "--run-dir", p(run), "-i", p(&input), "--references", p(&input), "--report", p(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("BLEU"));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["sentences"], 3);
    assert!(v["weights"].as_str().unwrap().contains("averaged.bin"));

    fs::write(&input, "3 4 99\n").unwrap();
    let bad = rtal(&["decode", "--run-dir", p(run), "-i", p(&input)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = rtal(&["gradcheck"]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("RTAL tree"));
    assert!(!stdout(&out).contains("FAILED"));
}

#[test]
fn bad_thread_cap_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_rtal"))
        .args(["params", "--preset", "toy"])
        .env("RTAL_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

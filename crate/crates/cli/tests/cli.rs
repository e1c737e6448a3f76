use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
steps = 3
batch_size = 2

[layout]
num_cells = 2
initial_channels = 4
reductions = [1]
stem_strides = [1, 1, 2]
aspp_rates = [1, 2]
aspp_channels = 4
num_classes = 3
input_size = [16, 16]

[data]
size = [16, 16]
num_classes = 3
search_train = 6
search_val = 3
finetune = 4
test = 2

[finetune]
epochs = 1
batch_size = 2
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("tiny.toml"), TINY).unwrap();
        let out = f.gas(&["lut", "build", "--mode", "synthetic", "--preset", "toy", "--config", "@tiny.toml", "--out", "@lut.json"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs `gas`; arguments starting with `@` name files in the fixture.
    fn gas(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_gas"));
        for a in args {
            match a.strip_prefix('@') {
                Some(rel) => cmd.arg(self.path(rel)),
                None => cmd.arg(a),
            };
        }
        cmd.output().unwrap()
    }

    /// A search with the tiny config.
    fn search(&self, out: &str, extra: &[&str]) -> Output {
        let out = format!("@{out}");
        let mut args = vec!["search", "--preset", "toy", "--config", "@tiny.toml", "--lut", "@lut.json", "--out", &out];
        args.extend_from_slice(extra);
        self.gas(&args)
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.path(rel)).unwrap()
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The last stderr line as the machine-readable error payload.
fn error_payload(o: &Output) -> Value {
    let text = stderr(o);
    let line = text.lines().last().expect("error payload on stderr");
    serde_json::from_str(line).unwrap()
}

fn manifest_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synthetic_lut_is_deterministic() {
    let f = Fixture::new();
    let out = f.gas(&["lut", "build", "--mode", "synthetic", "--preset", "toy", "--config", "@tiny.toml", "--out", "@again/lut.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(f.read("lut.json"), f.read("again/lut.json"));
    let lut: Value = serde_json::from_str(&f.read("lut.json")).unwrap();
    assert_eq!(lut["mode"], "synthetic");
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_gas"))
        .args(["lut", "build", "--mode", "synthetic"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_payload(&out)["error"]["kind"], "usage");
}

#[test]
fn help_exits_zero() {
    let out = Command::new(env!("CARGO_BIN_EXE_gas")).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("random-baseline"));
}

#[test]
fn profiled_lut_without_device_writes_nothing() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_gas"))
        .env("GAS_DEVICE", "titan-xp")
        .args(["lut", "build", "--mode", "profiled", "--preset", "toy", "--out"])
        .arg(f.path("profiled.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_payload(&out)["error"]["kind"], "runtime");
    assert!(!f.path("profiled.json").exists());
}

#[test]
fn config_violations_are_listed_before_any_work() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.toml"), format!("beta = -1.0\n{}", TINY.replace("batch_size = 2\n\n[layout]", "batch_size = 0\n\n[layout]"))).unwrap();
    let out = f.gas(&["search", "--preset", "toy", "--config", "@bad.toml", "--lut", "@lut.json", "--out", "@s"]);
    assert_eq!(out.status.code(), Some(1));
    let details = error_payload(&out)["error"]["details"].as_array().unwrap().clone();
    assert!(details.iter().any(|d| d.as_str().unwrap().starts_with("beta")));
    assert!(details.iter().any(|d| d.as_str().unwrap().starts_with("batch_size")));
    assert!(!f.path("s/genotype.json").exists());
    assert!(!f.path("s/checkpoint").exists());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let f = Fixture::new();
    std::fs::write(f.path("typo.toml"), "betta = 0.1\n").unwrap();
    let out = f.gas(&["search", "--preset", "toy", "--config", "@typo.toml", "--lut", "@lut.json", "--out", "@s"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn search_writes_valid_genotype_and_is_reproducible() {
    let f = Fixture::new();
    let a = f.search("a", &["--seed", "7"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = f.search("b", &["--seed", "7"]);
    assert_eq!(b.status.code(), Some(0));
    for name in ["genotype.json", "result.json", "trajectory.csv"] {
        assert_eq!(f.read(&format!("a/{name}")), f.read(&format!("b/{name}")), "{name}");
    }
    for name in ["loss.svg", "latency.svg", "config.toml", "checkpoint/checkpoint.bin"] {
        assert!(f.path(&format!("a/{name}")).exists(), "{name}");
    }
    // the derived genotype passes the train command's validation
    let t = f.gas(&["train", "--preset", "toy", "--config", "@tiny.toml", "--genotype", "@a/genotype.json", "--out", "@t"]);
    assert_eq!(t.status.code(), Some(0), "{}", stderr(&t));
    let m = manifest_lines(&f.path("a/manifest.jsonl"));
    assert_eq!(m.len(), 1);
    assert_eq!(m[0]["command"], "search");
    assert_eq!(m[0]["seed"], 7);
    assert_eq!(m[0]["status"], "ok");
    assert!(!m[0]["outputs"].as_array().unwrap().is_empty());
    // progress streams to stderr
    assert!(stderr(&a).contains("step 3/3"));
}

#[test]
fn beta_zero_zeroes_the_latency_loss_column() {
    let f = Fixture::new();
    let out = f.search("s", &["--beta", "0"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = f.read("s/trajectory.csv");
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "latency_loss").unwrap();
    let rows: Vec<f64> = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|&v| v == 0.0));
}

#[test]
fn flags_override_config_file() {
    let f = Fixture::new();
    let out = f.search("s", &["--steps", "2"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(f.read("s/trajectory.csv").lines().count(), 3);
    assert!(f.read("s/config.toml").contains("steps = 2"));
}

#[test]
fn existing_outputs_are_refused_without_force() {
    let f = Fixture::new();
    assert_eq!(f.search("s", &[]).status.code(), Some(0));
    let before = f.read("s/genotype.json");
    let again = f.search("s", &[]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(f.read("s/genotype.json"), before);
    let forced = f.search("s", &["--force"]);
    assert_eq!(forced.status.code(), Some(0));
    assert_eq!(f.read("s/genotype.json"), before);
    assert_eq!(manifest_lines(&f.path("s/manifest.jsonl")).len(), 3);
}

#[test]
fn resume_reuses_a_matching_checkpoint_only() {
    let f = Fixture::new();
    assert_eq!(f.search("s", &[]).status.code(), Some(0));
    let before = f.read("s/result.json");
    // the finished checkpoint is reloaded and no step runs again
    let resumed = f.search("s", &["--resume", "--force"]);
    assert_eq!(resumed.status.code(), Some(0), "{}", stderr(&resumed));
    assert!(!stderr(&resumed).contains("step 1/3"));
    assert_eq!(f.read("s/result.json"), before);
    // a checkpoint written for a different config is refused
    let other = f.search("s", &["--resume", "--force", "--steps", "4"]);
    assert_eq!(other.status.code(), Some(1));
}

#[test]
fn derive_reproduces_the_search_genotype() {
    let f = Fixture::new();
    assert_eq!(f.search("s", &[]).status.code(), Some(0));
    let out = f.gas(&["derive", "--result", "@s/result.json", "--out", "@d"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(f.read("d/genotype.json"), f.read("s/genotype.json"));
    let raw = f.gas(&["derive", "--from", "raw", "--result", "@s/result.json", "--out", "@r"]);
    assert_eq!(raw.status.code(), Some(0));
}

fn write_genotype(f: &Fixture, name: &str, ops: [[&str; 5]; 2]) {
    let cells: Vec<Value> = ops
        .iter()
        .enumerate()
        .map(|(k, row)| {
            serde_json::json!({
                "index": k,
                "edges": row.iter().enumerate().map(|(e, op)| serde_json::json!({"edge": e, "op": op})).collect::<Vec<_>>(),
            })
        })
        .collect();
    let g = serde_json::json!({
        "version": 1,
        "fingerprint": {"K": 2, "N": 2, "reductions": [1], "channels": 4},
        "cells": cells,
    });
    std::fs::write(f.path(name), serde_json::to_string_pretty(&g).unwrap()).unwrap();
}

const MIXED: [[&str; 5]; 2] = [
    ["max_pool_3x3", "zero", "dil_sep_conv_3x3_r4", "skip_connect", "conv_3x3"],
    ["dil_sep_conv_3x3_r8", "sep_conv_3x3", "dil_sep_conv_3x3_r2", "dil_sep_conv_3x3_r4", "zero"],
];

#[test]
fn train_rejects_invalid_genotype_before_training() {
    let f = Fixture::new();
    // node 2 (edges 0 and 1) has no incoming operation
    write_genotype(&f, "bad.json", [
        ["zero", "zero", "conv_3x3", "conv_3x3", "conv_3x3"],
        ["conv_3x3"; 5],
    ]);
    let out = f.gas(&["train", "--preset", "toy", "--config", "@tiny.toml", "--genotype", "@bad.json", "--out", "@t"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!f.path("t/weights.bin").exists());
}

#[test]
fn train_report_carries_reference_rows_as_metadata() {
    let f = Fixture::new();
    write_genotype(&f, "g.json", MIXED);
    let out = f.gas(&["train", "--preset", "toy", "--config", "@tiny.toml", "--genotype", "@g.json", "--out", "@t"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let md = f.read("t/report.md");
    assert!(md.contains("| GAS | 769x1537 | 71.8 | 9.22 | 108.4 | paper-reported, not reproduced |"));
    assert!(md.contains("| GAS* | 769x1537 | 73.5 | 9.22 | 108.4 | paper-reported, not reproduced |"));
    let report: Value = serde_json::from_str(&f.read("t/report.json")).unwrap();
    let refs = report["reference"].as_array().unwrap();
    assert_eq!(refs.len(), 2);
    assert!(refs.iter().all(|r| r["note"] == "paper-reported, not reproduced"));
    let miou = report["report"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));

    // trained weights load back and score the same test split
    let e = f.gas(&["eval", "--preset", "toy", "--config", "@tiny.toml", "--genotype", "@g.json", "--weights", "@t/weights.bin", "--out", "@e"]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    let eval: Value = serde_json::from_str(&f.read("e/report.json")).unwrap();
    assert_eq!(eval["report"]["confusion"], report["report"]["confusion"]);
}

#[test]
fn eval_on_oracle_predictions_scores_one() {
    let f = Fixture::new();
    write_genotype(&f, "g.json", MIXED);
    let out = f.gas(&["eval", "--preset", "toy", "--oracle", "--config", "@tiny.toml", "--genotype", "@g.json", "--out", "@o"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: Value = serde_json::from_str(&f.read("o/report.json")).unwrap();
    assert_eq!(report["report"]["miou"].as_f64(), Some(1.0));
}

#[test]
fn viz_emits_parseable_dot_and_census() {
    let f = Fixture::new();
    write_genotype(&f, "g.json", MIXED);
    let out = f.gas(&["viz", "--preset", "toy", "--config", "@tiny.toml", "--genotype", "@g.json", "--out", "@v"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in ["network.dot", "cell_0.dot", "cell_1.dot"] {
        let text = f.read(&format!("v/{name}"));
        graphviz_rust::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    // counted by name, independent of the op metadata
    let light = ["max_pool_3x3", "skip_connect", "zero"];
    let large = ["dil_sep_conv_3x3_r4", "dil_sep_conv_3x3_r8"];
    let count = |set: &[&str], row: &[&str]| row.iter().filter(|o| set.contains(o)).count();
    let census: Value = serde_json::from_str(&f.read("v/census.json")).unwrap();
    for (k, row) in MIXED.iter().enumerate() {
        let c = &census["per_cell"][k];
        assert_eq!(c["lightweight"], count(&light, row), "cell {k}");
        assert_eq!(c["large_receptive_field"], count(&large, row), "cell {k}");
        assert_eq!(c["stage"], k, "cell {k}");
    }
    assert_eq!(census["lightweight"], 4);
    assert_eq!(census["large_receptive_field"], 3);
    if !f.path("v/network.svg").exists() {
        assert!(stderr(&out).contains("warning"));
    }
}

fn ablation_labels(f: &Fixture, suite: &str) -> Vec<String> {
    let out_dir = format!("@{suite}");
    let out = f.gas(&["ablate", suite, "--preset", "toy", "--no-retrain", "--seeds", "0", "--config", "@tiny.toml", "--lut", "@lut.json", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(f.path(&format!("{suite}/latency.svg")).exists());
    let report: Value = serde_json::from_str(&f.read(&format!("{suite}/report.json"))).unwrap();
    let table = f.read(&format!("{suite}/table.md"));
    let labels: Vec<String> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap().to_string())
        .collect();
    for l in &labels {
        assert!(table.contains(&format!("| {l} |")));
    }
    labels
}

#[test]
fn ablation_suites_have_the_published_row_sets() {
    let f = Fixture::new();
    assert_eq!(ablation_labels(&f, "beta"), ["beta=0.0005", "beta=0.005", "beta=0.05"]);
    assert_eq!(ablation_labels(&f, "d"), ["d=16", "d=32", "d=64", "d=128", "d=256"]);
    assert_eq!(ablation_labels(&f, "graph"), ["edge-similarity", "operation-identity"]);
}

#[test]
fn unknown_ablation_suite_is_a_usage_error() {
    let f = Fixture::new();
    let out = f.gas(&["ablate", "gamma", "--preset", "toy", "--lut", "@lut.json", "--out", "@x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn random_baseline_respects_the_budget() {
    let f = Fixture::new();
    let out = f.gas(&["random-baseline", "--setting", "b", "--budget", "120", "--n", "5", "--preset", "toy", "--config", "@tiny.toml", "--lut", "@lut.json", "--out", "@r"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let entries: Value = serde_json::from_str(&f.read("r/genotypes.json")).unwrap();
    let entries = entries.as_array().unwrap();
    assert_eq!(entries.len(), 5);
    assert!(entries.iter().all(|e| e["latency_us"].as_f64().unwrap() <= 120.0));

    let infeasible = f.gas(&["random-baseline", "--setting", "b", "--budget", "0.5", "--n", "1", "--preset", "toy", "--config", "@tiny.toml", "--lut", "@lut.json", "--out", "@x"]);
    assert_eq!(infeasible.status.code(), Some(2));
}

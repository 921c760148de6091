// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

/// First `n` sentences of a fixture CoNLL file.
fn small_conll(src: &Path, dst: &Path, n: usize) {
    let text = std::fs::read_to_string(src).unwrap();
    let kept: Vec<&str> = text.split("\n\n").take(n).collect();
    std::fs::write(dst, kept.join("\n\n") + "\n").unwrap();
}

struct Run {
    work: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            work: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.work.path().join(p)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_entlens"));
        c.current_dir(self.work.path())
            .env_remove("ENTLENS_MODEL")
            .env_remove("ENTLENS_OUT")
            .env_remove("ENTLENS_CACHE")
            .env("SOURCE_DATE_EPOCH", "1700000000")
            .arg("--model")
            .arg("fixture")
            .arg("--model-dir")
            .arg(fixtures().join("model"))
            .args(args);
        c
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.cmd(args).output().unwrap();
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn json(&self, p: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.path(p)).unwrap()).unwrap()
    }
}

#[test]
fn pipeline_end_to_end() {
    let run = Run::new();
    small_conll(&fixtures().join("conll/train.txt"), &run.path("train.txt"), 40);
    small_conll(&fixtures().join("conll/test.txt"), &run.path("test.txt"), 20);

    run.ok(&["ingest", "--conll", "train.txt", "--split", "train"]);
    run.ok(&["ingest", "--conll", "test.txt", "--split", "test"]);
    let stats = run.json("out/stats-test.json");
    assert!(stats["stats"]["n_samples"].as_u64().unwrap() > 0, "{stats}");
    assert!(run.path("out/manifest-ingest.json").is_file());

    run.ok(&["extract", "--samples", "out/samples-test.jsonl", "--layers", "1-2", "--jobs", "2"]);
    let extract = run.json("out/extract-last.json");
    assert!(extract.to_string().contains("\"layers\""), "{extract}");

    let out = run.ok(&[
        "train-tv", "--samples", "out/samples-train.jsonl", "--layer", "2", "--epochs", "2", "--lr", "0.03",
        "--batch-size", "8",
    ]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["layer"], 2);
    assert!(run.path("out/tv/tv-uncontextual-L2.json").is_file());
    assert!(run.path("out/tv/tv-uncontextual-L2.f32").is_file());
    let manifest = run.json("out/manifest-train-tv.json");
    assert_eq!(manifest["command"], "train-tv");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);

    let eval = [
        "eval", "--samples", "out/samples-test.jsonl", "--layers", "all", "--frequencies", "--freq-table",
    ];
    let table = fixtures().join("counts.tsv");
    let mut args: Vec<&str> = eval.to_vec();
    args.push(table.to_str().unwrap());
    args.extend(["--quantiles", "4", "--max-len", "3", "--offline"]);
    run.ok(&args);
    let first = std::fs::read(run.path("out/eval-uncontextual-last.json")).unwrap();
    let report: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["per_layer"].as_array().unwrap().len(), 1);
    assert_eq!(report["per_layer"][0]["layer"], 2);
    assert!(!report["missing_layers"].as_array().unwrap().is_empty());
    assert!(report["buckets"].is_object());
    assert!(run.path("out/eval-uncontextual-last.csv").is_file());
    let freqs = run.json("out/eval-uncontextual-last-frequencies.json");
    assert!(freqs["row_spearman"].is_object());

    run.ok(&args);
    let second = std::fs::read(run.path("out/eval-uncontextual-last.json")).unwrap();
    assert_eq!(first, second, "rerun with the same config changed the report");

    run.ok(&["eval", "--samples", "out/samples-test.jsonl", "--layers", "2", "--random-theta"]);
    assert!(run.path("out/eval-uncontextual-last-random.json").is_file());

    let out = run.ok(&["lens", "--text", "Angela Merkel visited Paris.", "--layers", "0-2", "--format", "json"]);
    let grid: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(grid["cells"].as_array().unwrap().len(), 3);
    run.ok(&["lens", "--text", "Bonn", "--layers", "2", "--format", "html", "--output", "lens.html"]);
    assert!(std::fs::read_to_string(run.path("lens.html")).unwrap().contains("<table"));

    run.ok(&["analyze", "similarity", "--text", "He met Helmut Kohl", "--target-layer", "2"]);
    let curve = run.json("out/similarity-L2.json");
    assert!(curve.is_object() || curve.is_array());
    run.ok(&["analyze", "knockout", "--samples", "out/samples-test.jsonl", "--target-layer", "1", "--limit", "3"]);
    assert!(run.path("out/knockout-L1.csv").is_file());
}

#[test]
fn relation_command_reports_both_maps() {
    let run = Run::new();
    let handle = entlens::model::ModelHandle::load_dir("fixture", &fixtures().join("model")).unwrap();
    let tv = entlens::TaskVector::random(&handle, 2, entlens::Setting::Uncontextual, 0);
    std::fs::create_dir_all(run.path("out/tv")).unwrap();
    tv.save(&run.path("out/tv/tv-uncontextual-L2")).unwrap();
    let dataset = fixtures().join("relations/landmark_in_country.json");
    run.ok(&[
        "relation", "--dataset", dataset.to_str().unwrap(), "--layer", "2", "--steps", "50", "--n-train",
        "10", "--no-filter",
    ]);
    let id = run.json("out/manifest-relation.json")["outputs"].as_array().unwrap().len();
    assert!(id >= 1);
    let report = std::fs::read_dir(run.path("out"))
        .unwrap()
        .flatten()
        .find(|e| e.file_name().to_string_lossy().starts_with("relation-"))
        .expect("relation report");
    let v: Value = serde_json::from_str(&std::fs::read_to_string(report.path()).unwrap()).unwrap();
    assert!(v["trained"].is_object(), "{v}");
    assert!(v["zero_step"].is_object(), "{v}");
}

#[test]
fn validation_errors_exit_2_with_json() {
    let run = Run::new();
    let cases: [&[&str]; 4] = [
        &["ingest", "--conll", "missing.txt", "--split", "train"],
        &["lens", "--text", "Paris", "--layers", "99"],
        &["eval", "--samples", "missing.jsonl"],
        &["train-tv", "--samples", "missing.jsonl", "--layer", "1", "--setting", "sideways"],
    ];
    for args in cases {
        let out = run.cmd(args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let err: Value = serde_json::from_slice(&out.stderr).unwrap_or_else(|e| {
            panic!("{args:?}: stderr is not JSON ({e}): {}", String::from_utf8_lossy(&out.stderr))
        });
        assert_eq!(err["error"]["kind"], "validation");
        assert!(err["error"]["message"].is_string());
    }
}

#[test]
fn config_files_and_flags_compose() {
    let run = Run::new();
    std::fs::write(run.path("run.toml"), "out_dir = \"from-file\"\nseed = 4\n").unwrap();
    small_conll(&fixtures().join("conll/test.txt"), &run.path("t.txt"), 5);
    run.ok(&["--config", "run.toml", "ingest", "--conll", "t.txt", "--split", "test", "--no-align"]);
    assert!(run.path("from-file/samples-test.jsonl").is_file());
    let m = run.json("from-file/manifest-ingest.json");
    assert_eq!(m["config"]["run"]["seed"], 4);
    run.ok(&["--config", "run.toml", "--out", "flag", "ingest", "--conll", "t.txt", "--split", "test", "--no-align"]);
    assert!(run.path("flag/samples-test.jsonl").is_file());

    std::fs::write(run.path("bad.toml"), "seed = \"x\"\n").unwrap();
    let out = run.cmd(&["--config", "bad.toml", "ingest", "--conll", "t.txt", "--split", "test"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

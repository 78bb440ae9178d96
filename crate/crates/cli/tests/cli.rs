//! End-to-end runs of the `mia` binary on a small synthetic benchmark.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mia(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mia"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

struct Bench {
    dir: tempfile::TempDir,
    provider: String,
    ref_provider: String,
}

impl Bench {
    fn path(&self) -> PathBuf {
        self.dir.path().to_path_buf()
    }
}

fn bench() -> Bench {
    let dir = tempfile::tempdir().unwrap();
    let o = mia(
        &[
            "synth-bench",
            "--out",
            "b",
            "--members",
            "60",
            "--nonmembers",
            "60",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let info: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for f in ["dataset.jsonl", "events.jsonl", "lexicon.tsv"] {
        assert!(dir.path().join("b").join(f).is_file(), "{f}");
    }
    Bench {
        provider: info["provider"].as_str().unwrap().to_string(),
        ref_provider: info["ref_provider"].as_str().unwrap().to_string(),
        dir,
    }
}

#[test]
fn eval_writes_report_and_exits_zero() {
    let b = bench();
    let o = mia(
        &[
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            &b.provider,
            "--methods",
            "loss,recall,conrecall",
            "--shots",
            "7",
            "--gamma",
            "0.5",
            "--seed",
            "1",
            "--out",
            "run1/",
        ],
        &b.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = b.path().join("run1");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let results = report["results"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    let conrecall = results.iter().find(|r| r["method"] == "conrecall").unwrap();
    assert_eq!(conrecall["params"]["gamma"], 0.5);
    assert!(run.join("config.json").is_file() && run.join("scores.jsonl").is_file());
    // the summary on stdout has one row per method
    assert_eq!(stdout(&o).lines().count(), 4);

    // same run without --out prints the identical report
    let o = mia(
        &[
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            &b.provider,
            "--methods",
            "loss,recall,conrecall",
            "--shots",
            "7",
            "--gamma",
            "0.5",
            "--seed",
            "1",
        ],
        &b.path(),
    );
    let printed: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed["results"], report["results"]);
}

#[test]
fn ref_without_reference_provider_is_a_validation_error() {
    let b = bench();
    let o = mia(
        &[
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            &b.provider,
            "--methods",
            "ref",
        ],
        &b.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--ref-provider"), "{}", stderr(&o));

    let o = mia(
        &[
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            &b.provider,
            "--methods",
            "ref",
            "--ref-provider",
            &b.ref_provider,
        ],
        &b.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    let b = bench();
    for args in [
        vec!["eval", "--dataset", "b/dataset.jsonl"],
        vec![
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            "synth:0",
            "--methods",
            "bogus",
        ],
        vec![
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            "synth:0",
            "--gamma",
            "1:0:0.1",
        ],
        vec!["frobnicate"],
    ] {
        assert_eq!(mia(&args, &b.path()).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(mia(&["--help"], &b.path()).status.code(), Some(0));
}

#[test]
fn gamma_sweep_has_eleven_rows_per_method() {
    let b = bench();
    let o = mia(
        &[
            "sweep",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            &b.provider,
            "--methods",
            "recall,conrecall",
            "--param",
            "gamma",
            "--values",
            "0.0:1.0:0.1",
            "--out",
            "sw",
        ],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(b.path().join("sw/grid.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("param_value,method,auc,tpr_at_5fpr"));
    let rows: Vec<&str> = lines.collect();
    for m in ["recall", "conrecall"] {
        assert_eq!(
            rows.iter().filter(|r| r.split(',').nth(1) == Some(m)).count(),
            11,
            "{m}"
        );
    }
}

#[test]
fn missing_trace_records_exit_two() {
    let b = bench();
    let o = mia(
        &[
            "score",
            "--provider",
            &b.provider,
            "--text",
            "w001 w002",
            "--out",
            "t.jsonl",
        ],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mia(
        &[
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            "trace:t.jsonl",
            "--methods",
            "loss",
            "--shots",
            "0",
        ],
        &b.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no trace"), "{}", stderr(&o));
}

#[test]
fn scored_dataset_replays_as_a_trace() {
    let b = bench();
    let o = mia(
        &[
            "score",
            "--provider",
            &b.provider,
            "--input",
            "b/dataset.jsonl",
            "--out",
            "t.jsonl",
        ],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = |provider: &str| {
        let o = mia(
            &[
                "eval",
                "--dataset",
                "b/dataset.jsonl",
                "--provider",
                provider,
                "--methods",
                "loss,zlib",
                "--shots",
                "0",
            ],
            &b.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        v["results"].clone()
    };
    assert_eq!(run("trace:t.jsonl"), run(&b.provider));
}

#[test]
fn transform_shift_approx_and_export() {
    let b = bench();
    let o = mia(
        &[
            "transform",
            "--dataset",
            "b/dataset.jsonl",
            "--op",
            "synonym_substitution",
            "--rate",
            "0.2",
            "--lexicon",
            "b/lexicon.tsv",
            "--seed",
            "4",
            "--out",
            "syn.jsonl",
            "--report",
            "syn.report.jsonl",
        ],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let original = std::fs::read_to_string(b.path().join("b/dataset.jsonl")).unwrap();
    let changed = std::fs::read_to_string(b.path().join("syn.jsonl")).unwrap();
    assert_eq!(changed.lines().count(), original.lines().count());
    assert_ne!(changed, original);
    let report = std::fs::read_to_string(b.path().join("syn.report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 120);

    let o = mia(
        &[
            "shift",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            &b.provider,
            "--shots",
            "0:2:1",
        ],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    assert_eq!(csv.lines().next(), Some("shots,pairing,signed_wasserstein"));
    assert_eq!(csv.lines().count(), 1 + 3 * 4);

    let o = mia(
        &[
            "approx-members",
            "--events",
            "b/events.jsonl",
            "--provider",
            &b.provider,
            "--strategy",
            "sample",
            "--out",
            "approx.jsonl",
        ],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mia(
        &[
            "eval",
            "--dataset",
            "b/dataset.jsonl",
            "--provider",
            &b.provider,
            "--member-shots",
            "approx.jsonl",
            "--methods",
            "recall,conrecall",
            "--out",
            "zero",
        ],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    let o = mia(
        &["export-distributions", "--run", "zero", "--methods", "conrecall"],
        &b.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sample_id,label,method,normalized_score"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 7 approximated member shots, so only non-members are drawn into the pool
    assert_eq!(rows.len(), 120 - 7);
    let values: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(values.contains(&0.0) && values.contains(&1.0));
    assert!(rows.iter().all(|r| r[2] == "conrecall"));
}

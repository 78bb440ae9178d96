//! File-driven runs on a synthetic benchmark: outputs on disk, sweeps,
//! transforms and zero-access member approximation.

use std::path::{Path, PathBuf};

use mia_core::experiments::{
    approximate_members, load_events, run_eval, sweep, write_events, RunConfig, SweepParam, TransformConfig,
};
use mia_core::providers::{synthetic_benchmark, Strategy, SyntheticBenchmark, SyntheticConfig};
use mia_core::transforms::TransformOp;
use mia_core::{Error, Method, Provider};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    bench: SyntheticBenchmark,
}

fn fixture() -> Fixture {
    let cfg = SyntheticConfig {
        n_member: 60,
        n_nonmember: 60,
        doc_len: 24,
        ..SyntheticConfig::with_seed(3)
    };
    let bench = synthetic_benchmark(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    bench.dataset.write_jsonl(&root.join("data.jsonl")).unwrap();
    std::fs::write(root.join("lexicon.tsv"), bench.lexicon.to_tsv()).unwrap();
    let events = std::fs::File::create(root.join("events.jsonl")).unwrap();
    write_events(events, &bench.events).unwrap();
    Fixture {
        _dir: dir,
        root,
        bench,
    }
}

impl Fixture {
    fn config(&self, methods: Vec<Method>) -> RunConfig {
        let mut c = RunConfig::new(self.root.join("data.jsonl"), self.bench.config.uri(None), methods);
        c.ref_provider = Some(self.bench.reference.uri().to_string());
        c.lexicon = Some(self.root.join("lexicon.tsv"));
        c.shots = 5;
        c.seed = 11;
        c
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn eval_writes_run_directory() {
    let f = fixture();
    let mut c = f.config(Method::ALL.to_vec());
    c.out_dir = Some(f.root.join("run"));
    let out = run_eval(&c).unwrap();
    assert!(out.report.skipped.is_empty());
    assert_eq!(out.report.results.len(), Method::ALL.len());
    assert_eq!(out.report.n_eval, 120 - 10);

    let run = f.root.join("run");
    let saved: RunConfig = serde_json::from_str(&read(&run.join("config.json"))).unwrap();
    assert_eq!(saved, c);
    let report: serde_json::Value = serde_json::from_str(&read(&run.join("report.json"))).unwrap();
    assert_eq!(report["config_hash"], c.hash());
    // one line per sample and grid point: 10 γ, 10 k for each Min-K variant, 1 for the rest
    let lines = read(&run.join("scores.jsonl")).lines().count();
    assert_eq!(lines, (10 + 10 + 10 + 5) * 110);

    // prefix texts never appear among the scored samples
    for id in &out.report.pool_source_ids {
        assert!(out.scores.iter().all(|s| &s.sample_id != id));
    }
}

#[test]
fn rerun_is_byte_identical() {
    let f = fixture();
    let mut a = f.config(vec![Method::Loss, Method::Neighbor, Method::Conrecall]);
    a.out_dir = Some(f.root.join("a"));
    let mut b = a.clone();
    b.out_dir = Some(f.root.join("b"));
    run_eval(&a).unwrap();
    run_eval(&b).unwrap();
    for name in ["report.json", "scores.jsonl"] {
        assert_eq!(
            read(&f.root.join("a").join(name)),
            read(&f.root.join("b").join(name)),
            "{name}"
        );
    }
    // a warm cache changes nothing
    run_eval(&a).unwrap();
    assert_eq!(
        read(&f.root.join("a/report.json")),
        read(&f.root.join("b/report.json"))
    );
}

#[test]
fn gamma_sweep_grid_has_eleven_rows_per_method() {
    let f = fixture();
    let mut c = f.config(vec![Method::Recall, Method::Conrecall]);
    c.out_dir = Some(f.root.join("sweep"));
    let values: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let rep = sweep(&c, SweepParam::Gamma, &values).unwrap();
    assert_eq!(rep.entries.len(), 11);
    let csv = read(&f.root.join("sweep/grid.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("param_value,method,auc,tpr_at_5fpr"));
    let rows: Vec<&str> = lines.collect();
    for m in ["recall", "conrecall"] {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(m)).count(), 11);
    }
    // the γ = 0 point is ReCall
    let first = &rep.entries[0];
    assert_eq!(first.value, 0.0);
    assert_eq!(
        first.report.auc(Method::Conrecall),
        first.report.auc(Method::Recall)
    );
}

#[test]
fn deletion_run_keeps_pool_and_reports_counts() {
    let f = fixture();
    let plain = run_eval(&f.config(vec![Method::Loss, Method::Conrecall])).unwrap();
    let mut c = f.config(vec![Method::Loss, Method::Conrecall]);
    c.transform = Some(TransformConfig {
        op: TransformOp::RandomDeletion,
        rate: Some(0.15),
        seed: 1,
        pairs: None,
    });
    c.out_dir = Some(f.root.join("del"));
    let out = run_eval(&c).unwrap();
    assert_eq!(out.transforms.len(), 110);
    assert!(out.transforms.iter().all(|t| t.applied == 4 && t.requested == 4));
    assert_eq!(read(&f.root.join("del/transforms.jsonl")).lines().count(), 110);
    // same pool, same evaluation ids
    assert_eq!(out.report.pool_source_ids, plain.report.pool_source_ids);
    assert_ne!(out.report.auc(Method::Loss), plain.report.auc(Method::Loss));
}

#[test]
fn paraphrase_file_replaces_texts() {
    let f = fixture();
    let target = f.bench.dataset.samples.iter().find(|s| s.id == "m0059").unwrap();
    let pairs = f.root.join("pairs.jsonl");
    let new_text = target.text.split(' ').rev().collect::<Vec<_>>().join(" ");
    std::fs::write(
        &pairs,
        format!("{}\n", serde_json::json!({"id": "m0059", "text": new_text})),
    )
    .unwrap();
    let mut c = f.config(vec![Method::Loss]);
    c.transform = Some(TransformConfig {
        op: TransformOp::Paraphrase,
        rate: None,
        seed: 0,
        pairs: Some(pairs),
    });
    let out = run_eval(&c).unwrap();
    let changed: Vec<_> = out.transforms.iter().filter(|t| t.applied > 0).collect();
    assert_eq!(changed.len(), 1);
    assert_eq!(changed[0].sample_id, "m0059");
}

#[test]
fn zero_access_run_uses_approximated_members() {
    let f = fixture();
    let events = load_events(&f.root.join("events.jsonl")).unwrap();
    let approx = approximate_members(&events, &[0.5], 24, &f.bench.target, Strategy::Greedy, 0).unwrap();
    assert_eq!(approx.len(), events.len());
    let shots_file = f.root.join("approx.jsonl");
    write_events(std::fs::File::create(&shots_file).unwrap(), &approx).unwrap();

    let mut c = f.config(vec![Method::Recall, Method::Conrecall]);
    c.member_shots_file = Some(shots_file);
    let out = run_eval(&c).unwrap();
    // no real member is consumed by the pool
    assert!(out.report.pool_source_ids.iter().all(|id| id.starts_with('n')));
    assert_eq!(out.report.n_eval, 120 - 5);
    assert!(out.report.auc(Method::Conrecall).unwrap() > 0.5);
}

#[test]
fn conrecall_without_member_shots_is_rejected() {
    let f = fixture();
    let mut c = f.config(vec![Method::Conrecall]);
    c.member_pool = Some(0);
    assert!(matches!(run_eval(&c), Err(Error::MissingMemberShots)));
}

#[test]
fn shots_sweep_regression() {
    let f = fixture();
    let c = f.config(vec![Method::Recall, Method::Conrecall]);
    let values: Vec<f64> = (1..=5).map(f64::from).collect();
    let rep = sweep(&c, SweepParam::Shots, &values).unwrap();
    let got: Vec<(f64, f64)> = rep
        .entries
        .iter()
        .map(|e| {
            (
                e.report.auc(Method::Recall).unwrap(),
                e.report.auc(Method::Conrecall).unwrap(),
            )
        })
        .collect();
    let expected = [
        (0.901818181818, 0.903140495868),
        (0.902148760331, 0.903801652893),
        (0.892892561983, 0.898512396694),
        (0.879008264463, 0.891570247934),
        (0.891239669421, 0.898842975207),
    ];
    for (g, e) in got.iter().zip(expected) {
        assert!(
            (g.0 - e.0).abs() < 1e-11 && (g.1 - e.1).abs() < 1e-11,
            "{g:?} vs {e:?}"
        );
    }
}

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mia_core::experiments::{
    self, approximate_members, load_events, write_events, CachedProvider, LlCache, RunConfig, RunReport,
    SweepParam, TransformConfig,
};
use mia_core::providers::{
    context_id, open_provider, synthetic_benchmark, ContextRecord, Strategy, SyntheticConfig, TraceRecord,
};
use mia_core::shift::{
    min_max_normalize, shift_profile_with, write_distribution_csv, NormalizedScore, ShiftStatistic,
};
use mia_core::transforms::{
    apply_transform, load_paraphrase_pairs, SynonymLexicon, TransformOp, TransformSpec,
};
use mia_core::types::{load_dataset, split_prefix_pool, DatasetFormat, Label};
use mia_core::{Method, MethodScore, Provider};

use crate::values::{parse_counts, parse_values};
use crate::{
    ApproxArgs, ExportArgs, RunArgs, ScoreArgs, ShiftArgs, Statistic, StrategyKind, SweepArgs, SweepKind,
    SynthArgs, TransformArgs, TransformKind,
};

/// Standard output, or a file when a path is given.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Box::new(BufWriter::new(
                File::create(p).with_context(|| format!("creating {}", p.display()))?,
            ))
        }
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn op_of(kind: TransformKind) -> TransformOp {
    match kind {
        TransformKind::RandomDeletion => TransformOp::RandomDeletion,
        TransformKind::SynonymSubstitution => TransformOp::SynonymSubstitution,
        TransformKind::Paraphrase => TransformOp::Paraphrase,
    }
}

fn run_config(a: RunArgs) -> Result<RunConfig> {
    let mut c = RunConfig::new(a.dataset, a.provider, a.methods);
    c.ref_provider = a.ref_provider;
    c.shots = a.shots;
    c.member_pool = a.member_pool;
    c.nonmember_pool = a.nonmember_pool;
    c.member_shots_file = a.member_shots;
    c.gamma_grid = parse_values(&a.gamma).context("--gamma")?;
    c.k_grid = parse_values(&a.k).context("--k")?;
    c.fpr_levels = parse_values(&a.fpr).context("--fpr")?;
    c.seed = a.seed;
    c.n_neighbors = a.neighbors;
    c.neighbor_rate = a.neighbor_rate;
    c.lexicon = a.lexicon;
    c.transform = match a.transform {
        Some(kind) => Some(TransformConfig {
            op: op_of(kind),
            rate: a.transform_rate,
            seed: a.transform_seed,
            pairs: a.pairs,
        }),
        None => {
            if a.transform_rate.is_some() || a.pairs.is_some() {
                bail!("--transform-rate and --pairs need --transform");
            }
            None
        }
    };
    c.out_dir = a.out;
    c.cache_dir = a.cache_dir;
    c.validate()?;
    Ok(c)
}

fn print_summary(report: &RunReport) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "method\tauc\ttpr_at_fpr\tparams")?;
    for r in &report.results {
        writeln!(
            out,
            "{}\t{:.6}\t{}\t{}",
            r.method,
            r.auc,
            serde_json::to_string(&r.tpr_at_fpr)?,
            serde_json::to_string(&r.params)?
        )?;
    }
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.method, s.reason);
    }
    Ok(())
}

pub fn eval(a: RunArgs) -> Result<()> {
    let config = run_config(a)?;
    let out = experiments::run_eval(&config)?;
    match &config.out_dir {
        Some(dir) => {
            print_summary(&out.report)?;
            eprintln!("wrote {}", dir.display());
        }
        None => {
            let mut w = sink(None)?;
            serde_json::to_writer_pretty(&mut w, &out.report)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let config = run_config(a.run)?;
    let values = parse_values(&a.values).context("--values")?;
    let param = match a.param {
        SweepKind::Gamma => SweepParam::Gamma,
        SweepKind::K => SweepParam::K,
        SweepKind::Shots => SweepParam::Shots,
    };
    let report = experiments::sweep(&config, param, &values)?;
    match &config.out_dir {
        Some(dir) => {
            for (method, best) in &report.best {
                println!("{method}\tbest {}={best}", param.as_str());
            }
            eprintln!("wrote {}", dir.join("grid.csv").display());
        }
        None => {
            let mut w = sink(None)?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn registry(path: &Path) -> Result<(mia_core::Dataset, Vec<(String, String)>)> {
    let ds = load_dataset(path, DatasetFormat::Jsonl)?;
    let reg = ds
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.text.clone()))
        .collect();
    Ok((ds, reg))
}

pub fn score(a: ScoreArgs) -> Result<()> {
    type Pairs = Vec<(String, String)>;
    let (items, reg): (Pairs, Pairs) = match (&a.input, &a.text) {
        (Some(p), _) => {
            let (ds, reg) = registry(p)?;
            (ds.samples.into_iter().map(|s| (s.id, s.text)).collect(), reg)
        }
        (None, Some(t)) => (vec![("text".to_string(), t.clone())], Vec::new()),
        (None, None) => bail!("one of --input or --text is required"),
    };
    let provider = open_provider(&a.provider, &reg)?;
    let mut w = sink(a.out.as_deref())?;
    for (id, text) in &items {
        let ts = provider.score(text, a.context.as_deref(), a.stats)?;
        serde_json::to_writer(&mut w, &TraceRecord::from_scores(id.as_str(), &ts))?;
        writeln!(w)?;
    }
    w.flush()?;
    // a context sidecar makes the output a self-contained trace file
    if let (Some(out), Some(ctx)) = (&a.out, &a.context) {
        let stem = out.file_stem().unwrap_or_default().to_string_lossy();
        let sidecar = out.with_file_name(format!("{stem}.contexts.jsonl"));
        let rec = ContextRecord {
            context_id: context_id(Some(ctx)),
            text: ctx.clone(),
        };
        std::fs::write(&sidecar, format!("{}\n", serde_json::to_string(&rec)?))
            .with_context(|| format!("writing {}", sidecar.display()))?;
    }
    Ok(())
}

pub fn shift(a: ShiftArgs) -> Result<()> {
    let shots = parse_counts(&a.shots).context("--shots")?;
    let (ds, reg) = registry(&a.dataset)?;
    ds.check_evaluable()?;
    let max = shots.iter().copied().max().unwrap_or(0);
    let (pool, eval_set) = split_prefix_pool(&ds, max, max, a.seed)?;
    let provider = open_provider(&a.provider, &reg)?;
    let cache = match &a.cache_dir {
        Some(dir) => LlCache::on_disk(dir)?,
        None => LlCache::in_memory(),
    };
    let cached = CachedProvider::new(provider.as_ref(), &cache);
    let stat = match a.statistic {
        Statistic::Mean => ShiftStatistic::MeanLl,
        Statistic::Sum => ShiftStatistic::SumLl,
    };
    let profile = shift_profile_with(&eval_set, &pool, &cached, &shots, a.bins, stat)?;
    let mut w = sink(a.out.as_deref())?;
    profile.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn transform(a: TransformArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset, DatasetFormat::Jsonl)?;
    let rate = || a.rate.context("--rate is required for this transform");
    let spec = match a.op {
        TransformKind::RandomDeletion => TransformSpec::RandomDeletion {
            rate: rate()?,
            seed: a.seed,
        },
        TransformKind::SynonymSubstitution => TransformSpec::SynonymSubstitution {
            rate: rate()?,
            seed: a.seed,
            lexicon: match &a.lexicon {
                Some(p) => SynonymLexicon::load_tsv(p)?,
                None => SynonymLexicon::bundled(),
            },
        },
        TransformKind::Paraphrase => TransformSpec::Paraphrase {
            pairs: load_paraphrase_pairs(a.pairs.as_deref().context("--pairs is required for paraphrase")?)?,
        },
    };
    let (out, reports) = apply_transform(&ds, &spec)?;
    let mut w = sink(a.out.as_deref())?;
    w.write_all(out.to_jsonl().as_bytes())?;
    w.flush()?;
    if let Some(p) = &a.report {
        let mut r = sink(Some(p))?;
        for rep in &reports {
            serde_json::to_writer(&mut r, rep)?;
            writeln!(r)?;
        }
        r.flush()?;
    }
    let short: usize = reports.iter().map(|r| r.requested - r.applied).sum();
    if short > 0 {
        eprintln!("{short} requested edits could not be applied (see the transform report)");
    }
    Ok(())
}

pub fn approx_members(a: ApproxArgs) -> Result<()> {
    let events = load_events(&a.events)?;
    let cuts = parse_values(&a.cut).context("--cut")?;
    let provider = open_provider(&a.provider, &[])?;
    let strategy = match a.strategy {
        StrategyKind::Greedy => Strategy::Greedy,
        StrategyKind::Sample => Strategy::Sample,
    };
    let texts = approximate_members(&events, &cuts, a.target_len, provider.as_ref(), strategy, a.seed)?;
    let mut w = sink(a.out.as_deref())?;
    write_events(&mut w, &texts)?;
    w.flush()?;
    Ok(())
}

pub fn synth_bench(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        seed: a.seed,
        vocab_size: a.vocab,
        num_topics: a.topics,
        prior_skew: a.prior,
        smoothing: a.smoothing,
        background_weight: a.background,
        concentration: a.concentration,
        spread: a.spread,
        n_member: a.members,
        n_nonmember: a.nonmembers,
        doc_len: a.doc_len,
        n_events: a.events,
    };
    let bench = synthetic_benchmark(&cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let dataset = a.out.join("dataset.jsonl");
    bench.dataset.write_jsonl(&dataset)?;
    let events = a.out.join("events.jsonl");
    write_events(sink(Some(&events))?, &bench.events)?;
    let lexicon = a.out.join("lexicon.tsv");
    std::fs::write(&lexicon, bench.lexicon.to_tsv())
        .with_context(|| format!("writing {}", lexicon.display()))?;
    let info = serde_json::json!({
        "provider": bench.target.uri(),
        "ref_provider": bench.reference.uri(),
        "dataset": dataset,
        "events": events,
        "lexicon": lexicon,
    });
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn export_distributions(a: ExportArgs) -> Result<()> {
    let config: RunConfig =
        serde_json::from_str(&read_text(&a.run.join("config.json"))?).context("parsing config.json")?;
    let report: RunReport =
        serde_json::from_str(&read_text(&a.run.join("report.json"))?).context("parsing report.json")?;
    let dataset = resolve(&a.run, &config.dataset);
    let labels: HashMap<String, Label> = load_dataset(&dataset, DatasetFormat::Jsonl)?
        .samples
        .into_iter()
        .map(|s| (s.id, s.label))
        .collect();

    let scores_path = a.run.join("scores.jsonl");
    let file = File::open(&scores_path).with_context(|| format!("reading {}", scores_path.display()))?;
    let mut by_method: BTreeMap<Method, Vec<MethodScore>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: MethodScore = serde_json::from_str(&line)
            .with_context(|| format!("{} line {}", scores_path.display(), i + 1))?;
        // keep only the reported (best) parameters of each method
        let best = report.result(s.method).map(|r| &r.params);
        if best == Some(&s.params) && (a.methods.is_empty() || a.methods.contains(&s.method)) {
            by_method.entry(s.method).or_default().push(s);
        }
    }
    if by_method.is_empty() {
        bail!("no scores for the requested methods in {}", scores_path.display());
    }
    let mut rows = Vec::new();
    for (method, scores) in by_method {
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        for (s, v) in scores.iter().zip(min_max_normalize(&values)?) {
            let label = *labels
                .get(&s.sample_id)
                .with_context(|| format!("sample {:?} not in {}", s.sample_id, dataset.display()))?;
            rows.push(NormalizedScore {
                sample_id: s.sample_id.clone(),
                label,
                method: method.to_string(),
                normalized_score: v,
            });
        }
    }
    let mut w = sink(a.out.as_deref())?;
    write_distribution_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(())
}

/// Dataset paths in a saved config are taken as written; relative ones
/// that do not exist from the working directory are tried next to the run.
fn resolve(run: &Path, path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        let alt = run.join(path);
        if alt.exists() {
            return alt;
        }
    }
    path.to_path_buf()
}

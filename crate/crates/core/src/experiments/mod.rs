//! End-to-end evaluation runs, parameter sweeps and member approximation.
//!
//! A run splits a seeded prefix pool off the dataset, scores every remaining
//! sample with each requested method through one shared provider and LL
//! cache, and reports AUC and TPR at the requested FPR levels. Output
//! directories contain `config.json`, `scores.jsonl`, `report.json`,
//! optionally `transforms.jsonl` and `grid.csv`, and `cache/`.

mod approx;
mod cache;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, fpr_key, EvalReport, GridPoint, DEFAULT_FPR_LEVEL};
use crate::providers::{map_concurrent, open_provider, score_text, score_text_with_stats, Provider};
use crate::scoring::{
    conrecall_score, loss_score, mink_score, minkpp_score, neighbor_score, recall_score, ref_score,
    zlib_score,
};
use crate::transforms::{
    apply_transform, load_paraphrase_pairs, sample_seed, synonym_substitution, SynonymLexicon, TransformOp,
    TransformReport, TransformSpec,
};
use crate::types::{
    build_prefix, load_dataset, split_prefix_pool, write_scores_jsonl, Dataset, DatasetFormat, Label, Method,
    MethodScore, Params, PrefixKind, PrefixPool, Sample, TokenScores,
};

pub use approx::{approximate_members, load_events, truncation_len, write_events, DEFAULT_CUT_FRACTION};
pub use cache::{CachedProvider, LlCache};

/// γ values 0.1, 0.2, …, 1.0.
pub fn default_gamma_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn default_k_grid() -> Vec<f64> {
    (1..=10).map(|i| (i * 10) as f64).collect()
}

fn default_shots() -> usize {
    7
}

fn default_fpr_levels() -> Vec<f64> {
    vec![DEFAULT_FPR_LEVEL]
}

fn default_n_neighbors() -> usize {
    5
}

fn default_neighbor_rate() -> f64 {
    0.1
}

/// Text perturbation applied to evaluation samples after the pool split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub op: TransformOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Paraphrase pairs file (`{"id", "text"}` lines), for `paraphrase`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_provider: Option<String>,
    pub methods: Vec<Method>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    /// Member texts reserved for prefixes; defaults to `shots`, or 0 when
    /// `member_shots_file` supplies them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_pool: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nonmember_pool: Option<usize>,
    /// Externally supplied member shots (events-file format), e.g. from
    /// `approximate_members`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_shots_file: Option<PathBuf>,
    #[serde(default = "default_gamma_grid")]
    pub gamma_grid: Vec<f64>,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<f64>,
    #[serde(default = "default_fpr_levels")]
    pub fpr_levels: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_neighbors")]
    pub n_neighbors: usize,
    #[serde(default = "default_neighbor_rate")]
    pub neighbor_rate: f64,
    /// Synonym lexicon (TSV) for neighbors and substitution; bundled if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Defaults to `<out_dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(dataset: impl Into<PathBuf>, provider: impl Into<String>, methods: Vec<Method>) -> Self {
        RunConfig {
            dataset: dataset.into(),
            provider: provider.into(),
            ref_provider: None,
            methods,
            shots: default_shots(),
            member_pool: None,
            nonmember_pool: None,
            member_shots_file: None,
            gamma_grid: default_gamma_grid(),
            k_grid: default_k_grid(),
            fpr_levels: default_fpr_levels(),
            seed: 0,
            n_neighbors: default_n_neighbors(),
            neighbor_rate: default_neighbor_rate(),
            lexicon: None,
            transform: None,
            out_dir: None,
            cache_dir: None,
        }
    }

    fn needs(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    fn needs_prefix(&self) -> bool {
        self.needs(Method::Recall) || self.needs(Method::Conrecall)
    }

    /// Pool sizes `(member, nonmember)` drawn from the dataset.
    pub fn pool_sizes(&self) -> (usize, usize) {
        let member = self.member_pool.unwrap_or(if self.member_shots_file.is_some() {
            0
        } else {
            self.shots
        });
        (member, self.nonmember_pool.unwrap_or(self.shots))
    }

    /// Checks everything that can be checked without touching a provider.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        let unique: BTreeSet<Method> = self.methods.iter().copied().collect();
        if unique.len() != self.methods.len() {
            return bad("methods listed more than once".into());
        }
        if self.provider.trim().is_empty() {
            return Err(Error::MissingInput {
                method: "any".into(),
                what: "a provider (--provider)".into(),
            });
        }
        if self.needs(Method::Ref) && self.ref_provider.is_none() {
            return Err(Error::MissingInput {
                method: "ref".into(),
                what: "a reference provider (--ref-provider)".into(),
            });
        }
        if let Some(g) = self.gamma_grid.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return bad(format!("gamma must be >= 0, got {g}"));
        }
        if let Some(k) = self.k_grid.iter().find(|k| !(**k > 0.0 && **k <= 100.0)) {
            return bad(format!("k must be in (0, 100], got {k}"));
        }
        if self.needs(Method::Conrecall) && self.gamma_grid.is_empty() {
            return bad("empty gamma grid".into());
        }
        if (self.needs(Method::Mink) || self.needs(Method::Minkpp)) && self.k_grid.is_empty() {
            return bad("empty k grid".into());
        }
        if self.fpr_levels.is_empty() {
            return bad("no fpr levels".into());
        }
        if let Some(l) = self.fpr_levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
            return bad(format!("fpr level must be in (0, 1), got {l}"));
        }
        if self.needs(Method::Neighbor) {
            if self.n_neighbors == 0 {
                return bad("n_neighbors must be at least 1".into());
            }
            if !(self.neighbor_rate > 0.0 && self.neighbor_rate < 1.0) {
                return bad(format!(
                    "neighbor rate must be in (0, 1), got {}",
                    self.neighbor_rate
                ));
            }
        }
        if let Some(t) = &self.transform {
            match t.op {
                TransformOp::Paraphrase if t.pairs.is_none() => {
                    return bad("paraphrase transform needs a pairs file".into())
                }
                TransformOp::RandomDeletion | TransformOp::SynonymSubstitution => match t.rate {
                    Some(r) if r > 0.0 && r < 1.0 => {}
                    other => return bad(format!("transform rate must be in (0, 1), got {other:?}")),
                },
                _ => {}
            }
        }
        if self.needs_prefix() {
            if self.shots == 0 {
                return bad("shots must be at least 1 for recall and conrecall".into());
            }
            let (m, nm) = self.pool_sizes();
            if nm == 0 {
                return Err(Error::MissingNonmemberShots);
            }
            if nm < self.shots {
                return Err(Error::InsufficientShots {
                    have: nm,
                    want: self.shots,
                });
            }
            if self.needs(Method::Conrecall) {
                if m == 0 && self.member_shots_file.is_none() {
                    return Err(Error::MissingMemberShots);
                }
                if m > 0 && m < self.shots {
                    return Err(Error::InsufficientShots {
                        have: m,
                        want: self.shots,
                    });
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the configuration, ignoring output locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.cache_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn effective_cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| self.out_dir.as_ref().map(|d| d.join("cache")))
    }
}

/// Everything a run consumes, already loaded.
pub struct RunInputs<'a> {
    pub dataset: Dataset,
    pub provider: &'a dyn Provider,
    pub reference: Option<&'a dyn Provider>,
    pub member_shots: Option<Vec<String>>,
    pub lexicon: SynonymLexicon,
    pub paraphrases: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub method: Method,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub dataset: String,
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_provider: Option<String>,
    pub shots: usize,
    pub n_eval: usize,
    pub pool_source_ids: Vec<String>,
    pub results: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<Skipped>,
}

impl RunReport {
    pub fn result(&self, method: Method) -> Option<&EvalReport> {
        self.results.iter().find(|r| r.method == method)
    }

    pub fn auc(&self, method: Method) -> Option<f64> {
        self.result(method).map(|r| r.auc)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    /// Every score computed, including each grid value of swept methods.
    pub scores: Vec<MethodScore>,
    pub transforms: Vec<TransformReport>,
    pub pool: PrefixPool,
}

/// Dataset, providers, member shots, lexicon and paraphrase pairs of a run.
pub type Inputs = (
    Dataset,
    LoadedProviders,
    Option<Vec<String>>,
    SynonymLexicon,
    Option<BTreeMap<String, String>>,
);

/// Loads the dataset, providers and auxiliary files named in `config`.
pub fn load_inputs(config: &RunConfig) -> Result<Inputs> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset, DatasetFormat::Jsonl)?;
    let registry: Vec<(String, String)> = dataset
        .samples
        .iter()
        .map(|s| (s.id.clone(), s.text.clone()))
        .collect();
    let target = open_provider(&config.provider, &registry)?;
    let reference = match &config.ref_provider {
        Some(uri) => Some(open_provider(uri, &registry)?),
        None => None,
    };
    let member_shots = match &config.member_shots_file {
        Some(p) => Some(load_events(p)?),
        None => None,
    };
    let lexicon = match &config.lexicon {
        Some(p) => SynonymLexicon::load_tsv(p)?,
        None => SynonymLexicon::bundled(),
    };
    let paraphrases = match config.transform.as_ref().and_then(|t| t.pairs.as_ref()) {
        Some(p) => Some(load_paraphrase_pairs(p)?),
        None => None,
    };
    Ok((
        dataset,
        LoadedProviders { target, reference },
        member_shots,
        lexicon,
        paraphrases,
    ))
}

pub struct LoadedProviders {
    pub target: Box<dyn Provider>,
    pub reference: Option<Box<dyn Provider>>,
}

/// Runs an evaluation from files named in the config.
pub fn run_eval(config: &RunConfig) -> Result<RunOutput> {
    let (dataset, providers, member_shots, lexicon, paraphrases) = load_inputs(config)?;
    run_eval_with(
        config,
        RunInputs {
            dataset,
            provider: providers.target.as_ref(),
            reference: providers.reference.as_deref(),
            member_shots,
            lexicon,
            paraphrases,
        },
    )
}

fn open_cache(config: &RunConfig) -> Result<LlCache> {
    match config.effective_cache_dir() {
        Some(dir) => LlCache::on_disk(&dir),
        None => Ok(LlCache::in_memory()),
    }
}

/// Runs an evaluation on already-loaded inputs and writes the run directory
/// when `config.out_dir` is set.
pub fn run_eval_with(config: &RunConfig, inputs: RunInputs<'_>) -> Result<RunOutput> {
    config.validate()?;
    let cache = open_cache(config)?;
    let target = CachedProvider::new(inputs.provider, &cache);
    let reference = inputs.reference.map(|r| CachedProvider::new(r, &cache));
    let cached = RunInputs {
        provider: &target,
        reference: reference.as_ref().map(|r| r as &dyn Provider),
        ..inputs
    };
    let result = execute(config, &cached);
    cache.flush()?;
    let out = result?;
    if let Some(dir) = &config.out_dir {
        write_run(dir, config, &out)?;
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_file(path, |w| writeln!(w, "{text}"))
}

fn write_run(dir: &Path, config: &RunConfig, out: &RunOutput) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("config.json"), config)?;
    write_file(&dir.join("scores.jsonl"), |w| write_scores_jsonl(w, &out.scores))?;
    write_json(&dir.join("report.json"), &out.report)?;
    if !out.transforms.is_empty() {
        write_file(&dir.join("transforms.jsonl"), |w| {
            for t in &out.transforms {
                writeln!(w, "{}", serde_json::to_string(t)?)?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn transform_spec(config: &RunConfig, inputs: &RunInputs<'_>) -> Result<Option<TransformSpec>> {
    let Some(t) = &config.transform else {
        return Ok(None);
    };
    let rate = t.rate.unwrap_or(0.0);
    Ok(Some(match t.op {
        TransformOp::RandomDeletion => TransformSpec::RandomDeletion { rate, seed: t.seed },
        TransformOp::SynonymSubstitution => TransformSpec::SynonymSubstitution {
            rate,
            seed: t.seed,
            lexicon: inputs.lexicon.clone(),
        },
        TransformOp::Paraphrase => TransformSpec::Paraphrase {
            pairs: inputs
                .paraphrases
                .clone()
                .ok_or_else(|| Error::InvalidParameter("paraphrase pairs not loaded".into()))?,
        },
    }))
}

/// Splits the pool and applies any transform to the evaluation texts.
fn prepare(
    config: &RunConfig,
    inputs: &RunInputs<'_>,
) -> Result<(PrefixPool, Dataset, Vec<TransformReport>)> {
    inputs.dataset.check_evaluable()?;
    let (n_m, n_nm) = config.pool_sizes();
    let (mut pool, eval) = split_prefix_pool(&inputs.dataset, n_m, n_nm, config.seed)?;
    if let Some(shots) = &inputs.member_shots {
        if config.member_pool.is_none() || pool.member_shots.is_empty() {
            pool.member_shots = shots.clone();
        }
    }
    pool.validate()?;
    if config.needs(Method::Conrecall) && pool.member_shots.len() < config.shots {
        return Err(if pool.member_shots.is_empty() {
            Error::MissingMemberShots
        } else {
            Error::InsufficientShots {
                have: pool.member_shots.len(),
                want: config.shots,
            }
        });
    }
    eval.check_evaluable()?;
    let (eval, reports) = match transform_spec(config, inputs)? {
        Some(spec) => apply_transform(&eval, &spec)?,
        None => (eval, Vec::new()),
    };
    Ok((pool, eval, reports))
}

/// Per-sample provider outputs shared by all methods.
struct Lls {
    uncond: Vec<TokenScores>,
    stats: bool,
    nonmember: Option<Vec<TokenScores>>,
    member: Option<Vec<TokenScores>>,
    reference: Option<Vec<TokenScores>>,
    neighbors: Option<Vec<Vec<TokenScores>>>,
}

/// Runs one scoring phase; capability errors become `None`.
fn phase<R: Send>(
    provider: &dyn Provider,
    samples: &[Sample],
    f: impl Fn(&Sample) -> Result<R> + Sync + Send,
) -> Result<std::result::Result<Vec<R>, Error>> {
    match map_concurrent(provider, samples, f) {
        Ok(v) => Ok(Ok(v)),
        Err(e) if e.is_capability() => Ok(Err(e)),
        Err(e) => Err(e),
    }
}

fn neighbor_texts(config: &RunConfig, lexicon: &SynonymLexicon, s: &Sample) -> Result<Vec<String>> {
    (0..config.n_neighbors)
        .map(|j| {
            let seed = sample_seed(config.seed, &format!("{}#neighbor{j}", s.id));
            synonym_substitution(&s.text, config.neighbor_rate, lexicon, seed)
        })
        .collect()
}

fn collect_lls(
    config: &RunConfig,
    inputs: &RunInputs<'_>,
    pool: &PrefixPool,
    eval: &Dataset,
    skipped: &mut Vec<Skipped>,
) -> Result<Lls> {
    let p = inputs.provider;
    let samples = &eval.samples;
    let mut skip = |method: Method, reason: String| {
        log::warn!("skipping {method}: {reason}");
        skipped.push(Skipped { method, reason });
    };

    let mut stats = config.needs(Method::Minkpp);
    if stats && !p.capabilities().distribution_stats {
        skip(Method::Minkpp, "provider lacks distribution_stats".into());
        stats = false;
    }
    let uncond = if stats {
        match phase(p, samples, |s| score_text_with_stats(p, &s.text, None))? {
            Ok(v) => v,
            Err(e) => {
                skip(Method::Minkpp, e.to_string());
                stats = false;
                map_concurrent(p, samples, |s| score_text(p, &s.text, None))?
            }
        }
    } else {
        map_concurrent(p, samples, |s| score_text(p, &s.text, None))?
    };

    let conditional = |kind: PrefixKind| -> Result<Vec<TokenScores>> {
        let prefix = build_prefix(pool, kind, config.shots)?;
        map_concurrent(p, samples, |s| score_text(p, &s.text, Some(&prefix)))
    };
    let nonmember = if config.needs_prefix() {
        Some(conditional(PrefixKind::Nonmember)?)
    } else {
        None
    };
    let member = if config.needs(Method::Conrecall) {
        Some(conditional(PrefixKind::Member)?)
    } else {
        None
    };

    let mut reference = None;
    if config.needs(Method::Ref) {
        let r = inputs.reference.ok_or_else(|| Error::MissingInput {
            method: "ref".into(),
            what: "a reference provider (--ref-provider)".into(),
        })?;
        match phase(r, samples, |s| score_text(r, &s.text, None))? {
            Ok(v) => reference = Some(v),
            Err(e) => skip(Method::Ref, e.to_string()),
        }
    }

    let neighbors = if config.needs(Method::Neighbor) {
        let per_sample = map_concurrent(p, samples, |s| {
            neighbor_texts(config, &inputs.lexicon, s)?
                .iter()
                .map(|t| score_text(p, t, None))
                .collect::<Result<Vec<_>>>()
        })?;
        Some(per_sample)
    } else {
        None
    };

    Ok(Lls {
        uncond,
        stats,
        nonmember,
        member,
        reference,
        neighbors,
    })
}

fn params(pairs: &[(&str, serde_json::Value)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn score_all(
    samples: &[Sample],
    method: Method,
    params: &Params,
    f: impl Fn(usize) -> Result<f64>,
) -> Result<Vec<MethodScore>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| MethodScore::new(s.id.clone(), method, params.clone(), f(i)?))
        .collect()
}

/// Scores for one grid value of a method, or `None` when its inputs are missing.
fn method_scores(
    method: Method,
    value: Option<f64>,
    config: &RunConfig,
    eval: &Dataset,
    lls: &Lls,
) -> Result<Option<(Params, Vec<MethodScore>)>> {
    let samples = &eval.samples;
    let u = &lls.uncond;
    let shots = json!(config.shots);
    let out = match method {
        Method::Loss => {
            let p = Params::new();
            Some((p.clone(), score_all(samples, method, &p, |i| loss_score(&u[i]))?))
        }
        Method::Zlib => {
            let p = Params::new();
            Some((
                p.clone(),
                score_all(samples, method, &p, |i| zlib_score(&u[i], &samples[i].text))?,
            ))
        }
        Method::Ref => match &lls.reference {
            Some(r) => {
                let p = Params::new();
                Some((
                    p.clone(),
                    score_all(samples, method, &p, |i| ref_score(&u[i], &r[i]))?,
                ))
            }
            None => None,
        },
        Method::Neighbor => match &lls.neighbors {
            Some(n) => {
                let p = params(&[
                    ("n_neighbors", json!(config.n_neighbors)),
                    ("rate", json!(config.neighbor_rate)),
                ]);
                Some((
                    p.clone(),
                    score_all(samples, method, &p, |i| neighbor_score(&u[i], &n[i]))?,
                ))
            }
            None => None,
        },
        Method::Mink => {
            let k = value.expect("k value");
            let p = params(&[("k", json!(k))]);
            Some((
                p.clone(),
                score_all(samples, method, &p, |i| mink_score(&u[i], k))?,
            ))
        }
        Method::Minkpp if lls.stats => {
            let k = value.expect("k value");
            let p = params(&[("k", json!(k))]);
            Some((
                p.clone(),
                score_all(samples, method, &p, |i| minkpp_score(&u[i], k))?,
            ))
        }
        Method::Minkpp => None,
        Method::Recall => {
            let nm = lls.nonmember.as_ref().expect("nonmember-prefix scores");
            let p = params(&[("shots", shots)]);
            Some((
                p.clone(),
                score_all(samples, method, &p, |i| recall_score(&nm[i], &u[i]))?,
            ))
        }
        Method::Conrecall => {
            let nm = lls.nonmember.as_ref().expect("nonmember-prefix scores");
            let m = lls.member.as_ref().expect("member-prefix scores");
            let g = value.expect("gamma value");
            let p = params(&[("gamma", json!(g)), ("shots", shots)]);
            Some((
                p.clone(),
                score_all(samples, method, &p, |i| conrecall_score(&nm[i], &m[i], &u[i], g))?,
            ))
        }
    };
    Ok(out)
}

fn swept_param(method: Method) -> Option<&'static str> {
    match method {
        Method::Conrecall => Some("gamma"),
        Method::Mink | Method::Minkpp => Some("k"),
        _ => None,
    }
}

fn execute(config: &RunConfig, inputs: &RunInputs<'_>) -> Result<RunOutput> {
    let (pool, eval, transforms) = prepare(config, inputs)?;
    let mut skipped = Vec::new();
    let lls = collect_lls(config, inputs, &pool, &eval, &mut skipped)?;
    let labels: HashMap<String, Label> = eval.samples.iter().map(|s| (s.id.clone(), s.label)).collect();

    let mut results = Vec::new();
    let mut all_scores = Vec::new();
    for &method in &config.methods {
        if skipped.iter().any(|s| s.method == method) {
            continue;
        }
        let grid: Vec<Option<f64>> = match swept_param(method) {
            Some("gamma") => config.gamma_grid.iter().map(|&g| Some(g)).collect(),
            Some(_) => config.k_grid.iter().map(|&k| Some(k)).collect(),
            None => vec![None],
        };
        let mut best: Option<(f64, EvalReport)> = None;
        let mut points = Vec::new();
        let mut missing = false;
        for value in grid {
            let Some((params, scores)) = method_scores(method, value, config, &eval, &lls)? else {
                missing = true;
                break;
            };
            all_scores.extend(scores.iter().cloned());
            let report = evaluate(method, params, scores, &labels, &config.fpr_levels)?;
            if let Some(v) = value {
                points.push(GridPoint {
                    value: v,
                    auc: report.auc,
                    tpr_at_fpr: report.tpr_at_fpr.clone(),
                });
            }
            let v = value.unwrap_or(0.0);
            let better = match &best {
                None => true,
                Some((bv, b)) => report.auc > b.auc || (report.auc == b.auc && v < *bv),
            };
            if better {
                best = Some((v, report));
            }
        }
        if missing {
            skipped.push(Skipped {
                method,
                reason: "required scores unavailable".into(),
            });
            continue;
        }
        let (_, mut report) = best.expect("grid is nonempty");
        if let Some(name) = swept_param(method) {
            report.swept = Some(name.to_string());
            report.grid = points;
        }
        if method == Method::Minkpp && lls.uncond.iter().any(|t| t.stats_approximate) {
            report
                .notes
                .push("distribution statistics approximated from top-k log-probabilities".into());
        }
        results.push(report);
    }

    let pool_ids: HashSet<&str> = pool.source_ids.iter().map(String::as_str).collect();
    if let Some(leak) = all_scores
        .iter()
        .find(|s| pool_ids.contains(s.sample_id.as_str()))
    {
        return Err(Error::PoolLeak(leak.sample_id.clone()));
    }

    let report = RunReport {
        config_hash: config.hash(),
        dataset: eval.name.clone(),
        provider: config.provider.clone(),
        ref_provider: config.ref_provider.clone(),
        shots: config.shots,
        n_eval: eval.samples.len(),
        pool_source_ids: pool.source_ids.clone(),
        results,
        skipped,
    };
    Ok(RunOutput {
        report,
        scores: all_scores,
        transforms,
        pool,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Gamma,
    K,
    Shots,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::K => "k",
            SweepParam::Shots => "shots",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "k" => Ok(SweepParam::K),
            "shots" => Ok(SweepParam::Shots),
            _ => Err(Error::InvalidParameter(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub value: f64,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub config_hash: String,
    pub entries: Vec<SweepEntry>,
    /// Value with the highest AUC per method; ties go to the smaller value.
    pub best: BTreeMap<String, f64>,
}

impl SweepReport {
    /// Rows `(param_value, method, auc, tpr_at_5fpr)`.
    pub fn rows(&self) -> Vec<(f64, Method, f64, f64)> {
        let key = fpr_key(DEFAULT_FPR_LEVEL);
        let mut rows = Vec::new();
        for e in &self.entries {
            for r in &e.report.results {
                rows.push((
                    e.value,
                    r.method,
                    r.auc,
                    r.tpr_at_fpr.get(&key).copied().unwrap_or(f64::NAN),
                ));
            }
        }
        rows
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "param_value,method,auc,tpr_at_5fpr")?;
        for (v, m, auc, tpr) in self.rows() {
            writeln!(out, "{v},{m},{auc},{tpr}")?;
        }
        Ok(())
    }
}

fn sweep_values(param: SweepParam, values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidParameter("no sweep values".into()));
    }
    let mut out: Vec<f64> = Vec::new();
    if param == SweepParam::Gamma && !values.contains(&0.0) {
        out.push(0.0);
    }
    for &v in values {
        let ok = match param {
            SweepParam::Gamma => v >= 0.0 && v.is_finite(),
            SweepParam::K => v > 0.0 && v <= 100.0,
            SweepParam::Shots => v >= 1.0 && v.fract() == 0.0,
        };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "bad {} value {v}",
                param.as_str()
            )));
        }
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn config_for(base: &RunConfig, param: SweepParam, value: f64) -> RunConfig {
    let mut c = base.clone();
    c.out_dir = None;
    match param {
        SweepParam::Gamma => c.gamma_grid = vec![value],
        SweepParam::K => c.k_grid = vec![value],
        SweepParam::Shots => c.shots = value as usize,
    }
    c
}

pub fn sweep(config: &RunConfig, param: SweepParam, values: &[f64]) -> Result<SweepReport> {
    let (dataset, providers, member_shots, lexicon, paraphrases) = load_inputs(config)?;
    sweep_with(
        config,
        RunInputs {
            dataset,
            provider: providers.target.as_ref(),
            reference: providers.reference.as_deref(),
            member_shots,
            lexicon,
            paraphrases,
        },
        param,
        values,
    )
}

/// One evaluation per value, sharing the pool and the LL cache. For a shots
/// sweep the pool is sized for the largest value so that every run scores the
/// same evaluation set. The 5% FPR level is always reported.
pub fn sweep_with(
    config: &RunConfig,
    inputs: RunInputs<'_>,
    param: SweepParam,
    values: &[f64],
) -> Result<SweepReport> {
    let values = sweep_values(param, values)?;
    let mut base = config.clone();
    if !base.fpr_levels.contains(&DEFAULT_FPR_LEVEL) {
        base.fpr_levels.insert(0, DEFAULT_FPR_LEVEL);
    }
    if param == SweepParam::Shots {
        let max = values.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
        let (m, nm) = base.pool_sizes();
        if m > 0 {
            base.member_pool = Some(m.max(max));
        }
        base.nonmember_pool = Some(nm.max(max));
    }
    for &v in &values {
        config_for(&base, param, v).validate()?;
    }

    let cache = open_cache(config)?;
    let target = CachedProvider::new(inputs.provider, &cache);
    let reference = inputs.reference.map(|r| CachedProvider::new(r, &cache));
    let cached = RunInputs {
        provider: &target,
        reference: reference.as_ref().map(|r| r as &dyn Provider),
        ..inputs
    };
    let mut entries = Vec::new();
    for &v in &values {
        let c = config_for(&base, param, v);
        let out = execute(&c, &cached);
        cache.flush()?;
        entries.push(SweepEntry {
            value: v,
            report: out?.report,
        });
    }

    let mut best: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for e in &entries {
        for r in &e.report.results {
            let slot = best.entry(r.method.to_string()).or_insert((e.value, r.auc));
            if r.auc > slot.1 || (r.auc == slot.1 && e.value < slot.0) {
                *slot = (e.value, r.auc);
            }
        }
    }
    let report = SweepReport {
        param,
        config_hash: base.hash(),
        entries,
        best: best.into_iter().map(|(k, (v, _))| (k, v)).collect(),
    };
    if let Some(dir) = &config.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("config.json"), config)?;
        write_json(&dir.join("report.json"), &report)?;
        write_file(&dir.join("grid.csv"), |w| report.write_csv(w))?;
    }
    Ok(report)
}

//! Domain types shared across the toolkit: labeled samples, datasets, prefix
//! pools, per-token scores and stored membership scores.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_SEPARATOR: &str = "\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Member,
    Nonmember,
    Unknown,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Member => "member",
            Label::Nonmember => "nonmember",
            Label::Unknown => "unknown",
        }
    }

    fn from_json(value: &Value) -> Option<Label> {
        match value {
            Value::Number(n) => match n.as_f64() {
                Some(1.0) => Some(Label::Member),
                Some(0.0) => Some(Label::Nonmember),
                _ => None,
            },
            Value::Bool(true) => Some(Label::Member),
            Value::Bool(false) => Some(Label::Nonmember),
            Value::String(s) => match s.to_ascii_lowercase().as_str() {
                "member" | "1" => Some(Label::Member),
                "nonmember" | "non-member" | "non_member" | "0" => Some(Label::Nonmember),
                "unknown" => Some(Label::Unknown),
                _ => None,
            },
            _ => None,
        }
    }

    fn to_json(self) -> Value {
        match self {
            Label::Member => Value::from(1),
            Label::Nonmember => Value::from(0),
            Label::Unknown => Value::from("unknown"),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub label: Label,
}

impl Sample {
    pub fn new(id: impl Into<String>, text: impl Into<String>, label: Label) -> Result<Self> {
        let sample = Sample {
            id: id.into(),
            text: text.into(),
            label,
        };
        sample.validate()?;
        Ok(sample)
    }

    fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidSample {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        if self.text.is_empty() {
            return Err(Error::InvalidSample {
                id: self.id.clone(),
                reason: "empty text".into(),
            });
        }
        Ok(())
    }

    fn to_json(&self) -> Value {
        serde_json::json!({
            "id": self.id,
            "text": self.text,
            "label": self.label.to_json(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DatasetFormat {
    #[default]
    Jsonl,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            samples,
            metadata: BTreeMap::new(),
        })
    }

    pub fn members(&self) -> impl Iterator<Item = &Sample> {
        self.with_label(Label::Member)
    }

    pub fn nonmembers(&self) -> impl Iterator<Item = &Sample> {
        self.with_label(Label::Nonmember)
    }

    pub fn with_label(&self, label: Label) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.label == label)
    }

    pub fn count(&self, label: Label) -> usize {
        self.with_label(label).count()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Errors unless both classes are present.
    pub fn check_evaluable(&self) -> Result<()> {
        if self.count(Label::Member) == 0 || self.count(Label::Nonmember) == 0 {
            return Err(Error::SingleClass);
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&s.to_json().to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a labeled dataset. Ids default to the zero-based line number.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::Jsonl = format;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = parse_dataset_jsonl(&name, BufReader::new(file))?;
    ds.metadata.insert("source".into(), path.display().to_string());
    Ok(ds)
}

pub fn parse_dataset_jsonl<R: BufRead>(name: &str, reader: R) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: lineno + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: lineno + 1,
            message,
        };
        let value: Value = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| parse_err("expected a JSON object".into()))?;
        let id = match obj.get("id") {
            None | Some(Value::Null) => lineno.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(other) => return Err(parse_err(format!("bad id {other}"))),
        };
        let text = obj
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err("missing string field \"text\"".into()))?;
        let label = match obj.get("label") {
            None | Some(Value::Null) => Label::Unknown,
            Some(v) => Label::from_json(v).ok_or_else(|| parse_err(format!("bad label {v}")))?,
        };
        samples.push(Sample::new(id, text, label).map_err(|e| parse_err(e.to_string()))?);
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("dataset {name:?} has no samples")));
    }
    Dataset::new(name, samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixKind {
    Member,
    Nonmember,
}

/// Reserved shot texts used to build conditioning prefixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixPool {
    pub member_shots: Vec<String>,
    pub nonmember_shots: Vec<String>,
    pub separator: String,
    /// Dataset ids the shots were drawn from; these never appear in evaluation.
    #[serde(default)]
    pub source_ids: Vec<String>,
}

impl PrefixPool {
    pub fn new(member_shots: Vec<String>, nonmember_shots: Vec<String>) -> Result<Self> {
        let pool = PrefixPool {
            member_shots,
            nonmember_shots,
            separator: DEFAULT_SEPARATOR.to_string(),
            source_ids: Vec::new(),
        };
        pool.validate()?;
        Ok(pool)
    }

    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.separator = separator.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .member_shots
            .iter()
            .chain(&self.nonmember_shots)
            .any(String::is_empty)
        {
            return Err(Error::InvalidParameter("empty shot text in prefix pool".into()));
        }
        Ok(())
    }

    pub fn shots(&self, kind: PrefixKind) -> &[String] {
        match kind {
            PrefixKind::Member => &self.member_shots,
            PrefixKind::Nonmember => &self.nonmember_shots,
        }
    }
}

/// Joins the first `n_shots` shots of one kind with the pool separator.
pub fn build_prefix(pool: &PrefixPool, kind: PrefixKind, n_shots: usize) -> Result<String> {
    if n_shots == 0 {
        return Err(Error::InvalidParameter("n_shots must be positive".into()));
    }
    let shots = pool.shots(kind);
    if n_shots > shots.len() {
        return Err(Error::InsufficientShots {
            have: shots.len(),
            want: n_shots,
        });
    }
    Ok(shots[..n_shots].join(&pool.separator))
}

/// Draws prefix shots per label class and removes them from the evaluation set.
pub fn split_prefix_pool(
    dataset: &Dataset,
    n_member: usize,
    n_nonmember: usize,
    seed: u64,
) -> Result<(PrefixPool, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |label: Label, n: usize, name: &'static str| -> Result<Vec<&Sample>> {
        let class: Vec<&Sample> = dataset.with_label(label).collect();
        if class.len() < n {
            return Err(Error::InsufficientSamples {
                label: name,
                have: class.len(),
                want: n,
            });
        }
        Ok(index::sample(&mut rng, class.len(), n)
            .into_iter()
            .map(|i| class[i])
            .collect())
    };
    let members = draw(Label::Member, n_member, "member")?;
    let nonmembers = draw(Label::Nonmember, n_nonmember, "nonmember")?;

    let source_ids: Vec<String> = members.iter().chain(&nonmembers).map(|s| s.id.clone()).collect();
    let taken: HashSet<&str> = source_ids.iter().map(String::as_str).collect();
    let pool = PrefixPool {
        member_shots: members.iter().map(|s| s.text.clone()).collect(),
        nonmember_shots: nonmembers.iter().map(|s| s.text.clone()).collect(),
        separator: DEFAULT_SEPARATOR.to_string(),
        source_ids: source_ids.clone(),
    };
    let eval = Dataset {
        name: dataset.name.clone(),
        samples: dataset
            .samples
            .iter()
            .filter(|s| !taken.contains(s.id.as_str()))
            .cloned()
            .collect(),
        metadata: dataset.metadata.clone(),
    };
    Ok((pool, eval))
}

/// Per-token log-probabilities of one text, optionally conditioned on a prefix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub char_offsets: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_std: Option<Vec<f64>>,
    #[serde(default)]
    pub context_id: String,
    /// Set when `dist_mean`/`dist_std` come from a truncated distribution.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stats_approximate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_digest: Option<String>,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    pub fn has_stats(&self) -> bool {
        self.dist_mean.is_some() && self.dist_std.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.logprobs.len();
        let bad = |m: String| Err(Error::InvalidTokenScores(m));
        if self.tokens.len() != n || self.char_offsets.len() != n {
            return bad(format!(
                "length mismatch: {} tokens, {} logprobs, {} offsets",
                self.tokens.len(),
                n,
                self.char_offsets.len()
            ));
        }
        for (name, v) in [("dist_mean", &self.dist_mean), ("dist_std", &self.dist_std)] {
            if let Some(v) = v {
                if v.len() != n {
                    return bad(format!("{name} has {} entries, expected {n}", v.len()));
                }
            }
        }
        if let Some(i) = self.logprobs.iter().position(|&lp| lp > 0.0) {
            return bad(format!("positive logprob at position {i}"));
        }
        if let Some(std) = &self.dist_std {
            if let Some(i) = std.iter().position(|&s| s < 0.0) {
                return bad(format!("negative dist_std at position {i}"));
            }
        }
        for (i, &(start, end)) in self.char_offsets.iter().enumerate() {
            if start > end {
                return bad(format!("inverted span at position {i}"));
            }
            if i > 0 {
                let (prev_start, prev_end) = self.char_offsets[i - 1];
                if start <= prev_start || start < prev_end {
                    return bad(format!("offsets not increasing at position {i}"));
                }
            }
        }
        Ok(())
    }

    pub fn with_digest(mut self, text: &str) -> Self {
        self.text_digest = Some(text_digest(text));
        self
    }
}

/// Short hex SHA-256 of a string, used to key texts and contexts.
pub fn text_digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hex::encode(&hash[..8])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Loss,
    Ref,
    Zlib,
    Neighbor,
    Mink,
    Minkpp,
    Recall,
    Conrecall,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Loss,
        Method::Ref,
        Method::Zlib,
        Method::Neighbor,
        Method::Mink,
        Method::Minkpp,
        Method::Recall,
        Method::Conrecall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Loss => "loss",
            Method::Ref => "ref",
            Method::Zlib => "zlib",
            Method::Neighbor => "neighbor",
            Method::Mink => "mink",
            Method::Minkpp => "minkpp",
            Method::Recall => "recall",
            Method::Conrecall => "conrecall",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "loss" => Method::Loss,
            "ref" | "reference" => Method::Ref,
            "zlib" => Method::Zlib,
            "neighbor" | "neighbour" | "neighborhood" => Method::Neighbor,
            "mink" => Method::Mink,
            "minkpp" | "mink++" => Method::Minkpp,
            "recall" => Method::Recall,
            "conrecall" => Method::Conrecall,
            _ => return Err(Error::InvalidParameter(format!("unknown method {s:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    HigherIsMember,
}

pub type Params = BTreeMap<String, Value>;

/// One method's membership score for one sample. Higher means more member-like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub sample_id: String,
    pub method: Method,
    pub params: Params,
    pub value: f64,
    #[serde(skip)]
    pub orientation: Orientation,
}

impl MethodScore {
    pub fn new(sample_id: impl Into<String>, method: Method, params: Params, value: f64) -> Result<Self> {
        let sample_id = sample_id.into();
        if !value.is_finite() {
            return Err(Error::NonFiniteInput(format!(
                "{method} score for {sample_id:?} is {value}"
            )));
        }
        Ok(MethodScore {
            sample_id,
            method,
            params,
            value,
            orientation: Orientation::HigherIsMember,
        })
    }
}

pub fn write_scores_jsonl<W: Write>(mut out: W, scores: &[MethodScore]) -> std::io::Result<()> {
    for s in scores {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Rounds half away from zero.
pub fn round_half_away(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Whitespace-delimited words with their byte spans.
pub fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Dataset> {
        parse_dataset_jsonl("t", s.as_bytes())
    }

    #[test]
    fn numeric_label_and_line_id() {
        let ds = parse("{\"text\":\"abc\",\"label\":1}\n").unwrap();
        assert_eq!(ds.samples[0].id, "0");
        assert_eq!(ds.samples[0].label, Label::Member);
    }

    #[test]
    fn string_label_alias() {
        let ds = parse("{\"text\":\"abc\",\"label\":\"nonmember\"}\n").unwrap();
        assert_eq!(ds.samples[0].label, Label::Nonmember);
        let ds = parse("{\"text\":\"abc\",\"label\":0}").unwrap();
        assert_eq!(ds.samples[0].label, Label::Nonmember);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err =
            parse("{\"id\":\"a\",\"text\":\"x\",\"label\":1}\n{\"id\":\"a\",\"text\":\"y\",\"label\":0}\n")
                .unwrap_err();
        assert!(matches!(err, Error::DuplicateId(ref id) if id == "a"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("{\"text\":\"x\",\"label\":1}\n{not json}\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_file_rejected() {
        assert!(matches!(parse(""), Err(Error::EmptyInput(_))));
        assert!(matches!(parse("\n\n"), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn empty_text_rejected() {
        assert!(parse("{\"text\":\"\",\"label\":1}").is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let src = "{\"id\":\"a\",\"text\":\"hello world\",\"label\":1}\n{\"id\":\"b\",\"text\":\"bye\",\"label\":\"unknown\"}\n{\"id\":\"c\",\"text\":\"x\",\"label\":0}\n";
        let ds = parse(src).unwrap();
        let again = parse(&ds.to_jsonl()).unwrap();
        assert_eq!(ds.samples, again.samples);
    }

    #[test]
    fn build_prefix_joins_in_order() {
        let pool = PrefixPool::new(vec!["a".into(), "b".into(), "c".into()], vec![]).unwrap();
        assert_eq!(build_prefix(&pool, PrefixKind::Member, 2).unwrap(), "a\nb");
        assert!(build_prefix(&pool, PrefixKind::Member, 0).is_err());
        let pool = PrefixPool::new(vec!["x".into()], vec![]).unwrap();
        assert!(matches!(
            build_prefix(&pool, PrefixKind::Member, 3),
            Err(Error::InsufficientShots { have: 1, want: 3 })
        ));
    }

    #[test]
    fn empty_shot_rejected() {
        assert!(PrefixPool::new(vec!["".into()], vec![]).is_err());
    }

    fn labeled(n_m: usize, n_nm: usize) -> Dataset {
        let mut samples = Vec::new();
        for i in 0..n_m {
            samples.push(Sample::new(format!("m{i}"), format!("member text {i}"), Label::Member).unwrap());
        }
        for i in 0..n_nm {
            samples.push(Sample::new(format!("n{i}"), format!("other text {i}"), Label::Nonmember).unwrap());
        }
        Dataset::new("d", samples).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = labeled(10, 10);
        let (pool, eval) = split_prefix_pool(&ds, 7, 7, 3).unwrap();
        assert_eq!(pool.member_shots.len(), 7);
        assert_eq!(pool.nonmember_shots.len(), 7);
        assert_eq!(eval.count(Label::Member), 3);
        assert_eq!(eval.count(Label::Nonmember), 3);
        let (pool2, eval2) = split_prefix_pool(&ds, 7, 7, 3).unwrap();
        assert_eq!(pool, pool2);
        assert_eq!(eval, eval2);
        for id in &pool.source_ids {
            assert!(eval.get(id).is_none());
        }
    }

    #[test]
    fn split_without_member_shots() {
        let ds = labeled(10, 10);
        let (pool, eval) = split_prefix_pool(&ds, 0, 7, 1).unwrap();
        assert!(pool.member_shots.is_empty());
        assert_eq!(eval.samples.len(), 13);
    }

    #[test]
    fn split_insufficient() {
        let ds = labeled(2, 10);
        assert!(matches!(
            split_prefix_pool(&ds, 3, 1, 0),
            Err(Error::InsufficientSamples { have: 2, want: 3, .. })
        ));
    }

    #[test]
    fn token_scores_validation() {
        let ts = TokenScores {
            tokens: vec!["a".into(), "b".into()],
            logprobs: vec![-1.0, -0.5],
            char_offsets: vec![(0, 1), (2, 3)],
            ..Default::default()
        };
        ts.validate().unwrap();
        let mut bad = ts.clone();
        bad.logprobs[0] = 0.1;
        assert!(bad.validate().is_err());
        let mut bad = ts.clone();
        bad.char_offsets[1] = (0, 1);
        assert!(bad.validate().is_err());
        let mut bad = ts;
        bad.dist_std = Some(vec![0.1]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn method_score_rejects_nan() {
        assert!(MethodScore::new("a", Method::Loss, Params::new(), f64::NAN).is_err());
    }

    #[test]
    fn word_spans_handles_runs_of_whitespace() {
        assert_eq!(word_spans("  ab\t c\n"), vec![(2, 4), (6, 7)]);
        assert!(word_spans("   ").is_empty());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!(
            "Min-K%++".replace('%', "").parse::<Method>().unwrap(),
            Method::Minkpp
        );
    }
}

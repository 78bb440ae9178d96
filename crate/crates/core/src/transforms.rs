//! Text manipulations for robustness runs: random word deletion, lexicon-based
//! synonym substitution and externally supplied paraphrases.
//!
//! A word is a whitespace-delimited token; punctuation stays attached. Counts
//! use `round(rate · words)` with halves rounded away from zero. Outputs are
//! rejoined with single spaces.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{round_half_away, Dataset};

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynonymLexicon {
    entries: BTreeMap<String, Vec<String>>,
    case_sensitive: bool,
}

impl SynonymLexicon {
    pub fn new(entries: BTreeMap<String, Vec<String>>, case_sensitive: bool) -> Result<Self> {
        let fold = |s: &str| {
            if case_sensitive {
                s.to_string()
            } else {
                s.to_lowercase()
            }
        };
        let mut folded = BTreeMap::new();
        for (word, syns) in entries {
            let head = fold(&word);
            if head.is_empty() || syns.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "lexicon entry {word:?} needs a headword and at least one synonym"
                )));
            }
            if syns.iter().any(|s| fold(s) == head || s.is_empty()) {
                return Err(Error::InvalidParameter(format!(
                    "lexicon entry {word:?} lists itself or an empty synonym"
                )));
            }
            folded.entry(head).or_insert_with(Vec::new).extend(syns);
        }
        Ok(SynonymLexicon {
            entries: folded,
            case_sensitive,
        })
    }

    /// Parses `word<TAB>syn1,syn2,…` lines; `#` starts a comment line.
    pub fn parse_tsv(src: &str, case_sensitive: bool) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, line) in src.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, syns) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected word<TAB>synonyms".into(),
            })?;
            let syns: Vec<String> = syns
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            entries.entry(word.trim().to_string()).or_default().extend(syns);
        }
        SynonymLexicon::new(entries, case_sensitive)
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynonymLexicon::parse_tsv(&src, false)
    }

    /// Small English lexicon shipped with the crate.
    pub fn bundled() -> Self {
        SynonymLexicon::parse_tsv(BUNDLED_LEXICON, false).expect("bundled lexicon is valid")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (w, syns) in &self.entries {
            out.push_str(w);
            out.push('\t');
            out.push_str(&syns.join(","));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        let key = if self.case_sensitive {
            std::borrow::Cow::Borrowed(word)
        } else {
            std::borrow::Cow::Owned(word.to_lowercase())
        };
        self.entries.get(key.as_ref()).map(Vec::as_slice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformOp {
    RandomDeletion,
    SynonymSubstitution,
    Paraphrase,
}

/// Per-sample record of what a transform did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub sample_id: String,
    pub op: TransformOp,
    pub rate: f64,
    pub seed: u64,
    pub requested: usize,
    pub applied: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformed {
    pub text: String,
    pub requested: usize,
    pub applied: usize,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "rate must be in (0, 1), got {rate}"
        )));
    }
    Ok(())
}

fn words_of(text: &str) -> Result<Vec<&str>> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::InvalidParameter("text has no words".into()));
    }
    Ok(words)
}

/// Deletes `round(rate · n)` words, capped so at least one word remains.
pub fn random_deletion_detailed(text: &str, rate: f64, seed: u64) -> Result<Transformed> {
    check_rate(rate)?;
    let words = words_of(text)?;
    let n = words.len();
    let requested = round_half_away(rate * n as f64);
    let applied = requested.min(n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drop = vec![false; n];
    for i in index::sample(&mut rng, n, applied) {
        drop[i] = true;
    }
    let kept: Vec<&str> = words
        .iter()
        .zip(&drop)
        .filter(|(_, &d)| !d)
        .map(|(w, _)| *w)
        .collect();
    Ok(Transformed {
        text: kept.join(" "),
        requested,
        applied,
    })
}

pub fn random_deletion(text: &str, rate: f64, seed: u64) -> Result<String> {
    random_deletion_detailed(text, rate, seed).map(|t| t.text)
}

/// Splits leading/trailing ASCII punctuation off a word.
fn split_punct(word: &str) -> (&str, &str, &str) {
    let core_start = word
        .find(|c: char| !c.is_ascii_punctuation())
        .unwrap_or(word.len());
    let core_end = word
        .rfind(|c: char| !c.is_ascii_punctuation())
        .map(|i| i + word[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(core_start);
    let core_end = core_end.max(core_start);
    (
        &word[..core_start],
        &word[core_start..core_end],
        &word[core_end..],
    )
}

fn match_case(original: &str, replacement: &str) -> String {
    let leading_upper = original.chars().next().is_some_and(char::is_uppercase);
    if !leading_upper {
        return replacement.to_string();
    }
    let mut chars = replacement.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Replaces `round(rate · n)` lexicon-covered words with a random synonym.
/// `requested − applied` is the shortfall when too few words are covered.
pub fn synonym_substitution_detailed(
    text: &str,
    rate: f64,
    lexicon: &SynonymLexicon,
    seed: u64,
) -> Result<Transformed> {
    check_rate(rate)?;
    if lexicon.is_empty() {
        return Err(Error::InvalidParameter("lexicon is empty".into()));
    }
    let words = words_of(text)?;
    let requested = round_half_away(rate * words.len() as f64).min(words.len());
    let candidates: Vec<usize> = (0..words.len())
        .filter(|&i| lexicon.synonyms(split_punct(words[i]).1).is_some())
        .collect();
    let applied = requested.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, candidates.len(), applied)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();

    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    for pos in chosen {
        let (pre, core, post) = split_punct(words[pos]);
        let syns = lexicon.synonyms(core).expect("candidate has synonyms");
        let pick = &syns[rng.random_range(0..syns.len())];
        out[pos] = format!("{pre}{}{post}", match_case(core, pick));
    }
    Ok(Transformed {
        text: out.join(" "),
        requested,
        applied,
    })
}

pub fn synonym_substitution(text: &str, rate: f64, lexicon: &SynonymLexicon, seed: u64) -> Result<String> {
    synonym_substitution_detailed(text, rate, lexicon, seed).map(|t| t.text)
}

#[derive(Deserialize)]
struct ParaphraseLine {
    id: serde_json::Value,
    text: String,
}

/// Reads `{"id", "text"}` lines into an id → paraphrase map.
pub fn load_paraphrase_pairs(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ParaphraseLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let id = match rec.id {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        };
        if rec.text.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty paraphrase".into(),
            });
        }
        if map.insert(id.clone(), rec.text).is_some() {
            return Err(Error::DuplicateId(id));
        }
    }
    Ok(map)
}

/// Seed for one sample, derived from the run seed and the sample id.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransformSpec {
    RandomDeletion {
        rate: f64,
        seed: u64,
    },
    SynonymSubstitution {
        rate: f64,
        seed: u64,
        lexicon: SynonymLexicon,
    },
    Paraphrase {
        pairs: BTreeMap<String, String>,
    },
}

impl TransformSpec {
    pub fn op(&self) -> TransformOp {
        match self {
            TransformSpec::RandomDeletion { .. } => TransformOp::RandomDeletion,
            TransformSpec::SynonymSubstitution { .. } => TransformOp::SynonymSubstitution,
            TransformSpec::Paraphrase { .. } => TransformOp::Paraphrase,
        }
    }
}

/// Applies a transform to every sample's text. Ids, labels and order are kept.
pub fn apply_transform(dataset: &Dataset, spec: &TransformSpec) -> Result<(Dataset, Vec<TransformReport>)> {
    if let TransformSpec::Paraphrase { pairs } = spec {
        if let Some(id) = pairs.keys().find(|id| dataset.get(id).is_none()) {
            return Err(Error::UnknownSampleId(id.clone()));
        }
    }
    let mut out = dataset.clone();
    let mut reports = Vec::with_capacity(out.samples.len());
    for sample in &mut out.samples {
        let (t, rate, seed) = match spec {
            TransformSpec::RandomDeletion { rate, seed } => {
                let s = sample_seed(*seed, &sample.id);
                (random_deletion_detailed(&sample.text, *rate, s)?, *rate, *seed)
            }
            TransformSpec::SynonymSubstitution { rate, seed, lexicon } => {
                let s = sample_seed(*seed, &sample.id);
                (
                    synonym_substitution_detailed(&sample.text, *rate, lexicon, s)?,
                    *rate,
                    *seed,
                )
            }
            TransformSpec::Paraphrase { pairs } => {
                let t = match pairs.get(&sample.id) {
                    Some(p) => Transformed {
                        text: p.clone(),
                        requested: 1,
                        applied: 1,
                    },
                    None => Transformed {
                        text: sample.text.clone(),
                        requested: 1,
                        applied: 0,
                    },
                };
                (t, 1.0, 0)
            }
        };
        reports.push(TransformReport {
            sample_id: sample.id.clone(),
            op: spec.op(),
            rate,
            seed,
            requested: t.requested,
            applied: t.applied,
        });
        sample.text = t.text;
    }
    out.metadata
        .insert("transform".into(), format!("{:?}", spec.op()));
    Ok((out, reports))
}

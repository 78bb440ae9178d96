use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Provider, ProviderCapabilities};
use crate::error::{Error, Result};
use crate::types::{text_digest, TokenScores};

/// One line of a trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub context_id: String,
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub char_offsets: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dist_std: Option<Vec<f64>>,
}

impl TraceRecord {
    pub fn from_scores(sample_id: impl Into<String>, ts: &TokenScores) -> Self {
        TraceRecord {
            context_id: ts.context_id.clone(),
            sample_id: sample_id.into(),
            tokens: ts.tokens.clone(),
            logprobs: ts.logprobs.clone(),
            char_offsets: ts.char_offsets.clone(),
            dist_mean: ts.dist_mean.clone(),
            dist_std: ts.dist_std.clone(),
        }
    }

    pub fn into_scores(self) -> TokenScores {
        TokenScores {
            tokens: self.tokens,
            logprobs: self.logprobs,
            char_offsets: self.char_offsets,
            dist_mean: self.dist_mean,
            dist_std: self.dist_std,
            context_id: self.context_id,
            stats_approximate: false,
            text_digest: None,
        }
    }
}

/// Leading metadata record written by trace exporters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub header: bool,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub bos_policy: String,
    #[serde(default)]
    pub separator: String,
}

/// Sidecar line mapping a context id to its text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub context_id: String,
    pub text: String,
}

/// Replays precomputed token scores. Read-only after loading.
#[derive(Debug, Default)]
pub struct TraceProvider {
    uri: String,
    header: Option<TraceHeader>,
    records: HashMap<(String, String), TokenScores>,
    /// context text → context id
    contexts: HashMap<String, String>,
    /// sample text → sample id
    texts: HashMap<String, String>,
    any_stats: bool,
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

/// Sidecar next to a trace file: `<stem>.contexts.jsonl`, else `contexts.jsonl`.
fn sidecar_for(path: &Path) -> Option<PathBuf> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_stem()?.to_string_lossy();
    [
        dir.join(format!("{stem}.contexts.jsonl")),
        dir.join("contexts.jsonl"),
    ]
    .into_iter()
    .find(|p| p.is_file() && p != path)
}

impl TraceProvider {
    /// Opens a trace file, or a directory holding `traces.jsonl` and `contexts.jsonl`.
    pub fn open(path: &Path) -> Result<Self> {
        let (traces, contexts) = if path.is_dir() {
            let ctx = path.join("contexts.jsonl");
            (path.join("traces.jsonl"), ctx.is_file().then_some(ctx))
        } else {
            (path.to_path_buf(), sidecar_for(path))
        };
        let mut provider = TraceProvider {
            uri: format!("trace:{}", path.display()),
            ..TraceProvider::default()
        };
        provider.load_traces(&traces)?;
        if let Some(ctx) = contexts {
            provider.load_contexts(&ctx)?;
        }
        Ok(provider)
    }

    pub fn from_records(
        records: impl IntoIterator<Item = TraceRecord>,
        contexts: impl IntoIterator<Item = ContextRecord>,
    ) -> Result<Self> {
        let mut provider = TraceProvider {
            uri: "trace:memory".into(),
            ..Default::default()
        };
        for (i, r) in records.into_iter().enumerate() {
            provider.insert(i + 1, r)?;
        }
        for c in contexts {
            provider.contexts.insert(c.text, c.context_id);
        }
        Ok(provider)
    }

    fn insert(&mut self, line: usize, record: TraceRecord) -> Result<()> {
        let key = (record.context_id.clone(), record.sample_id.clone());
        let ts = record.into_scores();
        ts.validate().map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        self.any_stats |= ts.has_stats();
        self.records.insert(key, ts);
        Ok(())
    }

    pub fn load_traces(&mut self, path: &Path) -> Result<()> {
        for (line, text) in read_lines(path)? {
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", path.display()),
            })?;
            if value.get("header").and_then(Value::as_bool) == Some(true) {
                self.header = Some(serde_json::from_value(value)?);
                continue;
            }
            let record: TraceRecord = serde_json::from_value(value).map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", path.display()),
            })?;
            self.insert(line, record)?;
        }
        Ok(())
    }

    pub fn load_contexts(&mut self, path: &Path) -> Result<()> {
        for (line, text) in read_lines(path)? {
            let rec: ContextRecord = serde_json::from_str(&text).map_err(|e| Error::Parse {
                line,
                message: format!("{}: {e}", path.display()),
            })?;
            self.contexts.insert(rec.text, rec.context_id);
        }
        Ok(())
    }

    /// Lets `score` find records by sample text.
    pub fn register_texts<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) {
        for (id, text) in pairs {
            self.texts
                .entry(text.to_string())
                .or_insert_with(|| id.to_string());
        }
    }

    pub fn header(&self) -> Option<&TraceHeader> {
        self.header.as_ref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, context_id: &str, sample_id: &str) -> Result<&TokenScores> {
        self.records
            .get(&(context_id.to_string(), sample_id.to_string()))
            .ok_or_else(|| Error::MissingTrace {
                context_id: context_id.to_string(),
                sample: sample_id.to_string(),
            })
    }
}

impl Provider for TraceProvider {
    fn uri(&self) -> &str {
        &self.uri
    }

    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            token_logprobs: true,
            distribution_stats: self.any_stats,
            generation: false,
        }
    }

    fn score(&self, text: &str, context: Option<&str>, with_stats: bool) -> Result<TokenScores> {
        let context_id = match context {
            None => String::new(),
            Some(c) => self
                .contexts
                .get(c)
                .cloned()
                .unwrap_or_else(|| super::context_id(Some(c))),
        };
        // registered sample id first, then the text digest used by run caches
        let digest = text_digest(text);
        let ts = match self.texts.get(text) {
            Some(id) => self
                .lookup(&context_id, id)
                .or_else(|e| self.lookup(&context_id, &digest).map_err(|_| e))?,
            None => self.lookup(&context_id, &digest)?,
        };
        if ts.is_empty() {
            return Err(Error::DegenerateTokenization);
        }
        if with_stats && !ts.has_stats() {
            return Err(Error::Capability("distribution_stats"));
        }
        Ok(ts.clone().with_digest(text))
    }
}

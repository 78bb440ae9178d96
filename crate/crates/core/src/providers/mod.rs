//! Gray-box model access: per-token log-probabilities, optionally conditioned
//! on a prefix, per-position distribution statistics and optional generation.
//!
//! Three backends implement [`Provider`]:
//!
//! * [`TraceProvider`] replays precomputed JSONL traces,
//! * [`HttpProvider`] calls a scoring server,
//! * [`TopicMixtureProvider`] is an exact synthetic model used for testing
//!   and for the built-in benchmark.
//!
//! Providers are selected by URI: `trace:<path>`, `http:<url>`, `synth:<seed>`.

mod http;
mod synthetic;
mod trace;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{text_digest, word_spans, TokenScores};

pub use http::{HttpProvider, TIMEOUT_ENV};
pub use synthetic::{
    synthetic_benchmark, LatentTopicModelSpec, SyntheticBenchmark, SyntheticConfig, TopicMixtureProvider,
};
pub use trace::{ContextRecord, TraceHeader, TraceProvider, TraceRecord};

/// Joins a context and the target text for joint tokenization.
pub const CONTEXT_SEPARATOR: &str = "\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCapabilities {
    pub token_logprobs: bool,
    pub distribution_stats: bool,
    pub generation: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Sample,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "sample" => Ok(Strategy::Sample),
            _ => Err(Error::InvalidParameter(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub strategy: Strategy,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidParameter(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

pub trait Provider: Send + Sync {
    /// Stable identifier, used as a cache key.
    fn uri(&self) -> &str;

    fn capabilities(&self) -> ProviderCapabilities;

    /// `Some(1)` forces callers to serialize requests.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }

    /// Scores the tokens of `text`; context tokens are consumed but not returned.
    fn score(&self, text: &str, context: Option<&str>, with_stats: bool) -> Result<TokenScores>;

    /// Returns only the newly generated continuation.
    fn generate(&self, _request: &GenerationRequest) -> Result<String> {
        Err(Error::Capability("generation"))
    }
}

fn check_text(text: &str) -> Result<()> {
    if text.is_empty() {
        return Err(Error::InvalidParameter("cannot score empty text".into()));
    }
    Ok(())
}

pub fn score_text(provider: &dyn Provider, text: &str, context: Option<&str>) -> Result<TokenScores> {
    check_text(text)?;
    if !provider.capabilities().token_logprobs {
        return Err(Error::Capability("token_logprobs"));
    }
    provider.score(text, context, false)
}

/// Same as [`score_text`] but guarantees `dist_mean`/`dist_std` are populated.
pub fn score_text_with_stats(
    provider: &dyn Provider,
    text: &str,
    context: Option<&str>,
) -> Result<TokenScores> {
    check_text(text)?;
    if !provider.capabilities().distribution_stats {
        return Err(Error::Capability("distribution_stats"));
    }
    let ts = provider.score(text, context, true)?;
    if !ts.has_stats() {
        return Err(Error::Capability("distribution_stats"));
    }
    Ok(ts)
}

/// Per-position mean and standard deviation of the next-token log-probability.
pub fn distribution_stats(
    provider: &dyn Provider,
    text: &str,
    context: Option<&str>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let ts = score_text_with_stats(provider, text, context)?;
    Ok((ts.dist_mean.unwrap_or_default(), ts.dist_std.unwrap_or_default()))
}

pub fn generate(provider: &dyn Provider, request: &GenerationRequest) -> Result<String> {
    request.validate()?;
    if !provider.capabilities().generation {
        return Err(Error::Capability("generation"));
    }
    provider.generate(request)
}

/// Maps `f` over `items`, fanning out no wider than the provider allows.
/// Output order matches input order.
pub fn map_concurrent<T, R, F>(provider: &dyn Provider, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    match provider.max_concurrency() {
        Some(1) => items.iter().map(f).collect(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?
            .install(|| items.par_iter().map(&f).collect()),
        None => items.par_iter().map(f).collect(),
    }
}

/// Identifier for a context string; the empty id means unconditioned.
pub fn context_id(context: Option<&str>) -> String {
    match context {
        None => String::new(),
        Some(c) => format!("ctx-{}", text_digest(c)),
    }
}

/// Joint string `context ⊕ separator ⊕ text` and the byte where `text` starts.
pub fn join_context(context: Option<&str>, separator: &str, text: &str) -> (String, usize) {
    match context {
        None => (text.to_string(), 0),
        Some(c) => {
            let joint = format!("{c}{separator}{text}");
            let start = c.len() + separator.len();
            (joint, start)
        }
    }
}

/// Indices of joint tokens whose span starts at or after `target_start`,
/// with spans rebased onto the target text.
pub fn attribute_target(
    joint_spans: &[(usize, usize)],
    target_start: usize,
) -> Result<(usize, Vec<(usize, usize)>)> {
    let first = joint_spans
        .iter()
        .position(|&(s, _)| s >= target_start)
        .ok_or(Error::DegenerateTokenization)?;
    let spans = joint_spans[first..]
        .iter()
        .map(|&(s, e)| (s - target_start, e - target_start))
        .collect();
    Ok((first, spans))
}

/// Character spans `[start, end)` of tokens.
pub(crate) type Spans = Vec<(usize, usize)>;

/// Whitespace tokenization of the joint string, attributed to the target.
pub(crate) fn whitespace_attribution(
    context: Option<&str>,
    separator: &str,
    text: &str,
) -> Result<(Vec<String>, usize, Spans)> {
    let (joint, start) = join_context(context, separator, text);
    let spans = word_spans(&joint);
    let (first, target_spans) = attribute_target(&spans, start)?;
    let words = spans.iter().map(|&(s, e)| joint[s..e].to_string()).collect();
    Ok((words, first, target_spans))
}

/// `(Σ p·ln p, sqrt(Σ p·(ln p − μ)²))` over a probability vector; zero entries are skipped.
pub fn log_prob_moments<I>(probs: I) -> (f64, f64)
where
    I: IntoIterator<Item = f64> + Clone,
{
    let mean: f64 = probs
        .clone()
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum();
    let var: f64 = probs
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| p * (p.ln() - mean).powi(2))
        .sum();
    (mean, var.max(0.0).sqrt())
}

/// Moments over a truncated top-K distribution with the missing mass lumped
/// into a single tail symbol.
pub fn approximate_moments(top_logprobs: &[f64]) -> (f64, f64) {
    let mut probs: Vec<f64> = top_logprobs.iter().map(|lp| lp.exp()).collect();
    let tail = 1.0 - probs.iter().sum::<f64>();
    if tail > 1e-12 {
        probs.push(tail);
    }
    log_prob_moments(probs.iter().copied())
}

/// Parsed provider URI.
#[derive(Clone, Debug, PartialEq)]
pub enum ProviderUri {
    Trace(PathBuf),
    Http(String),
    Synth(SyntheticConfig),
}

impl ProviderUri {
    pub fn parse(uri: &str) -> Result<Self> {
        let (scheme, rest) = uri
            .split_once(':')
            .ok_or_else(|| Error::ProviderUri(uri.to_string()))?;
        match scheme {
            "trace" if !rest.is_empty() => Ok(ProviderUri::Trace(PathBuf::from(rest))),
            "http" | "https" => {
                // accept both `http:http://host` and `http://host`
                let url = if rest.starts_with("//") {
                    format!("{scheme}:{rest}")
                } else {
                    rest.to_string()
                };
                Ok(ProviderUri::Http(url))
            }
            "synth" => SyntheticConfig::from_uri_body(rest)
                .map(ProviderUri::Synth)
                .map_err(|_| Error::ProviderUri(uri.to_string())),
            _ => Err(Error::ProviderUri(uri.to_string())),
        }
    }
}

/// Opens a provider from its URI. Trace providers resolve sample texts through
/// `registry` (id, text) pairs.
pub fn open_provider(uri: &str, registry: &[(String, String)]) -> Result<Box<dyn Provider>> {
    Ok(match ProviderUri::parse(uri)? {
        ProviderUri::Trace(path) => {
            let mut p = TraceProvider::open(&path)?;
            p.register_texts(registry.iter().map(|(id, t)| (id.as_str(), t.as_str())));
            Box::new(p)
        }
        ProviderUri::Http(url) => Box::new(HttpProvider::from_env(&url)?),
        ProviderUri::Synth(cfg) => Box::new(cfg.target_model()?.with_uri(uri)),
    })
}

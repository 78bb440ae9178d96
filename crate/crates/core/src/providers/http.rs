use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{approximate_moments, GenerationRequest, Provider, ProviderCapabilities};
use crate::error::{Error, Result};
use crate::types::TokenScores;

pub const TIMEOUT_ENV: &str = "MIA_HTTP_TIMEOUT_MS";
const DEFAULT_TIMEOUT_MS: u64 = 30_000;
const MAX_CONCURRENCY: usize = 4;

#[derive(Serialize)]
struct ScoreBody<'a> {
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    context: Option<&'a str>,
    need_distribution_stats: bool,
}

#[derive(Deserialize)]
struct ScoreResponse {
    tokens: Vec<String>,
    logprobs: Vec<f64>,
    char_offsets: Vec<(usize, usize)>,
    #[serde(default)]
    dist_mean: Option<Vec<f64>>,
    #[serde(default)]
    dist_std: Option<Vec<f64>>,
    /// Top-K log-probabilities per position, when full stats are unavailable.
    #[serde(default)]
    top_logprobs: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

/// Client for a scoring server exposing `POST /score` and `POST /generate`.
pub struct HttpProvider {
    uri: String,
    base: String,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(HttpProvider {
            uri: format!("http:{base_url}"),
            base: base_url.trim_end_matches('/').to_string(),
            client,
        })
    }

    /// Reads the timeout from `MIA_HTTP_TIMEOUT_MS`.
    pub fn from_env(base_url: &str) -> Result<Self> {
        let ms = match std::env::var(TIMEOUT_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                Error::InvalidParameter(format!("{TIMEOUT_ENV} must be an integer, got {v:?}"))
            })?,
            Err(_) => DEFAULT_TIMEOUT_MS,
        };
        HttpProvider::new(base_url, Duration::from_millis(ms))
    }

    fn post<B: Serialize, R: for<'de> Deserialize<'de>>(&self, path: &str, body: &B) -> Result<R> {
        let resp = self
            .client
            .post(format!("{}{path}", self.base))
            .json(body)
            .send()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(Error::Transport(format!("{path} returned {status}: {text}")));
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::Transport(format!("{path} returned malformed body: {e}")))
    }
}

impl Provider for HttpProvider {
    fn uri(&self) -> &str {
        &self.uri
    }

    fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            token_logprobs: true,
            distribution_stats: true,
            generation: true,
        }
    }

    fn max_concurrency(&self) -> Option<usize> {
        Some(MAX_CONCURRENCY)
    }

    fn score(&self, text: &str, context: Option<&str>, with_stats: bool) -> Result<TokenScores> {
        let body = ScoreBody {
            text,
            context,
            need_distribution_stats: with_stats,
        };
        let resp: ScoreResponse = self.post("/score", &body)?;
        let mut ts = TokenScores {
            tokens: resp.tokens,
            logprobs: resp.logprobs,
            char_offsets: resp.char_offsets,
            dist_mean: resp.dist_mean,
            dist_std: resp.dist_std,
            context_id: super::context_id(context),
            stats_approximate: false,
            text_digest: None,
        };
        if !ts.has_stats() {
            if let Some(top) = resp.top_logprobs {
                let (means, stds) = top.iter().map(|row| approximate_moments(row)).unzip();
                ts.dist_mean = Some(means);
                ts.dist_std = Some(stds);
                ts.stats_approximate = true;
            }
        }
        if ts.is_empty() {
            return Err(Error::DegenerateTokenization);
        }
        ts.validate()
            .map_err(|e| Error::Transport(format!("/score returned invalid scores: {e}")))?;
        Ok(ts.with_digest(text))
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        let resp: GenerateResponse = self.post("/generate", request)?;
        Ok(resp.text)
    }
}

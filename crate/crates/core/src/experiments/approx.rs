use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{generate, GenerationRequest, Provider, Strategy};
use crate::transforms::sample_seed;
use crate::types::round_half_away;

pub const DEFAULT_CUT_FRACTION: f64 = 0.5;

#[derive(Serialize, Deserialize)]
struct EventLine {
    text: String,
}

/// Reads an events file: JSONL lines of `{"text": …}`.
pub fn load_events(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: EventLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if ev.text.trim().is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty event text".into(),
            });
        }
        out.push(ev.text);
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(path.display().to_string()));
    }
    Ok(out)
}

pub fn write_events<W: Write>(mut out: W, texts: &[String]) -> std::io::Result<()> {
    for t in texts {
        let line = serde_json::to_string(&EventLine { text: t.clone() })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Number of leading words kept when cutting `n` words at `fraction`.
/// At least one word is kept and, when possible, at least one is dropped.
pub fn truncation_len(n: usize, fraction: f64) -> usize {
    round_half_away(fraction * n as f64).clamp(1, n.saturating_sub(1).max(1))
}

/// Truncates each event and lets the provider complete it, producing
/// member-like shots without access to real members.
///
/// `cut_fractions` has one entry per event or a single entry for all.
/// Sampling uses a per-event seed derived from `seed`.
pub fn approximate_members(
    events: &[String],
    cut_fractions: &[f64],
    target_len_tokens: usize,
    provider: &dyn Provider,
    strategy: Strategy,
    seed: u64,
) -> Result<Vec<String>> {
    if events.is_empty() {
        return Err(Error::EmptyInput("events".into()));
    }
    if !provider.capabilities().generation {
        return Err(Error::Capability("generation"));
    }
    if target_len_tokens == 0 {
        return Err(Error::InvalidParameter(
            "target_len_tokens must be at least 1".into(),
        ));
    }
    if cut_fractions.len() != 1 && cut_fractions.len() != events.len() {
        return Err(Error::InvalidParameter(format!(
            "{} cut fractions for {} events",
            cut_fractions.len(),
            events.len()
        )));
    }
    if let Some(f) = cut_fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Error::InvalidParameter(format!(
            "cut fraction must be in (0, 1), got {f}"
        )));
    }
    events
        .iter()
        .enumerate()
        .map(|(i, event)| {
            let words: Vec<&str> = event.split_whitespace().collect();
            if words.is_empty() {
                return Err(Error::InvalidParameter(format!("event {i} has no words")));
            }
            let frac = cut_fractions[if cut_fractions.len() == 1 { 0 } else { i }];
            let prompt = words[..truncation_len(words.len(), frac)].join(" ");
            let request = GenerationRequest {
                prompt: prompt.clone(),
                max_new_tokens: target_len_tokens,
                seed: Some(sample_seed(seed, &i.to_string())),
                strategy,
            };
            let completion = generate(provider, &request)?;
            let completion = completion.trim();
            Ok(if completion.is_empty() {
                prompt
            } else {
                format!("{prompt} {completion}")
            })
        })
        .collect()
}

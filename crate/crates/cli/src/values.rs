//! Numeric list flags: `0.5`, `0.1,0.5,0.9` or `start:stop:step`.

use anyhow::{bail, Context, Result};

const RANGE_TOL: f64 = 1e-9;

/// Rounds away accumulated float noise (0.30000000000000004 → 0.3).
fn clean(x: f64) -> f64 {
    let r = (x * 1e9).round() / 1e9;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn number(s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().with_context(|| format!("not a number: {s:?}"))?;
    if !v.is_finite() {
        bail!("not a finite number: {s:?}");
    }
    Ok(v)
}

/// Parses a comma list or an inclusive `start:stop:step` range.
pub fn parse_values(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let values = match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (number(start)?, number(stop)?, number(step)?);
            if step <= 0.0 {
                bail!("range step must be positive in {spec:?}");
            }
            if stop < start {
                bail!("range stop is below start in {spec:?}");
            }
            let n = ((stop - start) / step + RANGE_TOL).floor() as usize;
            (0..=n).map(|i| clean(start + i as f64 * step)).collect()
        }
        [_] => spec.split(',').map(number).collect::<Result<Vec<_>>>()?,
        _ => bail!("expected a list or start:stop:step, got {spec:?}"),
    };
    if values.is_empty() {
        bail!("empty value list");
    }
    Ok(values)
}

/// Like [`parse_values`], for counts.
pub fn parse_counts(spec: &str) -> Result<Vec<usize>> {
    parse_values(spec)?
        .into_iter()
        .map(|v| {
            if v < 0.0 || v.fract() != 0.0 {
                bail!("expected a non-negative integer, got {v}");
            }
            Ok(v as usize)
        })
        .collect()
}

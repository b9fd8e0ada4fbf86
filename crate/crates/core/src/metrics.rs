//! Attention-quality metrics over captured traces.

use crate::engine::{HeadRecord, Trace};
use crate::error::{Error, Result};
use crate::tensor::{cosine, softmax_row, topk_indices};

/// Cosine between an approximate weight row (zeros where nothing was
/// fetched) and the full-cache weight row.
pub fn attention_cosine(approx: &[f32], full: &[f32]) -> Result<f32> {
    if approx.len() != full.len() {
        return Err(Error::shape(
            "attention_cosine",
            format!("{} vs {}", approx.len(), full.len()),
        ));
    }
    Ok(cosine(approx, full))
}

/// Smallest number of largest weights whose sum reaches `tau`.
pub fn tokens_to_cumulative_mass(weights: &[f32], tau: f32) -> Result<usize> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("tau must be in (0, 1], got {tau}")));
    }
    let mut sorted: Vec<f64> = weights.iter().map(|&w| f64::from(w)).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // Rounding can leave a full row a hair under 1.
    let target = f64::from(tau) - 1e-6;
    let mut acc = 0.0;
    for (i, w) in sorted.iter().enumerate() {
        acc += w;
        if acc >= target {
            return Ok(i + 1);
        }
    }
    Ok(sorted.len())
}

/// `|selected ∩ oracle| / |oracle|`; 1 for an empty oracle.
pub fn recall_at_oracle(selected: &[usize], oracle: &[usize]) -> f32 {
    if oracle.is_empty() {
        return 1.0;
    }
    let hits = oracle.iter().filter(|t| selected.contains(t)).count();
    hits as f32 / oracle.len() as f32
}

/// Full-cache softmax weights of a captured head.
pub fn full_weights(rec: &HeadRecord) -> Result<Vec<f32>> {
    softmax_row(&rec.true_scores)
}

/// Cosine of a captured head against its full-cache weights.
pub fn head_cosine(rec: &HeadRecord) -> Result<f32> {
    attention_cosine(&rec.approx_weights, &full_weights(rec)?)
}

/// Token ids of the true top-`n` among earlier tokens (the current token,
/// last in `true_scores`, is excluded).
pub fn oracle_tokens(rec: &HeadRecord, n: usize) -> Result<Vec<usize>> {
    let past = &rec.true_scores[..rec.true_scores.len().saturating_sub(1)];
    let mut idx = topk_indices(past, n.min(past.len()))?;
    idx.sort_unstable();
    Ok(idx)
}

/// Recall of a captured head's fetched set against the true top-n with the
/// same n.
pub fn head_recall(rec: &HeadRecord) -> Result<f32> {
    let oracle = oracle_tokens(rec, rec.selected.len())?;
    Ok(recall_at_oracle(&rec.selected, &oracle))
}

/// Mean of `f` over the captured heads of each (iteration, layer), indexed
/// `[iteration][layer]`; `None` where nothing was captured.
pub fn per_layer<F>(trace: &Trace, f: F) -> Result<Vec<Vec<Option<f64>>>>
where
    F: Fn(&HeadRecord) -> Result<f32>,
{
    trace
        .iterations
        .iter()
        .map(|it| {
            it.layers
                .iter()
                .map(|l| {
                    if l.heads.is_empty() {
                        return Ok(None);
                    }
                    let mut acc = 0.0f64;
                    for h in &l.heads {
                        acc += f64::from(f(h)?);
                    }
                    Ok(Some(acc / l.heads.len() as f64))
                })
                .collect()
        })
        .collect()
}

/// Mean over layers `from..` of the per-layer means, per iteration.
pub fn per_iteration<F>(trace: &Trace, from_layer: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(&HeadRecord) -> Result<f32>,
{
    Ok(per_layer(trace, f)?
        .into_iter()
        .map(|layers| {
            let vals: Vec<f64> = layers.into_iter().skip(from_layer).flatten().collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect())
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_mass_examples() {
        assert_eq!(tokens_to_cumulative_mass(&[0.5, 0.3, 0.15, 0.05], 0.9).unwrap(), 3);
        assert_eq!(tokens_to_cumulative_mass(&[0.05, 0.15, 0.5, 0.3], 0.9).unwrap(), 3);
        assert_eq!(tokens_to_cumulative_mass(&[0.1; 10], 0.9).unwrap(), 9);
        assert_eq!(tokens_to_cumulative_mass(&[0.0, 1.0, 0.0], 0.9).unwrap(), 1);
        assert!(tokens_to_cumulative_mass(&[1.0], 0.0).is_err());
    }

    #[test]
    fn uniform_rows_need_ceil_fraction() {
        for s in [7usize, 20, 33, 100] {
            let w = vec![1.0 / s as f32; s];
            assert_eq!(
                tokens_to_cumulative_mass(&w, 0.9).unwrap(),
                (0.9 * s as f64).ceil() as usize
            );
        }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_oracle(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(recall_at_oracle(&[4, 5], &[1, 2]), 0.0);
        assert_eq!(recall_at_oracle(&[1, 5], &[1, 2]), 0.5);
    }

    #[test]
    fn cosine_examples() {
        let full = [0.5, 0.3, 0.2];
        assert!((attention_cosine(&full, &full).unwrap() - 1.0).abs() < 1e-6);
        let c = attention_cosine(&[0.0, 0.0, 1.0], &[0.9, 0.1, 0.0]).unwrap();
        assert_eq!(c, 0.0);
        let c = attention_cosine(&[0.0, 0.0, 1.0], &[0.98, 0.0, 0.02]).unwrap();
        assert!(c > 0.0 && c < 0.03);
        assert!(attention_cosine(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn head_recall_excludes_current_token() {
        let rec = HeadRecord {
            selected: vec![0, 2],
            true_scores: vec![5.0, 1.0, 4.0, 9.0],
            ..HeadRecord::default()
        };
        assert_eq!(oracle_tokens(&rec, 2).unwrap(), vec![0, 2]);
        assert_eq!(head_recall(&rec).unwrap(), 1.0);
    }
}

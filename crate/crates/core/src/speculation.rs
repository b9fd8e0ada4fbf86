//! Partial-weight generation at prefill and score speculation at decode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::score_scale;
use crate::pool::RowListener;
use crate::tensor::{dot, topk_indices, vecmat, Matrix};

/// Knobs of the speculative selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeculationConfig {
    /// Fraction of head columns kept in the partial weights, in `(0, 1]`.
    pub partial_ratio: f32,
    /// Score margin below the maximum; positive and finite (use a huge value
    /// to admit every token).
    pub alpha: f32,
    /// Upper bound on the fetched fraction of the cache, in `(0, 1]`.
    pub cap_ratio: f32,
    pub min_select: usize,
}

impl Default for SpeculationConfig {
    fn default() -> Self {
        Self {
            partial_ratio: 0.3,
            alpha: 4.0,
            cap_ratio: 0.2,
            min_select: 1,
        }
    }
}

impl SpeculationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.partial_ratio > 0.0 && self.partial_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "partial_ratio must be in (0, 1], got {}",
                self.partial_ratio
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.cap_ratio > 0.0 && self.cap_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "cap_ratio must be in (0, 1], got {}",
                self.cap_ratio
            )));
        }
        if self.min_select == 0 {
            return Err(Error::invalid("min_select must be at least 1"));
        }
        Ok(())
    }
}

// Ratios arrive as f32, so 0.3 is really 0.30000001; nudge products that are
// within a relative hair of an integer onto it.
const RATIO_SLACK: f64 = 1e-6;

/// `ceil(ratio·d)`, never zero.
pub fn partial_columns(head_dim: usize, ratio: f32) -> usize {
    let exact = f64::from(ratio) * head_dim as f64;
    ((exact * (1.0 - RATIO_SLACK)).ceil() as usize).clamp(1, head_dim.max(1))
}

/// `floor(ratio·s)`.
pub fn fraction_floor(ratio: f32, s: usize) -> usize {
    let exact = f64::from(ratio) * s as f64;
    ((exact * (1.0 + RATIO_SLACK)).floor() as usize).min(s)
}

/// Picks the `ceil(ratio·d)` columns with the largest `Σ_t |q̃| + |k̃|`,
/// returned in ascending order.
pub fn build_partial(qt: &Matrix, kt: &Matrix, ratio: f32) -> Result<Vec<usize>> {
    if qt.shape() != kt.shape() {
        return Err(Error::shape(
            "build_partial",
            format!("queries {:?} vs keys {:?}", qt.shape(), kt.shape()),
        ));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("partial ratio must be in (0, 1], got {ratio}")));
    }
    let d = qt.cols();
    let mut sums = vec![0.0f32; d];
    for (qr, kr) in qt.row_iter().zip(kt.row_iter()) {
        for ((s, q), k) in sums.iter_mut().zip(qr).zip(kr) {
            *s += q.abs() + k.abs();
        }
    }
    let mut idx = topk_indices(&sums, partial_columns(d, ratio))?;
    idx.sort_unstable();
    Ok(idx)
}

/// Partial query weight and partial key cache of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPartial {
    pub column_indices: Vec<usize>,
    /// `D × k`.
    pub partial_w_q: Matrix,
    /// `s × k`, row `j` mirrors pool row `j`.
    pub partial_k: Matrix,
}

impl HeadPartial {
    /// `w_q_head` is the skewed `D × d` query block, `keys` the skewed key
    /// rows already in the pool.
    pub fn new(column_indices: Vec<usize>, w_q_head: &Matrix, keys: &Matrix) -> Result<Self> {
        Ok(Self {
            partial_w_q: w_q_head.select_columns(&column_indices)?,
            partial_k: keys.select_columns(&column_indices)?,
            column_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.partial_k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the selected columns of `key` at `position`: appended when it
    /// equals the current length, overwritten when smaller.
    pub fn append_partial_key(&mut self, position: usize, key: &[f32]) -> Result<()> {
        let d = self.column_indices.iter().max().map_or(0, |m| m + 1);
        if key.len() < d {
            return Err(Error::shape(
                "append_partial_key",
                format!("key of length {} for column {}", key.len(), d - 1),
            ));
        }
        let row: Vec<f32> = self.column_indices.iter().map(|&c| key[c]).collect();
        let len = self.partial_k.rows();
        if position == len {
            self.partial_k.push_row(&row)
        } else if position < len {
            self.partial_k.set_row(position, &row)
        } else {
            Err(Error::PositionMismatch {
                expected: len,
                got: position,
            })
        }
    }

    /// `(x · partial_W_Q) · partial_Kᵀ / √d`.
    pub fn speculate(&self, x_a_prev: &[f32], head_dim: usize) -> Result<Vec<f32>> {
        if self.partial_k.rows() == 0 {
            return Err(Error::invalid("speculation over an empty cache"));
        }
        let q = vecmat(x_a_prev, &self.partial_w_q)?;
        let scale = score_scale(head_dim);
        Ok(self.partial_k.row_iter().map(|k| dot(&q, k) * scale).collect())
    }
}

impl RowListener for HeadPartial {
    fn row_written(&mut self, index: usize, key: &[f32]) -> Result<()> {
        self.append_partial_key(index, key)
    }
}

/// Partial artifacts of one layer, one entry per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPartial {
    pub heads: Vec<HeadPartial>,
}

/// Per-head speculated scores for one layer.
pub fn speculate_scores(x_a_prev: &[f32], layer: &LayerPartial, head_dim: usize) -> Result<Vec<Vec<f32>>> {
    layer.heads.iter().map(|h| h.speculate(x_a_prev, head_dim)).collect()
}

/// Per-head token choice with a shared count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Ascending pool indices per head, each of length `n`.
    pub per_head: Vec<Vec<usize>>,
    pub n: usize,
    pub bytes: u64,
}

/// Shared per-head count: the half-up rounded mean of the per-head counts of
/// scores above `max - alpha`, clamped to `[min_select, floor(cap·s)]`.
pub fn select_count(scores: &[Vec<f32>], cfg: &SpeculationConfig) -> usize {
    let s = scores.first().map_or(0, Vec::len);
    if s == 0 {
        return 0;
    }
    let total: usize = scores
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let threshold = max - cfg.alpha;
            row.iter().filter(|&&x| x > threshold).count()
        })
        .sum();
    let n = (2 * total + scores.len()) / (2 * scores.len());
    let upper = fraction_floor(cfg.cap_ratio, s).max(cfg.min_select.min(s));
    n.clamp(cfg.min_select.min(upper), upper).min(s)
}

/// Chooses each head's own top-`n` tokens, `n` from [`select_count`].
pub fn select_tokens(
    scores: &[Vec<f32>],
    cfg: &SpeculationConfig,
    head_dim: usize,
    bytes_per_element: u64,
) -> Result<Selection> {
    if scores.is_empty() || scores[0].is_empty() {
        return Err(Error::invalid("selection over empty scores"));
    }
    let s = scores[0].len();
    if scores.iter().any(|r| r.len() != s) {
        return Err(Error::shape("select_tokens", "heads disagree on cache length"));
    }
    let n = select_count(scores, cfg);
    let per_head = scores
        .iter()
        .map(|row| {
            let mut idx = topk_indices(row, n)?;
            idx.sort_unstable();
            Ok(idx)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Selection {
        bytes: (scores.len() * n * 2 * head_dim) as u64 * bytes_per_element,
        per_head,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(alpha: f32, cap: f32) -> SpeculationConfig {
        SpeculationConfig {
            alpha,
            cap_ratio: cap,
            ..SpeculationConfig::default()
        }
    }

    #[test]
    fn column_counts() {
        assert_eq!(partial_columns(10, 0.3), 3);
        assert_eq!(partial_columns(16, 0.3), 5);
        assert_eq!(partial_columns(10, 1.0), 10);
        assert_eq!(partial_columns(10, 0.01), 1);
        assert_eq!(partial_columns(128, 0.5), 64);
        assert_eq!(fraction_floor(0.2, 100), 20);
        assert_eq!(fraction_floor(0.7, 10), 7);
        assert_eq!(fraction_floor(0.2, 2048), 409);
    }

    #[test]
    fn partial_columns_follow_abs_mass() {
        let q = Matrix::from_rows(&[vec![0.1, -5.0, 0.2, 3.0], vec![0.0, 4.0, -0.1, -2.0]]).unwrap();
        let k = q.clone();
        let mut neg = q.clone();
        neg.scale(-1.0);
        assert_eq!(build_partial(&q, &k, 0.5).unwrap(), vec![1, 3]);
        // Opposite signs do not cancel.
        assert_eq!(build_partial(&q, &neg, 0.5).unwrap(), vec![1, 3]);
        assert_eq!(build_partial(&q, &k, 1.0).unwrap(), vec![0, 1, 2, 3]);
        assert!(build_partial(&q, &Matrix::zeros(3, 4), 0.5).is_err());
    }

    #[test]
    fn threshold_rule_single_head() {
        let sel = select_tokens(&[vec![10.0, 7.0, 5.9, 3.0]], &cfg(4.0, 1.0), 2, 2).unwrap();
        assert_eq!(sel.n, 2);
        assert_eq!(sel.per_head, vec![vec![0, 1]]);
        assert_eq!(sel.bytes, 2 * 2 * 2 * 2);
    }

    #[test]
    fn counts_are_averaged_across_heads() {
        let scores = vec![vec![9.0, 8.0, 0.0, 0.0, 0.0], vec![9.0, 8.0, 7.0, 6.0, 0.0]];
        let sel = select_tokens(&scores, &cfg(4.0, 1.0), 4, 2).unwrap();
        assert_eq!(sel.n, 3);
        assert_eq!(sel.per_head, vec![vec![0, 1, 2], vec![0, 1, 2]]);
    }

    #[test]
    fn cap_limits_count() {
        let scores = vec![vec![1.0; 100]];
        assert_eq!(select_count(&scores, &cfg(f32::INFINITY, 0.2)), 20);
        assert_eq!(select_count(&scores, &cfg(1e30, 0.2)), 20);
    }

    #[test]
    fn min_select_wins_over_tiny_cap() {
        let mut c = cfg(0.1, 0.2);
        c.min_select = 2;
        assert_eq!(select_count(&[vec![5.0, 0.0, 0.0]], &c), 2);
        assert_eq!(select_count(&[vec![5.0]], &c), 1);
    }

    #[test]
    fn heads_pick_their_own_tokens() {
        let scores = vec![vec![0.0, 9.0, 1.0], vec![9.0, 0.0, 1.0]];
        let sel = select_tokens(&scores, &cfg(1.0, 1.0), 1, 2).unwrap();
        assert_eq!(sel.per_head, vec![vec![1], vec![0]]);
    }

    #[test]
    fn partial_key_positions() {
        let w = Matrix::identity(3);
        let keys = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let mut hp = HeadPartial::new(vec![0, 2], &w, &keys).unwrap();
        hp.append_partial_key(1, &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(hp.len(), 2);
        assert_eq!(hp.partial_k.row(1), &[4.0, 6.0]);
        hp.append_partial_key(0, &[7.0, 8.0, 9.0]).unwrap();
        assert_eq!(hp.partial_k.row(0), &[7.0, 9.0]);
        assert_eq!(hp.partial_k.row(1), &[4.0, 6.0]);
        assert!(matches!(
            hp.append_partial_key(5, &[0.0; 3]),
            Err(Error::PositionMismatch { expected: 2, got: 5 })
        ));
    }

    #[test]
    fn speculation_single_row_and_empty() {
        let w = Matrix::identity(2);
        let keys = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let hp = HeadPartial::new(vec![0, 1], &w, &keys).unwrap();
        assert_eq!(hp.speculate(&[2.0, 3.0], 4).unwrap(), vec![1.0]);
        let empty = HeadPartial::new(vec![0], &w, &Matrix::empty(2)).unwrap();
        assert!(empty.speculate(&[1.0, 1.0], 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SpeculationConfig::default().validate().is_ok());
        assert!(cfg(0.0, 0.2).validate().is_err());
        assert!(cfg(f32::NAN, 0.2).validate().is_err());
        assert!(cfg(f32::INFINITY, 0.2).validate().is_err());
        assert!(cfg(1e30, 0.2).validate().is_ok());
        assert!(cfg(4.0, 1.5).validate().is_err());
    }

    proptest! {
        #[test]
        fn selection_sizes(
            heads in 1usize..5,
            s in 1usize..60,
            alpha in 0.1f32..20.0,
            cap in 0.05f32..1.0,
            min_select in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<Vec<f32>> = (0..heads)
                .map(|_| (0..s).map(|_| rng.random_range(-10.0f32..10.0)).collect())
                .collect();
            let c = SpeculationConfig { partial_ratio: 0.3, alpha, cap_ratio: cap, min_select };
            let sel = select_tokens(&scores, &c, 8, 2).unwrap();
            prop_assert!(sel.per_head.iter().all(|h| h.len() == sel.n));
            prop_assert!(sel.n <= s);
            prop_assert!(sel.n <= fraction_floor(cap, s).max(min_select.min(s)));
            if s >= min_select {
                prop_assert!(sel.n >= min_select);
            }
            if fraction_floor(cap, s) >= min_select {
                prop_assert!(sel.n <= fraction_floor(cap, s));
            }
            for h in &sel.per_head {
                prop_assert!(h.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}

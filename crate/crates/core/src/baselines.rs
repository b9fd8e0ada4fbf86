//! Comparison schemes: heavy-hitter eviction, 4-bit group quantization, and
//! oracle top-n selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::topk_indices;

pub const QUANT_GROUP: usize = 64;
const QUANT_LEVELS: f32 = 15.0;

/// Fixed-budget heavy-hitter state of one head.
///
/// `retained` holds pool indices in arrival order; `accumulated[i]` is the
/// running sum of attention weight received by `retained[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2oState {
    pub retained: Vec<usize>,
    pub accumulated: Vec<f32>,
    pub budget: usize,
    pub recent_window: usize,
    pub evicted: Vec<usize>,
}

impl H2oState {
    /// Recent window defaults to half the budget.
    pub fn new(budget: usize) -> Result<Self> {
        Self::with_window(budget, budget / 2)
    }

    pub fn with_window(budget: usize, recent_window: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::invalid("h2o budget must be at least 1"));
        }
        if recent_window > budget {
            return Err(Error::invalid("recent window larger than budget"));
        }
        Ok(Self {
            retained: Vec::new(),
            accumulated: Vec::new(),
            budget,
            recent_window,
            evicted: Vec::new(),
        })
    }

    /// Starts from prompt tokens `0..scores.len()` with their accumulated
    /// prefill weight, then evicts down to the budget.
    pub fn seed(&mut self, scores: &[f32]) -> Vec<usize> {
        self.retained = (0..scores.len()).collect();
        self.accumulated = scores.to_vec();
        let mut out = Vec::new();
        while self.retained.len() > self.budget {
            out.push(self.evict_one());
        }
        out
    }

    /// Adds one decode step's weights (aligned with `retained` followed by
    /// `token`), admits `token`, and evicts if over budget.
    pub fn step(&mut self, token: usize, weights: &[f32]) -> Result<Option<usize>> {
        if weights.len() != self.retained.len() + 1 {
            return Err(Error::shape(
                "h2o_step",
                format!(
                    "{} weights for {} retained tokens plus the new one",
                    weights.len(),
                    self.retained.len()
                ),
            ));
        }
        for (a, w) in self.accumulated.iter_mut().zip(weights) {
            *a += w;
        }
        self.retained.push(token);
        self.accumulated.push(weights[weights.len() - 1]);
        if self.retained.len() > self.budget {
            Ok(Some(self.evict_one()))
        } else {
            Ok(None)
        }
    }

    fn evict_one(&mut self) -> usize {
        let protected = self.recent_window.min(self.retained.len() - 1);
        let candidates = self.retained.len() - protected;
        let mut victim = 0;
        for i in 1..candidates {
            if self.accumulated[i] < self.accumulated[victim] {
                victim = i;
            }
        }
        self.accumulated.remove(victim);
        let token = self.retained.remove(victim);
        self.evicted.push(token);
        token
    }
}

/// `floor(frac·n)`, at least 1.
pub fn h2o_budget(frac: f32, n: usize) -> usize {
    crate::speculation::fraction_floor(frac, n).max(1)
}

/// One group of 4-bit codes with its affine parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGroup {
    pub codes: Vec<u8>,
    pub scale: f32,
    pub zero: f32,
}

pub fn quantize_group(x: &[f32]) -> QuantGroup {
    let min = x.iter().copied().fold(f32::INFINITY, f32::min);
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if x.is_empty() || max <= min {
        return QuantGroup {
            codes: vec![0; x.len()],
            scale: 0.0,
            zero: if x.is_empty() { 0.0 } else { min },
        };
    }
    let scale = (max - min) / QUANT_LEVELS;
    let codes = x
        .iter()
        .map(|v| ((v - min) / scale).round().clamp(0.0, QUANT_LEVELS) as u8)
        .collect();
    QuantGroup {
        codes,
        scale,
        zero: min,
    }
}

pub fn dequantize_group(g: &QuantGroup) -> Vec<f32> {
    g.codes.iter().map(|&c| f32::from(c) * g.scale + g.zero).collect()
}

/// Quantizes then dequantizes a row group by group.
pub fn quant_round_trip(row: &[f32]) -> Vec<f32> {
    row.chunks(QUANT_GROUP)
        .flat_map(|c| dequantize_group(&quantize_group(c)))
        .collect()
}

/// Stored size of `elements` values: packed nibbles plus an f32 scale and
/// zero per group.
pub fn quant_bytes(elements: usize) -> u64 {
    (elements.div_ceil(2) + 8 * elements.div_ceil(QUANT_GROUP)) as u64
}

/// Each head's own top-`n` indices, ascending.
pub fn oracle_select(true_scores: &[Vec<f32>], n: usize) -> Result<Vec<Vec<usize>>> {
    true_scores
        .iter()
        .map(|row| {
            let mut idx = topk_indices(row, n)?;
            idx.sort_unstable();
            Ok(idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn h2o_evicts_lowest_non_recent() {
        let mut st = H2oState::with_window(2, 1).unwrap();
        st.retained = vec![0, 1];
        st.accumulated = vec![0.9, 0.1];
        assert_eq!(st.step(2, &[0.0, 0.0, 1.0]).unwrap(), Some(1));
        assert_eq!(st.retained, vec![0, 2]);
        assert!(st.step(3, &[0.5]).is_err());
    }

    #[test]
    fn h2o_large_budget_keeps_everything() {
        let mut st = H2oState::new(100).unwrap();
        assert!(st.seed(&[0.3, 0.2, 0.1]).is_empty());
        for t in 3..20 {
            let w = vec![1.0 / (t + 1) as f32; t + 1];
            assert_eq!(st.step(t, &w).unwrap(), None);
        }
        assert_eq!(st.retained, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn h2o_budget_fraction() {
        assert_eq!(h2o_budget(0.2, 2048), 409);
        let mut st = H2oState::new(h2o_budget(0.2, 2048)).unwrap();
        let scores: Vec<f32> = (0..2048).map(|i| (i % 17) as f32).collect();
        st.seed(&scores);
        assert_eq!(st.retained.len(), 409);
    }

    #[test]
    fn h2o_seed_keeps_recent_and_heavy() {
        let mut st = H2oState::with_window(4, 2).unwrap();
        let gone = st.seed(&[5.0, 0.1, 3.0, 0.2, 0.0, 0.0]);
        assert_eq!(st.retained, vec![0, 2, 4, 5]);
        assert_eq!(gone, vec![1, 3]);
    }

    #[test]
    fn lattice_and_constant_groups_are_exact() {
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(dequantize_group(&quantize_group(&x)), x);
        let c = vec![2.5f32; 64];
        let g = quantize_group(&c);
        assert_eq!(g.scale, 0.0);
        assert_eq!(dequantize_group(&g), c);
    }

    #[test]
    fn quant_byte_accounting() {
        assert_eq!(quant_bytes(64), 32 + 8);
        assert_eq!(quant_bytes(65), 33 + 16);
        assert_eq!(quant_bytes(1), 1 + 8);
        assert_eq!(quant_bytes(0), 0);
    }

    #[test]
    fn oracle_examples() {
        let s = vec![vec![0.1, 5.0, 0.3]];
        assert_eq!(oracle_select(&s, 3).unwrap(), vec![vec![0, 1, 2]]);
        assert_eq!(oracle_select(&s, 1).unwrap(), vec![vec![1]]);
        assert!(oracle_select(&s, 4).is_err());
    }

    proptest! {
        #[test]
        fn quant_error_within_half_step(x in prop::collection::vec(-50.0f32..50.0, 1..64)) {
            let g = quantize_group(&x);
            prop_assert!(g.codes.iter().all(|&c| c <= 15));
            let back = dequantize_group(&g);
            let slack = g.scale * 1e-4 + 1e-5;
            for (a, b) in x.iter().zip(&back) {
                prop_assert!((a - b).abs() <= g.scale / 2.0 + slack);
            }
        }

        #[test]
        fn h2o_evictions_are_permanent(
            budget in 1usize..8,
            steps in 1usize..40,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut st = H2oState::new(budget).unwrap();
            let prompt: Vec<f32> = (0..10).map(|_| rng.random::<f32>()).collect();
            st.seed(&prompt);
            let mut gone = st.evicted.clone();
            for t in 10..10 + steps {
                let w: Vec<f32> = (0..=st.retained.len()).map(|_| rng.random::<f32>()).collect();
                st.step(t, &w).unwrap();
                prop_assert!(st.retained.len() <= budget);
                prop_assert!(st.evicted.starts_with(&gone));
                for e in &st.evicted {
                    prop_assert!(!st.retained.contains(e));
                }
                gone = st.evicted.clone();
            }
        }
    }
}

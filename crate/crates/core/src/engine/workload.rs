//! Input generators for prefill and decode.
//!
//! The shifting workload plants two key directions in the prompt: a few
//! leading "anchor" tokens that decode queries always favor, and one
//! mid-prompt "target" token that decode queries avoid for the first
//! `switch_at` iterations and then strongly prefer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;
use crate::tensor::{layernorm, vecmat, Matrix};

pub const ANCHOR_TOKENS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftingParams {
    /// Iteration from which decode queries favor the target token.
    pub switch_at: usize,
    /// Weight of the anchor query direction in every decode input.
    pub anchor: f32,
    /// Weight of the target query direction after the switch; before it the
    /// weight is `-target / 2`.
    pub target: f32,
    /// Weight of the per-step random component.
    pub drift: f32,
    /// Noise mixed into planted prompt rows.
    pub plant_noise: f32,
}

impl Default for ShiftingParams {
    fn default() -> Self {
        Self {
            switch_at: 8,
            anchor: 1.0,
            target: 3.0,
            drift: 1.0,
            plant_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Workload {
    /// Random prompt; each decode input is the previous output.
    #[default]
    Autoregressive,
    Shifting(ShiftingParams),
}

/// Position of the planted target token in a prompt of `n` tokens.
pub fn target_position(n: usize) -> usize {
    (n * 3 / 5).min(n.saturating_sub(1))
}

/// Inputs for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceInputs {
    pub prompt: Matrix,
    /// Present for workloads that do not feed outputs back.
    pub decode: Option<Matrix>,
}

fn stream_seed(seed: u64, sequence: usize) -> u64 {
    seed ^ (sequence as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn unit(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() as f32;
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    unit(Matrix::random_normal(1, d, 1.0, rng).into_data())
}

fn axpy(acc: &mut [f32], a: f32, x: &[f32]) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}

/// Unit direction for decode inputs whose queries score high against the
/// key of a token with input `u`, summed over layers.
///
/// For a layer with gain `g` the score is `(ŷ⊙g)·W_Q·kᵀ` up to bias terms,
/// so the best `ŷ` is proportional to `(W_Q·kᵀ) ⊘ g`.
pub fn query_direction(model: &Model, u: &[f32]) -> Result<Vec<f32>> {
    let d = model.spec.model_dim;
    let mut acc = vec![0.0f32; d];
    for layer in &model.layers {
        let x_a = layernorm(u, &layer.ln1_gain, &layer.ln1_bias, model.spec.ln_eps)?;
        let k = vecmat(&x_a, &layer.w_k)?;
        let r: Vec<f32> = (0..d)
            .map(|i| {
                let row = layer.w_q.row(i);
                row.iter().zip(&k).map(|(a, b)| a * b).sum::<f32>() / layer.ln1_gain[i]
            })
            .collect();
        axpy(&mut acc, 1.0, &unit(r));
    }
    Ok(unit(acc))
}

fn scaled(v: Vec<f32>) -> Vec<f32> {
    let s = (v.len() as f32).sqrt();
    unit(v).into_iter().map(|x| x * s).collect()
}

pub fn generate(
    model: &Model,
    workload: &Workload,
    n: usize,
    t: usize,
    seed: u64,
    sequence: usize,
) -> Result<SequenceInputs> {
    let d = model.spec.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, sequence));
    let mut prompt = Matrix::random_normal(n, d, 1.0, &mut rng);
    let params = match workload {
        Workload::Autoregressive => return Ok(SequenceInputs { prompt, decode: None }),
        Workload::Shifting(p) => *p,
    };

    let anchor_dir = random_unit(d, &mut rng);
    let target_dir = random_unit(d, &mut rng);
    let plant = |dir: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> {
        let mut row = dir.to_vec();
        axpy(&mut row, params.plant_noise, &random_unit(d, rng));
        scaled(row)
    };
    for r in 0..ANCHOR_TOKENS.min(n) {
        prompt.set_row(r, &plant(&anchor_dir, &mut rng))?;
    }
    if n > ANCHOR_TOKENS {
        let p = target_position(n);
        prompt.set_row(p, &plant(&target_dir, &mut rng))?;
    }

    let qa = query_direction(model, &scaled(anchor_dir))?;
    let qt = query_direction(model, &scaled(target_dir))?;
    let mut decode = Matrix::zeros(t, d);
    for i in 0..t {
        let mut y = random_unit(d, &mut rng);
        y.iter_mut().for_each(|x| *x *= params.drift);
        axpy(&mut y, params.anchor, &qa);
        let c = if i < params.switch_at {
            -params.target / 2.0
        } else {
            params.target
        };
        axpy(&mut y, c, &qt);
        decode.set_row(i, &scaled(y))?;
    }
    Ok(SequenceInputs {
        prompt,
        decode: Some(decode),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn generation_is_seeded() {
        let m = Model::generate_synthetic(&ModelSpec::new(2, 16, 2).with_ffn_dim(32)).unwrap();
        let w = Workload::Shifting(ShiftingParams::default());
        let a = generate(&m, &w, 20, 5, 3, 0).unwrap();
        let b = generate(&m, &w, 20, 5, 3, 0).unwrap();
        let c = generate(&m, &w, 20, 5, 3, 1).unwrap();
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.decode, b.decode);
        assert_ne!(a.prompt, c.prompt);
        assert_eq!(a.decode.unwrap().shape(), (5, 16));
        assert!(generate(&m, &Workload::Autoregressive, 20, 5, 3, 0)
            .unwrap()
            .decode
            .is_none());
    }

    #[test]
    fn target_sits_mid_prompt() {
        assert_eq!(target_position(256), 153);
        assert_eq!(target_position(1), 0);
    }
}

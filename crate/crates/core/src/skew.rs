//! Offline query/key skewing.
//!
//! Each head's query slice from a calibration pass is decomposed as
//! `Q = UΣVᵀ`; setting `A = V` and replacing `W_Q ← W_Q·A`, `W_K ← W_K·A`
//! leaves every `QKᵀ` unchanged while `Q·A = UΣ` has column norms equal to
//! the singular values, so most of the energy sits in a few columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{random_prompt, Model, ModelSpec};
use crate::tensor::{complete_orthonormal, matmul, svd, Matrix};

/// Skew matrix and calibration spectrum for one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSkew {
    /// `d × d`, orthogonal.
    pub a: Matrix,
    /// Length `d`, descending. Zero-padded when the calibration input had
    /// fewer than `d` rows.
    pub sigma: Vec<f32>,
}

/// Per layer, per head skew matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewSet {
    pub layers: Vec<Vec<HeadSkew>>,
}

impl SkewSet {
    /// All-identity skew set, mostly useful in tests.
    pub fn identity(spec: &ModelSpec) -> Self {
        let head = HeadSkew {
            a: Matrix::identity(spec.head_dim),
            sigma: vec![1.0; spec.head_dim],
        };
        Self {
            layers: vec![vec![head; spec.heads]; spec.layers],
        }
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadSkew {
        &self.layers[layer][head]
    }

    /// Checks shapes, orthogonality of every `A` within 1e-4, and the order of
    /// each spectrum.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.layers.len() != spec.layers || self.layers.iter().any(|l| l.len() != spec.heads) {
            return Err(Error::Validation("skew set does not match layer/head count".into()));
        }
        let d = spec.head_dim;
        for (l, heads) in self.layers.iter().enumerate() {
            for (h, hs) in heads.iter().enumerate() {
                if hs.a.shape() != (d, d) || hs.sigma.len() != d {
                    return Err(Error::Validation(format!("skew {l}.{h} has wrong shape")));
                }
                let err = matmul(&hs.a.transpose(), &hs.a)?.max_abs_diff(&Matrix::identity(d));
                if !(err <= 1e-4) {
                    return Err(Error::Validation(format!(
                        "skew {l}.{h} is not orthogonal (error {err:e})"
                    )));
                }
                if hs.sigma.iter().any(|s| !(*s >= 0.0)) || hs.sigma.windows(2).any(|w| w[0] < w[1]) {
                    return Err(Error::Validation(format!(
                        "skew {l}.{h} spectrum is not descending and nonnegative"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of calibration tokens used by [`calibration_prompt`].
pub fn calibration_len(spec: &ModelSpec) -> usize {
    4 * spec.head_dim
}

/// Seeded random prompt of `4·d` tokens.
pub fn calibration_prompt(spec: &ModelSpec, seed: u64) -> Matrix {
    random_prompt(calibration_len(spec), spec.model_dim, seed)
}

/// Runs `sample_input` through the unskewed model and decomposes every
/// head's query slice.
pub fn calibrate_skew(model: &Model, sample_input: &Matrix) -> Result<SkewSet> {
    if model.is_skewed() {
        return Err(Error::AlreadySkewed);
    }
    if sample_input.rows() < 2 {
        return Err(Error::invalid("calibration needs at least 2 tokens"));
    }
    let spec = &model.spec;
    let d = spec.head_dim;
    let blocks = model.forward_detailed(sample_input)?;
    let mut layers = Vec::with_capacity(spec.layers);
    for block in &blocks {
        let mut heads = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let q = block.q.column_block(h * d, d);
            let dec = svd(&q)?;
            let a = if dec.v.cols() < d {
                complete_orthonormal(&dec.v)
            } else {
                dec.v
            };
            let mut sigma = dec.sigma;
            sigma.resize(d, 0.0);
            heads.push(HeadSkew { a, sigma });
        }
        layers.push(heads);
    }
    Ok(SkewSet { layers })
}

/// Folds `skews` into the query and key weights of a copy of `model`.
pub fn apply_skew(model: &Model, skews: &SkewSet) -> Result<Model> {
    if model.is_skewed() {
        return Err(Error::AlreadySkewed);
    }
    skews.validate(&model.spec)?;
    let d = model.spec.head_dim;
    let mut out = model.clone();
    for (layer, heads) in out.layers.iter_mut().zip(&skews.layers) {
        for (h, hs) in heads.iter().enumerate() {
            let q = matmul(&layer.w_q.column_block(h * d, d), &hs.a)?;
            layer.w_q.set_column_block(h * d, &q)?;
            let k = matmul(&layer.w_k.column_block(h * d, d), &hs.a)?;
            layer.w_k.set_column_block(h * d, &k)?;
        }
    }
    out.skew = Some(skews.clone());
    Ok(out)
}

/// Calibrates on a seeded prompt and applies the result.
pub fn skew_model(model: &Model, calib_seed: u64) -> Result<Model> {
    let prompt = calibration_prompt(&model.spec, calib_seed);
    let skews = calibrate_skew(model, &prompt)?;
    apply_skew(model, &skews)
}

/// Fraction of squared Frobenius mass captured by the leading `k` singular
/// values.
pub fn energy_fraction(sigma: &[f32], k: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| f64::from(*s).powi(2)).sum();
    if total == 0.0 {
        return 0.0;
    }
    let top: f64 = sigma.iter().take(k).map(|s| f64::from(*s).powi(2)).sum();
    top / total
}

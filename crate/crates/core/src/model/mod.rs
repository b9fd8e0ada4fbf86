//! Pre-norm transformer decoder blocks operating on continuous inputs.
//!
//! A block computes
//! `out = x + Attn(LN1(x)) + FFN(LN2(x + Attn(LN1(x))))`
//! with per-head scaled dot-product attention and a ReLU feed-forward layer.
//! There is no embedding or unembedding; callers feed `N×D` matrices.

mod io;

pub use io::{load_model, save_model, ManifestTensor, ModelManifest};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skew::SkewSet;
use crate::tensor::{self, dot, layernorm, matmul, softmax_row, vecmat, Matrix};

/// Layer-0 FFN write strength into the outlier channels, per unit of
/// `outlier_scale - 1`. Outliers in the residual stream appear after the
/// first block and persist through the rest of the stack.
pub const OUTLIER_EMERGENCE: f32 = 2.0;

/// Smallest swept outlier scale at which consecutive block inputs of the
/// reference shape (4 layers, D = 64) are clearly more alike than without
/// outliers.
pub const CALIBRATED_OUTLIER_SCALE: f32 = 5.0;

/// Shape and generation parameters of a synthetic model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub ln_eps: f32,
    pub outlier_channels: usize,
    pub outlier_scale: f32,
    pub seed: u64,
}

impl ModelSpec {
    /// Spec with `head_dim = model_dim / heads` and common defaults.
    pub fn new(layers: usize, model_dim: usize, heads: usize) -> Self {
        Self {
            layers,
            model_dim,
            heads,
            head_dim: model_dim.checked_div(heads).unwrap_or(0),
            ffn_dim: 4 * model_dim,
            ln_eps: 1e-5,
            outlier_channels: 0,
            outlier_scale: 1.0,
            seed: 0,
        }
    }

    pub fn with_outliers(mut self, channels: usize, scale: f32) -> Self {
        self.outlier_channels = channels;
        self.outlier_scale = scale;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ffn_dim(mut self, ffn_dim: usize) -> Self {
        self.ffn_dim = ffn_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Validation(
                "layers, heads, head_dim and ffn_dim must be positive".into(),
            ));
        }
        if self.model_dim != self.heads * self.head_dim {
            return Err(Error::Validation(format!(
                "model_dim {} != heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        if self.outlier_channels > self.model_dim {
            return Err(Error::Validation(format!(
                "outlier_channels {} exceeds model_dim {}",
                self.outlier_channels, self.model_dim
            )));
        }
        if !(self.outlier_scale >= 1.0) || !self.outlier_scale.is_finite() {
            return Err(Error::Validation("outlier_scale must be finite and >= 1".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Validation("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// The outlier channel indices, shared by every layer.
    pub fn outlier_indices(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6f75_746c_6965_7273);
        let mut idx = sample(&mut rng, self.model_dim, self.outlier_channels).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Weights of one decoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_in: Matrix,
    pub ffn_out: Matrix,
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
}

impl LayerWeights {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let d = spec.model_dim;
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ffn_in: Matrix::zeros(d, spec.ffn_dim),
            ffn_out: Matrix::zeros(spec.ffn_dim, d),
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
        }
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        let d = spec.model_dim;
        let square = [&self.w_q, &self.w_k, &self.w_v, &self.w_o];
        let ok = square.iter().all(|m| m.shape() == (d, d))
            && self.ffn_in.shape() == (d, spec.ffn_dim)
            && self.ffn_out.shape() == (spec.ffn_dim, d)
            && [&self.ln1_gain, &self.ln1_bias, &self.ln2_gain, &self.ln2_bias]
                .iter()
                .all(|v| v.len() == d);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("layer weight shapes disagree with spec".into()))
        }
    }

    /// `LN1(x)` for one row.
    pub fn attention_input(&self, spec: &ModelSpec, x: &[f32]) -> Result<Vec<f32>> {
        layernorm(x, &self.ln1_gain, &self.ln1_bias, spec.ln_eps)
    }

    /// Query, key and value rows for one attention-input row.
    pub fn project(&self, x_a: &[f32]) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
        Ok((
            vecmat(x_a, &self.w_q)?,
            vecmat(x_a, &self.w_k)?,
            vecmat(x_a, &self.w_v)?,
        ))
    }

    /// Output projection, residual add, and FFN for one row.
    ///
    /// `attn_heads` is the concatenation of per-head attention outputs.
    pub fn finish(&self, spec: &ModelSpec, x: &[f32], attn_heads: &[f32]) -> Result<BlockTail> {
        let attn_out = vecmat(attn_heads, &self.w_o)?;
        let mid: Vec<f32> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let normed = layernorm(&mid, &self.ln2_gain, &self.ln2_bias, spec.ln_eps)?;
        let mut hidden = vecmat(&normed, &self.ffn_in)?;
        hidden.iter_mut().for_each(|h| *h = h.max(0.0));
        let ffn_out = vecmat(&hidden, &self.ffn_out)?;
        let out = mid.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();
        Ok(BlockTail { out, attn_out, ffn_out })
    }
}

/// Result of [`LayerWeights::finish`].
#[derive(Debug, Clone)]
pub struct BlockTail {
    pub out: Vec<f32>,
    pub attn_out: Vec<f32>,
    pub ffn_out: Vec<f32>,
}

/// A complete decoder stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<LayerWeights>,
    /// Present once the query/key weights have been skewed.
    pub skew: Option<SkewSet>,
}

impl Model {
    pub fn new(spec: ModelSpec, layers: Vec<LayerWeights>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers {
            return Err(Error::Validation(format!(
                "{} layers given, spec says {}",
                layers.len(),
                spec.layers
            )));
        }
        for l in &layers {
            l.check(&spec)?;
        }
        Ok(Self {
            spec,
            layers,
            skew: None,
        })
    }

    pub fn is_skewed(&self) -> bool {
        self.skew.is_some()
    }

    /// Seeded synthetic model with injected outlier channels.
    ///
    /// Projections are `N(0, 1/D)`, FFN input `N(0, 1/D)`, FFN output
    /// `N(0, 1/ffn_dim)`. Layer-norm gains are `1 + 0.02·N(0,1)` and biases
    /// `0.02·N(0,1)`; the outlier channels have both gains multiplied by
    /// `outlier_scale`, and the first block's FFN writes a positive
    /// `(outlier_scale - 1)`-proportional term into those channels so that
    /// the residual stream carries them from then on.
    pub fn generate_synthetic(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.model_dim;
        let f = spec.ffn_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let outliers = spec.outlier_indices();
        let proj_scale = 1.0 / (d as f32).sqrt();
        let ffn_scale = 1.0 / (f as f32).sqrt();

        let mut layers = Vec::with_capacity(spec.layers);
        for layer in 0..spec.layers {
            let w_q = Matrix::random_normal(d, d, proj_scale, &mut rng);
            let w_k = Matrix::random_normal(d, d, proj_scale, &mut rng);
            let w_v = Matrix::random_normal(d, d, proj_scale, &mut rng);
            let w_o = Matrix::random_normal(d, d, proj_scale, &mut rng);
            let ffn_in = Matrix::random_normal(d, f, proj_scale, &mut rng);
            let mut ffn_out = Matrix::random_normal(f, d, ffn_scale, &mut rng);
            let mut ln1_gain = gain_vector(d, &mut rng);
            let ln1_bias = Matrix::random_normal(1, d, 0.02, &mut rng).into_data();
            let mut ln2_gain = gain_vector(d, &mut rng);
            let ln2_bias = Matrix::random_normal(1, d, 0.02, &mut rng).into_data();

            for &c in &outliers {
                ln1_gain[c] *= spec.outlier_scale;
                ln2_gain[c] *= spec.outlier_scale;
            }
            if layer == 0 && spec.outlier_scale > 1.0 {
                let push = (spec.outlier_scale - 1.0) * OUTLIER_EMERGENCE * ffn_scale;
                for r in 0..f {
                    for &c in &outliers {
                        ffn_out.set(r, c, ffn_out.get(r, c) + push);
                    }
                }
            }
            layers.push(LayerWeights {
                w_q,
                w_k,
                w_v,
                w_o,
                ffn_in,
                ffn_out,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
            });
        }
        Model::new(spec.clone(), layers)
    }

    /// Full forward pass over a fresh sequence.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.block_inputs(x)?.pop().expect("at least the input"))
    }

    /// `[Tblock_in_0, …, Tblock_in_{L-1}, output]` for a fresh sequence.
    pub fn block_inputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let mut states = vec![x.clone()];
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut caches = HeadCache::fresh(&self.spec);
            cur = forward_block(&self.spec, layer, &cur, &mut caches)?.out;
            states.push(cur.clone());
        }
        Ok(states)
    }

    /// Forward pass that keeps every block's internals.
    pub fn forward_detailed(&self, x: &Matrix) -> Result<Vec<BlockOutput>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut caches = HeadCache::fresh(&self.spec);
            let block = forward_block(&self.spec, layer, &cur, &mut caches)?;
            cur = block.out.clone();
            out.push(block);
        }
        Ok(out)
    }
}

fn gain_vector(d: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    Matrix::random_normal(1, d, 0.02, rng)
        .into_data()
        .into_iter()
        .map(|z| 1.0 + z)
        .collect()
}

/// Per-head key/value cache rows for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    pub keys: Matrix,
    pub values: Matrix,
}

impl HeadCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            keys: Matrix::empty(head_dim),
            values: Matrix::empty(head_dim),
        }
    }

    /// One empty cache per head.
    pub fn fresh(spec: &ModelSpec) -> Vec<Self> {
        (0..spec.heads).map(|_| Self::new(spec.head_dim)).collect()
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a block computed, kept for tracing and calibration.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub out: Matrix,
    /// `LN1(x)`.
    pub attn_input: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per head, `N × (cache_len + N)`; masked positions are zero.
    pub weights: Vec<Matrix>,
    pub attn_out: Matrix,
    pub ffn_out: Matrix,
}

/// `1/sqrt(d)`.
pub fn score_scale(head_dim: usize) -> f32 {
    1.0 / (head_dim as f32).sqrt()
}

/// Scaled scores of `q` against every key row.
pub fn head_scores(q: &[f32], keys: &Matrix, scale: f32) -> Vec<f32> {
    keys.row_iter().map(|k| dot(q, k) * scale).collect()
}

/// `softmax(q·Kᵀ/√d)·V` for a single query row over all key rows.
///
/// Returns the output row and the attention weights.
pub fn attention_head(q: &[f32], keys: &Matrix, values: &Matrix) -> Result<(Vec<f32>, Vec<f32>)> {
    if keys.rows() == 0 {
        return Err(Error::invalid("attention over an empty key set"));
    }
    if keys.rows() != values.rows() || q.len() != keys.cols() {
        return Err(Error::shape(
            "attention_head",
            format!("q {} keys {:?} values {:?}", q.len(), keys.shape(), values.shape()),
        ));
    }
    let scores = head_scores(q, keys, score_scale(keys.cols()));
    let weights = softmax_row(&scores)?;
    Ok((weighted_sum(&weights, values), weights))
}

/// `Σ_j w_j · V_j`.
pub fn weighted_sum(weights: &[f32], values: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0f32; values.cols()];
    for (w, row) in weights.iter().zip(values.row_iter()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    out
}

/// Causal multi-query attention for one head: query row `t` sees the cache
/// and new rows `0..=t`.
pub fn causal_attention(q: &Matrix, cache: &HeadCache, new_from: usize) -> Result<(Matrix, Matrix)> {
    let total = cache.len();
    let mut out = Matrix::zeros(q.rows(), cache.values.cols());
    let mut weights = Matrix::zeros(q.rows(), total);
    for t in 0..q.rows() {
        let visible = new_from + t + 1;
        if visible > total {
            return Err(Error::shape("causal_attention", "query beyond cache"));
        }
        let idx: Vec<usize> = (0..visible).collect();
        let (o, w) = if visible == total {
            attention_head(q.row(t), &cache.keys, &cache.values)?
        } else {
            attention_head(
                q.row(t),
                &cache.keys.select_rows(&idx)?,
                &cache.values.select_rows(&idx)?,
            )?
        };
        out.set_row(t, &o)?;
        weights.row_mut(t)[..visible].copy_from_slice(&w);
    }
    Ok((out, weights))
}

/// Runs one pre-norm block over `x (N×D)`, appending the new K/V rows to the
/// per-head caches before attending.
pub fn forward_block(
    spec: &ModelSpec,
    layer: &LayerWeights,
    x: &Matrix,
    caches: &mut [HeadCache],
) -> Result<BlockOutput> {
    let (n, dm) = x.shape();
    if dm != spec.model_dim {
        return Err(Error::shape(
            "forward_block",
            format!("input width {dm}, model dim {}", spec.model_dim),
        ));
    }
    if caches.len() != spec.heads
        || caches.iter().any(|c| {
            c.keys.cols() != spec.head_dim || c.values.cols() != spec.head_dim || c.keys.rows() != c.values.rows()
        })
    {
        return Err(Error::shape(
            "forward_block",
            format!("expected {} head caches of width {}", spec.heads, spec.head_dim),
        ));
    }
    let hd = spec.head_dim;

    let mut attn_input = Matrix::zeros(n, dm);
    for t in 0..n {
        attn_input.set_row(t, &layer.attention_input(spec, x.row(t))?)?;
    }
    let q = matmul(&attn_input, &layer.w_q)?;
    let k = matmul(&attn_input, &layer.w_k)?;
    let v = matmul(&attn_input, &layer.w_v)?;

    let mut heads_out = Matrix::zeros(n, dm);
    let mut weights = Vec::with_capacity(spec.heads);
    for (h, cache) in caches.iter_mut().enumerate() {
        let prior = cache.len();
        let kh = k.column_block(h * hd, hd);
        let vh = v.column_block(h * hd, hd);
        for t in 0..n {
            cache.keys.push_row(kh.row(t))?;
            cache.values.push_row(vh.row(t))?;
        }
        let (o, w) = causal_attention(&q.column_block(h * hd, hd), cache, prior)?;
        heads_out.set_column_block(h * hd, &o)?;
        weights.push(w);
    }

    let mut out = Matrix::zeros(n, dm);
    let mut attn_out = Matrix::zeros(n, dm);
    let mut ffn_out = Matrix::zeros(n, dm);
    for t in 0..n {
        let tail = layer.finish(spec, x.row(t), heads_out.row(t))?;
        out.set_row(t, &tail.out)?;
        attn_out.set_row(t, &tail.attn_out)?;
        ffn_out.set_row(t, &tail.ffn_out)?;
    }
    Ok(BlockOutput {
        out,
        attn_input,
        q,
        k,
        v,
        weights,
        attn_out,
        ffn_out,
    })
}

/// Seeded `N(0,1)` prompt of `n` rows.
pub fn random_prompt(n: usize, model_dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::random_normal(n, model_dim, 1.0, &mut rng)
}

/// Mean cosine similarity between consecutive block inputs, averaged over
/// rows and over pairs `(i, i-1)` for `i` in `from..=L` (index `L` is the
/// stack output).
pub fn consecutive_input_similarity(states: &[Matrix], from: usize) -> f32 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in from.max(1)..states.len() {
        let (a, b) = (&states[i], &states[i - 1]);
        for r in 0..a.rows() {
            acc += f64::from(tensor::cosine(a.row(r), b.row(r)));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (acc / count as f64) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec::new(2, 16, 4).with_ffn_dim(32).with_seed(7)
    }

    #[test]
    fn spec_validation() {
        let mut s = tiny();
        s.head_dim = 5;
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let s = tiny().with_outliers(17, 2.0);
        assert!(Model::generate_synthetic(&s).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = tiny().with_outliers(2, 6.0);
        let a = Model::generate_synthetic(&s).unwrap();
        let b = Model::generate_synthetic(&s).unwrap();
        assert_eq!(a, b);
        let bits = |m: &Model| -> Vec<u32> { m.layers[1].w_q.data().iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn outlier_gain_is_exact_multiple() {
        let base = Model::generate_synthetic(&tiny().with_outliers(3, 1.0)).unwrap();
        let hot = Model::generate_synthetic(&tiny().with_outliers(3, 8.0)).unwrap();
        let idx = tiny().with_outliers(3, 8.0).outlier_indices();
        assert_eq!(idx.len(), 3);
        for (lb, lh) in base.layers.iter().zip(&hot.layers) {
            for c in 0..16 {
                let factor = if idx.contains(&c) { 8.0 } else { 1.0 };
                assert_eq!(lh.ln1_gain[c], lb.ln1_gain[c] * factor);
                assert_eq!(lh.ln2_gain[c], lb.ln2_gain[c] * factor);
            }
        }
    }

    #[test]
    fn scale_one_distinguishes_no_channel() {
        let m = Model::generate_synthetic(&tiny().with_outliers(3, 1.0)).unwrap();
        for l in &m.layers {
            for g in l.ln1_gain.iter().chain(&l.ln2_gain) {
                assert!((g - 1.0).abs() < 0.15);
            }
        }
    }

    #[test]
    fn zero_weights_are_pure_residual() {
        let spec = tiny();
        let layer = LayerWeights::zeros(&spec);
        let x = random_prompt(5, 16, 1);
        let mut caches = HeadCache::fresh(&spec);
        let out = forward_block(&spec, &layer, &x, &mut caches).unwrap();
        assert_eq!(out.out, x);
    }

    #[test]
    fn decode_step_weights_cover_cache_plus_one() {
        let spec = tiny();
        let m = Model::generate_synthetic(&spec).unwrap();
        let mut caches = HeadCache::fresh(&spec);
        forward_block(&spec, &m.layers[0], &random_prompt(6, 16, 2), &mut caches).unwrap();
        let step = forward_block(&spec, &m.layers[0], &random_prompt(1, 16, 3), &mut caches).unwrap();
        for w in &step.weights {
            assert_eq!(w.shape(), (1, 7));
            assert!((w.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cache_grows_by_heads_times_tokens() {
        let spec = tiny();
        let m = Model::generate_synthetic(&spec).unwrap();
        let mut caches = HeadCache::fresh(&spec);
        let n = 5;
        forward_block(&spec, &m.layers[0], &random_prompt(n, 16, 2), &mut caches).unwrap();
        for i in 1..=3 {
            forward_block(&spec, &m.layers[0], &random_prompt(1, 16, 10 + i), &mut caches).unwrap();
            let elems: usize = caches.iter().map(|c| c.keys.data().len()).sum();
            assert_eq!(elems, spec.heads * (n + i as usize) * spec.head_dim);
        }
    }

    #[test]
    fn attention_head_examples() {
        let k = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![3.0, -4.0]]).unwrap();
        let (o, w) = attention_head(&[0.3, 0.1], &k, &v).unwrap();
        assert_eq!(o, vec![3.0, -4.0]);
        assert_eq!(w, vec![1.0]);

        let k = Matrix::from_rows(&vec![vec![1.0, 1.0]; 3]).unwrap();
        let v = Matrix::from_rows(&[vec![0.0, 3.0], vec![3.0, 0.0], vec![6.0, 6.0]]).unwrap();
        let (o, _) = attention_head(&[2.0, -1.0], &k, &v).unwrap();
        assert!((o[0] - 3.0).abs() < 1e-6 && (o[1] - 3.0).abs() < 1e-6);

        assert!(attention_head(&[1.0, 1.0], &Matrix::empty(2), &Matrix::empty(2)).is_err());
    }

    #[test]
    fn prefill_is_causal() {
        let spec = tiny();
        let m = Model::generate_synthetic(&spec).unwrap();
        let mut caches = HeadCache::fresh(&spec);
        let out = forward_block(&spec, &m.layers[0], &random_prompt(6, 16, 4), &mut caches).unwrap();
        for w in &out.weights {
            for t in 0..6 {
                assert!(w.row(t)[t + 1..].iter().all(|&x| x == 0.0));
                assert!(w.row(t)[..=t].iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let m = Model::generate_synthetic(&tiny().with_outliers(2, 5.0)).unwrap();
        let x = random_prompt(9, 16, 5);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn forward_block_rejects_bad_caches() {
        let spec = tiny();
        let m = Model::generate_synthetic(&spec).unwrap();
        let mut caches = vec![HeadCache::new(4); 3];
        assert!(forward_block(&spec, &m.layers[0], &random_prompt(2, 16, 1), &mut caches).is_err());
    }
}

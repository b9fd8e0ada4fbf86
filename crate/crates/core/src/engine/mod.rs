//! Prefill and decode orchestration across selection schemes.
//!
//! Every scheme shares the same per-head [`KvPool`]s and the same attention
//! code; they differ only in which pool rows each head fetches at each layer.
//! The current token's key and value are always attended (appended last) and
//! softmax is taken over the fetched rows only.

mod trace;
mod workload;

pub use trace::{
    HeadRecord, IterationRecord, LayerRecord, ModelShape, PrefillRecord, SequencePrefill, Trace, TRACE_FORMAT,
    TRACE_VERSION,
};
pub use workload::{
    generate, query_direction, target_position, SequenceInputs, ShiftingParams, Workload, ANCHOR_TOKENS,
};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{h2o_budget, oracle_select, quant_bytes, quant_round_trip, H2oState};
use crate::cost::{attention_flops, ffn_flops, speculation_flops};
use crate::error::{Error, Result};
use crate::model::{attention_head, forward_block, head_scores, score_scale, HeadCache, Model};
use crate::pool::{EvictionPolicy, KvPool};
use crate::speculation::{
    build_partial, fraction_floor, select_tokens, speculate_scores, HeadPartial, LayerPartial, SpeculationConfig,
};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Every pool row at every layer.
    Full,
    /// Fixed-budget heavy-hitter retention.
    H2o,
    /// Every row, stored as 4-bit groups.
    Quant4,
    /// Speculated top-n from layer 1 on.
    Infinigen,
    /// True-score top-n from the full pool.
    Oracle,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Full,
        Scheme::H2o,
        Scheme::Quant4,
        Scheme::Infinigen,
        Scheme::Oracle,
    ];
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "h2o" => Ok(Self::H2o),
            "quant4" => Ok(Self::Quant4),
            "infinigen" => Ok(Self::Infinigen),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::invalid(format!("unknown scheme {other:?}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::H2o => "h2o",
            Self::Quant4 => "quant4",
            Self::Infinigen => "infinigen",
            Self::Oracle => "oracle",
        })
    }
}

/// Pool capacity, absolute or as a fraction of `prompt_len + gen_len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolLimit {
    Rows(usize),
    Fraction(f32),
}

impl PoolLimit {
    pub fn resolve(&self, total_tokens: usize) -> usize {
        match *self {
            PoolLimit::Rows(r) => r,
            PoolLimit::Fraction(f) => fraction_floor(f, total_tokens).max(1),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            PoolLimit::Rows(0) => Err(Error::invalid("pool limit must be at least 1 row")),
            PoolLimit::Fraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::invalid(format!(
                "pool limit fraction must be in (0, 1], got {f}"
            ))),
            _ => Ok(()),
        }
    }
}

impl FromStr for PoolLimit {
    type Err = Error;

    /// Integers are row counts; anything with a decimal point is a fraction.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad pool limit {s:?}"));
        let limit = if s.contains('.') {
            PoolLimit::Fraction(s.parse().map_err(|_| bad())?)
        } else {
            PoolLimit::Rows(s.parse().map_err(|_| bad())?)
        };
        limit.validate()?;
        Ok(limit)
    }
}

/// Which attention input drives speculation for layer `i`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeculationInput {
    /// Layer `i-1`'s attention input, available one layer ahead.
    #[default]
    PreviousLayer,
    /// Layer `i`'s own attention input; a diagnostic upper bound.
    SameLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheme: Scheme,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub speculation: SpeculationConfig,
    pub pool_limit: Option<PoolLimit>,
    pub policy: EvictionPolicy,
    /// Retained fraction of the prompt for heavy-hitter retention; also the
    /// per-head count for oracle selection.
    pub h2o_budget: f32,
    pub seed: u64,
    pub workload: Workload,
    /// Record per-head scores and weights.
    pub capture: bool,
    pub speculation_input: SpeculationInput,
    pub bytes_per_element: u64,
}

impl RunConfig {
    pub fn new(scheme: Scheme, prompt_len: usize, gen_len: usize) -> Self {
        Self {
            scheme,
            prompt_len,
            gen_len,
            batch: 1,
            speculation: SpeculationConfig::default(),
            pool_limit: None,
            policy: EvictionPolicy::Counter,
            h2o_budget: 0.2,
            seed: 0,
            workload: Workload::Autoregressive,
            capture: false,
            speculation_input: SpeculationInput::PreviousLayer,
            bytes_per_element: 2,
        }
    }

    /// Per-head row count for the fixed-budget schemes.
    pub fn budget_rows(&self) -> usize {
        h2o_budget(self.h2o_budget, self.prompt_len)
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::invalid("prompt_len must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be at least 1"));
        }
        if self.bytes_per_element == 0 {
            return Err(Error::invalid("bytes_per_element must be positive"));
        }
        self.speculation.validate()?;
        if !(self.h2o_budget > 0.0 && self.h2o_budget <= 1.0) {
            return Err(Error::invalid(format!(
                "h2o budget must be in (0, 1], got {}",
                self.h2o_budget
            )));
        }
        if let Some(limit) = &self.pool_limit {
            limit.validate()?;
            if !matches!(self.scheme, Scheme::Infinigen | Scheme::Full) {
                return Err(Error::invalid(format!(
                    "pool limits apply to full and infinigen, not {}",
                    self.scheme
                )));
            }
        }
        if self.scheme == Scheme::Infinigen && !model.is_skewed() {
            return Err(Error::NotSkewed);
        }
        Ok(())
    }
}

/// Trace plus the decode outputs of every sequence.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    /// Per sequence, `gen_len × D`.
    pub outputs: Vec<Matrix>,
    /// Per sequence, the prompt's final output row.
    pub prefill_outputs: Vec<Vec<f32>>,
}

/// Prefill plus `gen_len` decode steps for every sequence in the batch.
pub fn run(model: &Model, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate(model)?;
    let runs: Vec<SequenceRun> = (0..cfg.batch)
        .into_par_iter()
        .map(|s| run_sequence(model, cfg, s))
        .collect::<Result<_>>()?;

    let mut iterations: Vec<IterationRecord> = (0..cfg.gen_len)
        .map(|i| IterationRecord {
            iteration: i,
            layers: Vec::new(),
        })
        .collect();
    let mut sequences = Vec::with_capacity(runs.len());
    let mut outputs = Vec::with_capacity(runs.len());
    let mut prefill_outputs = Vec::with_capacity(runs.len());
    for r in runs {
        for (it, layers) in iterations.iter_mut().zip(r.records) {
            if it.layers.is_empty() {
                it.layers = layers;
            } else {
                for (acc, rec) in it.layers.iter_mut().zip(layers) {
                    acc.merge(rec);
                }
            }
        }
        sequences.push(r.prefill);
        outputs.push(r.outputs);
        prefill_outputs.push(r.prefill_output);
    }

    Ok(RunOutput {
        trace: Trace {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            config: cfg.clone(),
            model: ModelShape::from(&model.spec),
            prefill: PrefillRecord {
                prompt_len: cfg.prompt_len,
                sequences,
            },
            iterations,
        },
        outputs,
        prefill_outputs,
    })
}

struct SequenceRun {
    prefill: SequencePrefill,
    prefill_output: Vec<f32>,
    records: Vec<Vec<LayerRecord>>,
    outputs: Matrix,
}

fn run_sequence(model: &Model, cfg: &RunConfig, sequence: usize) -> Result<SequenceRun> {
    let inputs = generate(model, &cfg.workload, cfg.prompt_len, cfg.gen_len, cfg.seed, sequence)?;
    let mut state = SequenceState::prefill(model, cfg, sequence, &inputs.prompt)?;
    let prefill = state.prefill_record();
    let prefill_output = state.last_output.clone();

    let mut records = Vec::with_capacity(cfg.gen_len);
    let mut outputs = Matrix::zeros(cfg.gen_len, model.spec.model_dim);
    for i in 0..cfg.gen_len {
        let x = match &inputs.decode {
            Some(d) => d.row(i).to_vec(),
            None => state.last_output.clone(),
        };
        let (out, layers) = state.step(i, &x)?;
        outputs.set_row(i, &out)?;
        records.push(layers);
    }
    Ok(SequenceRun {
        prefill,
        prefill_output,
        records,
        outputs,
    })
}

/// Per-sequence decode state.
pub struct SequenceState<'a> {
    model: &'a Model,
    cfg: &'a RunConfig,
    sequence: usize,
    /// `[layer][head]`.
    pools: Vec<Vec<KvPool>>,
    /// Partial artifacts for layers that speculate.
    partials: Vec<Option<LayerPartial>>,
    h2o: Vec<Vec<H2oState>>,
    /// Exact keys of every token, kept when capturing.
    shadow: Vec<Vec<Matrix>>,
    prefill_evictions: usize,
    position: usize,
    last_output: Vec<f32>,
}

struct Pending {
    per_head: Vec<Vec<usize>>,
    scores: Vec<Vec<f32>>,
    flops: u64,
}

impl<'a> SequenceState<'a> {
    /// Runs the prompt through full causal attention and fills pools,
    /// partial artifacts and heavy-hitter state.
    pub fn prefill(model: &'a Model, cfg: &'a RunConfig, sequence: usize, prompt: &Matrix) -> Result<Self> {
        let spec = &model.spec;
        let d = spec.head_dim;
        let n = prompt.rows();
        let limit = cfg.pool_limit.map(|l| l.resolve(cfg.prompt_len + cfg.gen_len));
        let mut pools = Vec::with_capacity(spec.layers);
        let mut partials = Vec::with_capacity(spec.layers);
        let mut h2o = Vec::with_capacity(spec.layers);
        let mut shadow = Vec::with_capacity(spec.layers);
        let mut prefill_evictions = 0;

        let mut h = prompt.clone();
        for (l, layer) in model.layers.iter().enumerate() {
            let mut caches = HeadCache::fresh(spec);
            let block = forward_block(spec, layer, &h, &mut caches)?;
            let stored_k = maybe_quantize(cfg.scheme, &block.k);
            let stored_v = maybe_quantize(cfg.scheme, &block.v);

            let mut layer_pools = Vec::with_capacity(spec.heads);
            for head in 0..spec.heads {
                let mut pool = KvPool::new(d, limit, cfg.policy)?;
                let ks = stored_k.column_block(head * d, d);
                let vs = stored_v.column_block(head * d, d);
                for t in 0..n {
                    pool.append(ks.row(t), vs.row(t))?;
                }
                prefill_evictions += pool.evictions();
                layer_pools.push(pool);
            }

            partials.push(if cfg.scheme == Scheme::Infinigen && l > 0 {
                let heads = (0..spec.heads)
                    .map(|head| {
                        let qt = block.q.column_block(head * d, d);
                        let kt = block.k.column_block(head * d, d);
                        let idx = build_partial(&qt, &kt, cfg.speculation.partial_ratio)?;
                        HeadPartial::new(idx, &layer.w_q.column_block(head * d, d), layer_pools[head].keys())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(LayerPartial { heads })
            } else {
                None
            });

            if cfg.scheme == Scheme::H2o {
                let budget = cfg.budget_rows();
                let states = block
                    .weights
                    .iter()
                    .map(|w| {
                        let mut st = H2oState::new(budget)?;
                        let col_sums: Vec<f32> = (0..n).map(|j| (0..n).map(|t| w.get(t, j)).sum()).collect();
                        prefill_evictions += st.seed(&col_sums).len();
                        Ok(st)
                    })
                    .collect::<Result<Vec<_>>>()?;
                h2o.push(states);
            }

            if cfg.capture {
                shadow.push((0..spec.heads).map(|head| block.k.column_block(head * d, d)).collect());
            }
            pools.push(layer_pools);
            h = block.out;
        }

        Ok(Self {
            model,
            cfg,
            sequence,
            pools,
            partials,
            h2o,
            shadow,
            prefill_evictions,
            position: n,
            last_output: h.row(n - 1).to_vec(),
        })
    }

    fn prefill_record(&self) -> SequencePrefill {
        SequencePrefill {
            sequence: self.sequence,
            partial_columns: if self.partials.iter().any(Option::is_some) {
                self.partials
                    .iter()
                    .map(|p| {
                        p.as_ref().map_or_else(Vec::new, |lp| {
                            lp.heads.iter().map(|h| h.column_indices.clone()).collect()
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            },
            pool_rows: self.pools.iter().map(|l| l[0].len()).collect(),
            evictions: self.prefill_evictions,
        }
    }

    pub fn pools(&self) -> &[Vec<KvPool>] {
        &self.pools
    }

    pub fn partials(&self) -> &[Option<LayerPartial>] {
        &self.partials
    }

    /// One decode iteration with input row `x`.
    pub fn step(&mut self, iteration: usize, x: &[f32]) -> Result<(Vec<f32>, Vec<LayerRecord>)> {
        let spec = &self.model.spec;
        let mut h = x.to_vec();
        let mut pending: Option<Pending> = None;
        let mut records = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let (out, rec, next) = self.layer_step(l, &h, pending.take()).map_err(|e| match e {
                Error::Internal { .. } => e,
                other => Error::Internal {
                    iteration,
                    layer: l,
                    message: other.to_string(),
                },
            })?;
            h = out;
            pending = next;
            records.push(rec);
        }
        self.position += 1;
        self.last_output = h.clone();
        Ok((h, records))
    }

    fn speculate(&self, layer: usize, x_a: &[f32]) -> Result<Option<Pending>> {
        let Some(Some(partial)) = self.partials.get(layer) else {
            return Ok(None);
        };
        let spec = &self.model.spec;
        let scores = speculate_scores(x_a, partial, spec.head_dim)?;
        let sel = select_tokens(
            &scores,
            &self.cfg.speculation,
            spec.head_dim,
            self.cfg.bytes_per_element,
        )?;
        let k = partial.heads[0].column_indices.len();
        Ok(Some(Pending {
            per_head: sel.per_head,
            scores,
            flops: speculation_flops(spec.heads, spec.model_dim, k, partial.heads[0].len()),
        }))
    }

    fn layer_step(
        &mut self,
        l: usize,
        x: &[f32],
        pending: Option<Pending>,
    ) -> Result<(Vec<f32>, LayerRecord, Option<Pending>)> {
        let model = self.model;
        let cfg = self.cfg;
        let spec = &model.spec;
        let layer = &model.layers[l];
        let d = spec.head_dim;
        let bpe = cfg.bytes_per_element;
        let scale = score_scale(d);

        let x_a = layer.attention_input(spec, x)?;
        let (q, k, v) = layer.project(&x_a)?;
        let stored_k = maybe_quantize_row(cfg.scheme, &k);
        let stored_v = maybe_quantize_row(cfg.scheme, &v);

        let current = if cfg.scheme == Scheme::Infinigen && l > 0 {
            match cfg.speculation_input {
                SpeculationInput::PreviousLayer => pending,
                SpeculationInput::SameLayer => self.speculate(l, &x_a)?,
            }
        } else {
            None
        };
        if cfg.scheme == Scheme::Infinigen && l > 0 && current.is_none() {
            return Err(Error::invalid("missing speculation for layer"));
        }
        let next = if cfg.scheme == Scheme::Infinigen
            && cfg.speculation_input == SpeculationInput::PreviousLayer
            && l + 1 < spec.layers
        {
            self.speculate(l + 1, &x_a)?
        } else {
            None
        };

        let s = self.pools[l][0].len();
        let mut rec = LayerRecord {
            layer: l,
            ffn_flops: ffn_flops(spec.model_dim, spec.ffn_dim),
            speculation_flops: current.as_ref().map_or(0, |p| p.flops),
            full_bytes: (s * spec.heads * 2 * d) as u64 * bpe,
            full_attention_flops: attention_flops(&vec![s + 1; spec.heads], d),
            ..LayerRecord::default()
        };
        let mut heads_out = vec![0.0f32; spec.model_dim];
        let evictions_before: usize = self.pools[l].iter().map(KvPool::evictions).sum();

        for head in 0..spec.heads {
            let qh = &q[head * d..(head + 1) * d];
            let kh = &k[head * d..(head + 1) * d];
            let vh = &v[head * d..(head + 1) * d];
            let pool = &mut self.pools[l][head];
            let rows: Vec<usize> = match cfg.scheme {
                Scheme::Full | Scheme::Quant4 => (0..s).collect(),
                Scheme::Infinigen if l == 0 => (0..s).collect(),
                Scheme::Infinigen => current.as_ref().expect("checked above").per_head[head].clone(),
                Scheme::Oracle => {
                    let scores = head_scores(qh, pool.keys(), scale);
                    let n = cfg.budget_rows().min(s);
                    oracle_select(&[scores], n)?.remove(0)
                }
                Scheme::H2o => self.h2o[l][head].retained.clone(),
            };
            let pool_tokens = if cfg.capture { pool.tokens() } else { Vec::new() };

            let (mut ks, mut vs) = pool.fetch(&rows)?;
            ks.push_row(kh)?;
            vs.push_row(vh)?;
            let (o, w) = attention_head(qh, &ks, &vs)?;
            heads_out[head * d..(head + 1) * d].copy_from_slice(&o);

            if cfg.scheme == Scheme::H2o {
                if let Some(_gone) = self.h2o[l][head].step(s, &w)? {
                    rec.evictions += 1;
                }
            }

            if cfg.scheme != Scheme::Quant4 {
                rec.bytes_moved += (rows.len() * 2 * d) as u64 * bpe;
            }
            rec.attention_flops += attention_flops(&[rows.len() + 1], d);
            rec.n_selected.push(rows.len());

            if cfg.capture {
                let shadow = &self.shadow[l][head];
                let pos = self.position;
                let mut true_scores = head_scores(qh, shadow, scale);
                true_scores.push(crate::tensor::dot(qh, kh) * scale);
                let mut approx = vec![0.0f32; pos + 1];
                let mut selected = Vec::with_capacity(rows.len());
                for (i, &r) in rows.iter().enumerate() {
                    approx[pool_tokens[r]] = w[i];
                    selected.push(pool_tokens[r]);
                }
                approx[pos] = w[w.len() - 1];
                selected.sort_unstable();
                rec.heads.push(HeadRecord {
                    sequence: self.sequence,
                    head,
                    selected,
                    approx_weights: approx,
                    true_scores,
                    speculated_scores: current.as_ref().map_or_else(Vec::new, |p| p.scores[head].clone()),
                    pool_tokens,
                });
            }
        }

        // Quantized bytes are accounted over whole D-wide rows.
        if cfg.scheme == Scheme::Quant4 {
            rec.bytes_moved = s as u64 * 2 * quant_bytes(spec.model_dim);
        }

        for head in 0..spec.heads {
            let ks = &stored_k[head * d..(head + 1) * d];
            let vs = &stored_v[head * d..(head + 1) * d];
            let pool = &mut self.pools[l][head];
            match self.partials[l].as_mut() {
                Some(p) => pool.append_with(ks, vs, &mut p.heads[head])?,
                None => pool.append(ks, vs)?,
            };
            if cfg.capture {
                self.shadow[l][head].push_row(&k[head * d..(head + 1) * d])?;
            }
        }
        let evictions_after: usize = self.pools[l].iter().map(KvPool::evictions).sum();
        rec.evictions += evictions_after - evictions_before;
        rec.pool_rows = self.pools[l][0].len();

        let tail = layer.finish(spec, x, &heads_out)?;
        Ok((tail.out, rec, next))
    }
}

fn maybe_quantize(scheme: Scheme, m: &Matrix) -> Matrix {
    if scheme != Scheme::Quant4 {
        return m.clone();
    }
    let mut out = m.clone();
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&quant_round_trip(m.row(r)));
    }
    out
}

fn maybe_quantize_row(scheme: Scheme, row: &[f32]) -> Vec<f32> {
    if scheme == Scheme::Quant4 {
        quant_round_trip(row)
    } else {
        row.to_vec()
    }
}

/// Plain dense decode through per-layer [`HeadCache`]s, independent of the
/// pools: `decode` rows are used as inputs when given, otherwise each step
/// feeds back the previous output.
pub fn dense_decode(model: &Model, prompt: &Matrix, decode: Option<&Matrix>, steps: usize) -> Result<Matrix> {
    let spec = &model.spec;
    let mut caches: Vec<Vec<HeadCache>> = (0..spec.layers).map(|_| HeadCache::fresh(spec)).collect();
    let mut h = prompt.clone();
    for (layer, cache) in model.layers.iter().zip(caches.iter_mut()) {
        h = forward_block(spec, layer, &h, cache)?.out;
    }
    let mut last = h.row(h.rows() - 1).to_vec();
    let mut out = Matrix::zeros(steps, spec.model_dim);
    for i in 0..steps {
        let x = decode.map_or_else(|| last.clone(), |d| d.row(i).to_vec());
        let mut h = Matrix::row_vector(&x);
        for (layer, cache) in model.layers.iter().zip(caches.iter_mut()) {
            h = forward_block(spec, layer, &h, cache)?.out;
        }
        last = h.row(0).to_vec();
        out.set_row(i, &last)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::skew::skew_model;

    fn models() -> (Model, Model) {
        let spec = ModelSpec::new(3, 32, 4)
            .with_ffn_dim(64)
            .with_outliers(2, 5.0)
            .with_seed(21);
        let m = Model::generate_synthetic(&spec).unwrap();
        let s = skew_model(&m, 1).unwrap();
        (m, s)
    }

    fn bits(m: &Matrix) -> Vec<u32> {
        m.data().iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn full_scheme_is_bit_exact() {
        let (m, _) = models();
        let cfg = RunConfig::new(Scheme::Full, 24, 6);
        let out = run(&m, &cfg).unwrap();
        let inputs = generate(&m, &cfg.workload, 24, 6, cfg.seed, 0).unwrap();
        let reference = dense_decode(&m, &inputs.prompt, None, 6).unwrap();
        assert_eq!(bits(&out.outputs[0]), bits(&reference));
    }

    #[test]
    fn zero_gen_len_has_prefill_only() {
        let (m, _) = models();
        let out = run(&m, &RunConfig::new(Scheme::Full, 10, 0)).unwrap();
        assert!(out.trace.iterations.is_empty());
        assert_eq!(out.trace.prefill.sequences[0].pool_rows, vec![10; 3]);
    }

    #[test]
    fn infinigen_needs_skewed_model() {
        let (m, _) = models();
        let cfg = RunConfig::new(Scheme::Infinigen, 10, 2);
        assert!(matches!(run(&m, &cfg), Err(Error::NotSkewed)));
    }

    #[test]
    fn partial_width_matches_ratio() {
        let (_, s) = models();
        let out = run(&s, &RunConfig::new(Scheme::Infinigen, 16, 1)).unwrap();
        let cols = &out.trace.prefill.sequences[0].partial_columns;
        assert!(cols[0].is_empty());
        assert!(cols[1..].iter().flatten().all(|c| c.len() == 3));
    }

    #[test]
    fn vacuous_threshold_matches_full() {
        let (_, s) = models();
        let mut cfg = RunConfig::new(Scheme::Infinigen, 20, 5);
        cfg.speculation.alpha = 1e30;
        cfg.speculation.cap_ratio = 1.0;
        let a = run(&s, &cfg).unwrap();
        cfg.scheme = Scheme::Full;
        let b = run(&s, &cfg).unwrap();
        assert!(a.outputs[0].max_abs_diff(&b.outputs[0]) <= 1e-3);
    }

    #[test]
    fn oracle_with_full_budget_matches_full() {
        let (m, _) = models();
        // Budget 1.0 gives n = prompt_len, which equals s on the first step.
        let mut cfg = RunConfig::new(Scheme::Oracle, 20, 1);
        cfg.h2o_budget = 1.0;
        let a = run(&m, &cfg).unwrap();
        cfg.scheme = Scheme::Full;
        let b = run(&m, &cfg).unwrap();
        assert!(a.outputs[0].max_abs_diff(&b.outputs[0]) <= 1e-3);
    }

    #[test]
    fn cap_bounds_bytes() {
        let (_, s) = models();
        let cfg = RunConfig::new(Scheme::Infinigen, 40, 5);
        let out = run(&s, &cfg).unwrap();
        for it in &out.trace.iterations {
            assert_eq!(it.layers[0].bytes_moved, it.layers[0].full_bytes);
            for l in &it.layers[1..] {
                assert!(l.bytes_moved as f64 <= 0.2 * l.full_bytes as f64 + 1e-9);
            }
        }
    }

    #[test]
    fn pool_length_tracks_limit() {
        let (_, s) = models();
        let mut cfg = RunConfig::new(Scheme::Infinigen, 20, 8);
        cfg.pool_limit = Some(PoolLimit::Rows(24));
        let out = run(&s, &cfg).unwrap();
        for (i, it) in out.trace.iterations.iter().enumerate() {
            for l in &it.layers {
                assert_eq!(l.pool_rows, (20 + i + 1).min(24));
            }
        }
    }

    #[test]
    fn batch_doubles_full_bytes() {
        let (m, _) = models();
        let mut cfg = RunConfig::new(Scheme::Full, 12, 3);
        let one = run(&m, &cfg).unwrap().trace.total_bytes();
        cfg.batch = 2;
        assert_eq!(run(&m, &cfg).unwrap().trace.total_bytes(), 2 * one);
    }

    #[test]
    fn runs_are_deterministic() {
        let (_, s) = models();
        let mut cfg = RunConfig::new(Scheme::Infinigen, 16, 4);
        cfg.capture = true;
        cfg.batch = 2;
        assert_eq!(run(&s, &cfg).unwrap().trace, run(&s, &cfg).unwrap().trace);
    }

    #[test]
    fn h2o_retains_budget() {
        let (m, _) = models();
        let cfg = RunConfig::new(Scheme::H2o, 30, 5);
        let out = run(&m, &cfg).unwrap();
        assert_eq!(out.trace.prefill.sequences[0].evictions, (30 - 6) * 3 * 4);
        for it in &out.trace.iterations {
            assert!(it.layers.iter().all(|l| l.n_selected.iter().all(|&n| n == 6)));
        }
    }

    #[test]
    fn config_validation() {
        let (m, _) = models();
        let mut cfg = RunConfig::new(Scheme::H2o, 10, 2);
        cfg.pool_limit = Some(PoolLimit::Rows(5));
        assert!(run(&m, &cfg).is_err());
        assert!(run(&m, &RunConfig::new(Scheme::Full, 0, 2)).is_err());
        assert_eq!("0.5".parse::<PoolLimit>().unwrap(), PoolLimit::Fraction(0.5));
        assert_eq!("12".parse::<PoolLimit>().unwrap(), PoolLimit::Rows(12));
        assert!("1.5".parse::<PoolLimit>().is_err());
        assert_eq!(PoolLimit::Fraction(0.5).resolve(41), 20);
        assert_eq!("Infinigen".parse::<Scheme>().unwrap(), Scheme::Infinigen);
    }

    #[test]
    fn captured_weights_are_dense() {
        let (_, s) = models();
        let mut cfg = RunConfig::new(Scheme::Infinigen, 16, 3);
        cfg.capture = true;
        let out = run(&s, &cfg).unwrap();
        for (i, it) in out.trace.iterations.iter().enumerate() {
            for l in &it.layers {
                assert_eq!(l.heads.len(), 4);
                for h in &l.heads {
                    assert_eq!(h.approx_weights.len(), 16 + i + 1);
                    assert_eq!(h.true_scores.len(), 16 + i + 1);
                    assert!((h.approx_weights.iter().sum::<f32>() - 1.0).abs() < 1e-5);
                    assert_eq!(h.speculated_scores.is_empty(), l.layer == 0);
                }
            }
        }
    }

    #[test]
    fn trace_round_trips_through_json() {
        let (_, s) = models();
        let mut cfg = RunConfig::new(Scheme::Infinigen, 12, 2);
        cfg.capture = true;
        cfg.workload = Workload::Shifting(ShiftingParams::default());
        let t = run(&s, &cfg).unwrap().trace;
        let back: Trace = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(t, back);
    }
}

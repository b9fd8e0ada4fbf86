use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use specprefetch::cost::{simulate_run, CostParams, ExecutionStyle};
use specprefetch::engine::{ShiftingParams, Workload};
use specprefetch::metrics::{head_cosine, head_recall, mean, per_iteration};
use specprefetch::model::{load_model, random_prompt, save_model};
use specprefetch::report::{report as build_report, Metric, Report};
use specprefetch::skew::{energy_fraction, skew_model};
use specprefetch::speculation::partial_columns;
use specprefetch::{Model, ModelSpec, RunConfig, Scheme, SpeculationConfig, Trace};

use crate::{BenchArgs, DecodeArgs, GenModelArgs, ReportArgs, RunArgs, SkewArgs};

/// Tokens in the prompt used to check a skewed model against the original.
const VERIFY_TOKENS: usize = 128;

pub fn print_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message.trim_end() }));
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load(path: &Path) -> Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

pub fn gen_model(a: GenModelArgs) -> Result<()> {
    let mut spec = ModelSpec::new(a.layers, a.model_dim, a.heads)
        .with_outliers(a.outlier_channels, a.outlier_scale)
        .with_seed(a.seed);
    if let Some(f) = a.ffn_dim {
        spec = spec.with_ffn_dim(f);
    }
    let model = Model::generate_synthetic(&spec)?;
    save_model(&model, &a.output)?;
    print_json(&json!({ "model": a.output, "spec": spec }))
}

#[derive(Serialize)]
struct LayerSkew {
    layer: usize,
    /// Mean over heads of `sigma_i / sigma_0`.
    sigma_decay: Vec<f64>,
    /// Mean over heads of the energy in the leading `partial_columns` directions.
    partial_energy: f64,
}

pub fn skew(a: SkewArgs) -> Result<()> {
    let model = load(&a.model)?;
    let skewed = skew_model(&model, a.calib_seed)?;
    let x = random_prompt(VERIFY_TOKENS, model.spec.model_dim, a.seed);
    let deviation = model.forward(&x)?.max_abs_diff(&skewed.forward(&x)?);

    let spec = &model.spec;
    let k = partial_columns(spec.head_dim, SpeculationConfig::default().partial_ratio);
    let set = skewed.skew.as_ref().expect("skew_model attaches its skew set");
    let layers: Vec<LayerSkew> = set
        .layers
        .iter()
        .enumerate()
        .map(|(layer, heads)| {
            let mut decay = vec![0.0f64; spec.head_dim];
            let mut energy = 0.0;
            for h in heads {
                let top = f64::from(h.sigma[0]).max(f64::MIN_POSITIVE);
                for (acc, s) in decay.iter_mut().zip(&h.sigma) {
                    *acc += f64::from(*s) / top / heads.len() as f64;
                }
                energy += energy_fraction(&h.sigma, k) / heads.len() as f64;
            }
            LayerSkew {
                layer,
                sigma_decay: decay,
                partial_energy: energy,
            }
        })
        .collect();

    save_model(&skewed, &a.output)?;
    print_json(&json!({
        "model": a.output,
        "calib_seed": a.calib_seed,
        "verify_tokens": VERIFY_TOKENS,
        "max_abs_forward_deviation": deviation,
        "partial_columns": k,
        "layers": layers,
    }))
}

fn run_config(scheme: Scheme, d: &DecodeArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(scheme, d.prompt_len, d.gen_len);
    cfg.batch = d.batch;
    cfg.speculation = SpeculationConfig {
        partial_ratio: d.partial_ratio,
        alpha: d.alpha,
        cap_ratio: d.cap_ratio,
        min_select: d.min_select,
    };
    cfg.pool_limit = d.pool_limit;
    cfg.policy = d.policy;
    cfg.h2o_budget = d.h2o_budget;
    cfg.seed = d.seed;
    cfg.capture = d.capture;
    cfg.workload = match d.workload.as_str() {
        "autoregressive" => Workload::Autoregressive,
        "shifting" => Workload::Shifting(ShiftingParams {
            switch_at: d.switch_at,
            ..ShiftingParams::default()
        }),
        other => {
            return Err(specprefetch::Error::InvalidArgument(format!(
                "unknown workload {other:?}, expected autoregressive or shifting"
            ))
            .into())
        }
    };
    Ok(cfg)
}

#[derive(Serialize)]
struct SchemeSummary {
    scheme: Scheme,
    total_bytes: u64,
    byte_ratio: f64,
    mean_selected: f64,
    /// Means over iterations of the per-layer means, layers 1 and up.
    #[serde(skip_serializing_if = "Option::is_none")]
    cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recall: Option<f64>,
    latency_s: BTreeMap<String, f64>,
}

fn summarize(trace: &Trace, params: &CostParams) -> Result<SchemeSummary> {
    let captured = trace.config.capture;
    let layers: Vec<_> = trace.iterations.iter().flat_map(|it| &it.layers).collect();
    let latency_s = ExecutionStyle::ALL
        .iter()
        .map(|&s| Ok((s.to_string(), simulate_run(&trace.work(), s, params)?.total_s)))
        .collect::<Result<_>>()?;
    Ok(SchemeSummary {
        scheme: trace.config.scheme,
        total_bytes: trace.total_bytes(),
        byte_ratio: trace.total_bytes() as f64 / trace.total_full_bytes().max(1) as f64,
        mean_selected: mean(&layers.iter().map(|l| l.mean_selected()).collect::<Vec<_>>()),
        cosine: captured
            .then(|| per_iteration(trace, 1, head_cosine).map(|v| mean(&v)))
            .transpose()?,
        recall: captured
            .then(|| per_iteration(trace, 1, head_recall).map(|v| mean(&v)))
            .transpose()?,
        latency_s,
    })
}

pub fn run(a: RunArgs) -> Result<()> {
    let model = load(&a.decode.model)?;
    let cfg = run_config(a.scheme, &a.decode)?;
    let out = specprefetch::run(&model, &cfg)?;
    out.trace.save(&a.output)?;
    print_json(&json!({
        "trace": a.output,
        "summary": summarize(&out.trace, &CostParams::default())?,
    }))
}

fn cost_params(path: Option<&Path>) -> Result<CostParams> {
    let Some(path) = path else {
        return Ok(CostParams::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let params: CostParams = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => bail!("cost config must end in .json or .toml: {}", path.display()),
    };
    params.validate()?;
    Ok(params)
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let params = cost_params(a.cost_config.as_deref())?;
    let model = load(&a.decode.model)?;
    let mut traces = Vec::with_capacity(a.schemes.len());
    for &scheme in &a.schemes {
        let mut cfg = run_config(scheme, &a.decode)?;
        cfg.capture = true;
        traces.push(specprefetch::run(&model, &cfg)?.trace);
    }
    let summaries = traces
        .iter()
        .map(|t| summarize(t, &params))
        .collect::<Result<Vec<_>>>()?;
    if let Some(csv) = &a.csv {
        build_report(&traces, &Metric::ALL, ExecutionStyle::SelectivePrefetch, &params)?.write_csv(csv)?;
    }
    let doc = json!({ "cost_params": params, "schemes": summaries });
    fs::write(&a.output, serde_json::to_vec_pretty(&doc)?)?;
    print_json(&doc)
}

pub fn report(a: ReportArgs) -> Result<()> {
    let params = cost_params(a.cost_config.as_deref())?;
    let traces = a
        .traces
        .iter()
        .map(|p| Trace::load(p).with_context(|| format!("loading trace {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let r: Report = build_report(&traces, &a.metrics, a.style, &params)?;
    if let Some(path) = &a.csv {
        r.write_csv(path)?;
    }
    if let Some(path) = &a.json {
        r.write_json(path)?;
    }
    if a.csv.is_none() && a.json.is_none() {
        let csv = r.to_csv()?;
        if let Err(e) = std::io::stdout().lock().write_all(csv.as_bytes()) {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(e.into());
            }
        }
    }
    Ok(())
}

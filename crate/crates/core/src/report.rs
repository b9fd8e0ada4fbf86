//! Flat CSV/JSON reports over one or more traces.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cost::{simulate_run, CostParams, ExecutionStyle};
use crate::engine::Trace;
use crate::error::{Error, Result};
use crate::metrics::{head_cosine, head_recall, per_layer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bytes,
    Cosine,
    Recall,
    Latency,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bytes, Metric::Cosine, Metric::Recall, Metric::Latency];
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bytes" => Ok(Self::Bytes),
            "cosine" => Ok(Self::Cosine),
            "recall" => Ok(Self::Recall),
            "latency" => Ok(Self::Latency),
            other => Err(Error::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bytes => "bytes",
            Self::Cosine => "cosine",
            Self::Recall => "recall",
            Self::Latency => "latency",
        })
    }
}

/// One (trace, iteration, layer) line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scheme: String,
    pub iteration: usize,
    pub layer: usize,
    pub bytes: u64,
    /// Mean fetched rows per head.
    pub n_selected: f64,
    pub cosine: Option<f64>,
    pub recall: Option<f64>,
    pub load_s: Option<f64>,
    pub attention_s: Option<f64>,
    pub ffn_s: Option<f64>,
    pub exposed_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeTotal {
    pub scheme: String,
    pub total_bytes: u64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub totals: Vec<SchemeTotal>,
}

/// Builds one row per trace, iteration and layer, in that order. An empty
/// metric list yields no rows.
pub fn report(traces: &[Trace], metrics: &[Metric], style: ExecutionStyle, params: &CostParams) -> Result<Report> {
    let mut rows = Vec::new();
    if !metrics.is_empty() {
        for trace in traces {
            let cosine = metrics
                .contains(&Metric::Cosine)
                .then(|| per_layer(trace, head_cosine))
                .transpose()?;
            let recall = metrics
                .contains(&Metric::Recall)
                .then(|| per_layer(trace, head_recall))
                .transpose()?;
            let latency = metrics
                .contains(&Metric::Latency)
                .then(|| simulate_run(&trace.work(), style, params))
                .transpose()?;
            for (i, it) in trace.iterations.iter().enumerate() {
                for (l, layer) in it.layers.iter().enumerate() {
                    let block = latency.as_ref().map(|lat| lat.iterations[i].blocks[l]);
                    rows.push(ReportRow {
                        scheme: trace.config.scheme.to_string(),
                        iteration: it.iteration,
                        layer: layer.layer,
                        bytes: layer.bytes_moved,
                        n_selected: layer.mean_selected(),
                        cosine: cosine.as_ref().and_then(|c| c[i][l]),
                        recall: recall.as_ref().and_then(|r| r[i][l]),
                        load_s: block.map(|b| b.load_s),
                        attention_s: block.map(|b| b.attention_s),
                        ffn_s: block.map(|b| b.ffn_s),
                        exposed_s: block.map(|b| b.exposed_s),
                    });
                }
            }
        }
    }

    let mut totals: Vec<SchemeTotal> = Vec::new();
    for row in &rows {
        match totals.iter_mut().find(|t| t.scheme == row.scheme) {
            Some(t) => {
                t.total_bytes += row.bytes;
                t.rows += 1;
            }
            None => totals.push(SchemeTotal {
                scheme: row.scheme.clone(),
                total_bytes: row.bytes,
                rows: 1,
            }),
        }
    }
    Ok(Report { rows, totals })
}

const CSV_HEADER: [&str; 11] = [
    "scheme",
    "iteration",
    "layer",
    "bytes",
    "n_selected",
    "cosine",
    "recall",
    "load_s",
    "attention_s",
    "ffn_s",
    "exposed_s",
];

impl Report {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn from_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run, RunConfig, Scheme};
    use crate::model::{Model, ModelSpec};
    use crate::skew::skew_model;

    fn trace(capture: bool) -> Trace {
        let spec = ModelSpec::new(2, 16, 2).with_ffn_dim(32).with_outliers(1, 3.0);
        let m = skew_model(&Model::generate_synthetic(&spec).unwrap(), 0).unwrap();
        let mut cfg = RunConfig::new(Scheme::Infinigen, 12, 3);
        cfg.capture = capture;
        run(&m, &cfg).unwrap().trace
    }

    #[test]
    fn empty_metrics_give_header_only() {
        let r = report(
            &[trace(false)],
            &[],
            ExecutionStyle::SelectivePrefetch,
            &CostParams::default(),
        )
        .unwrap();
        assert_eq!(r.to_csv().unwrap(), CSV_HEADER.join(",") + "\n");
        assert!(r.totals.is_empty());
    }

    #[test]
    fn identical_traces_identical_reports() {
        let t = trace(true);
        let a = report(
            std::slice::from_ref(&t),
            &Metric::ALL,
            ExecutionStyle::SelectivePrefetch,
            &CostParams::default(),
        )
        .unwrap();
        let b = report(
            &[t],
            &Metric::ALL,
            ExecutionStyle::SelectivePrefetch,
            &CostParams::default(),
        )
        .unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap());
        assert_eq!(a.rows.len(), 3 * 2);
        assert!(a
            .rows
            .iter()
            .all(|r| r.cosine.is_some() && r.recall.is_some() && r.load_s.is_some()));
    }

    #[test]
    fn totals_sum_rows() {
        let t = trace(false);
        let mut other = t.clone();
        other.config.scheme = Scheme::Full;
        let r = report(
            &[t, other],
            &[Metric::Bytes],
            ExecutionStyle::SelectivePrefetch,
            &CostParams::default(),
        )
        .unwrap();
        for total in &r.totals {
            let sum: u64 = r
                .rows
                .iter()
                .filter(|x| x.scheme == total.scheme)
                .map(|x| x.bytes)
                .sum();
            assert_eq!(sum, total.total_bytes);
        }
        assert_eq!(r.totals.len(), 2);
        assert!(r.rows.iter().all(|x| x.cosine.is_none()));
    }

    #[test]
    fn csv_round_trips() {
        let r = report(
            &[trace(true)],
            &Metric::ALL,
            ExecutionStyle::SelectivePrefetch,
            &CostParams::default(),
        )
        .unwrap();
        let back = Report::from_csv(&r.to_csv().unwrap()).unwrap();
        assert_eq!(back.len(), r.rows.len());
        for (a, b) in back.iter().zip(&r.rows) {
            assert_eq!(a.bytes, b.bytes);
            assert_eq!(a.scheme, b.scheme);
            assert_eq!(a.cosine, b.cosine);
        }
    }
}

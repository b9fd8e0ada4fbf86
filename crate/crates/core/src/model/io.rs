use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::skew::{HeadSkew, SkewSet};
use crate::tensor::Matrix;

pub const MODEL_FORMAT: &str = "specprefetch-model";
pub const MODEL_VERSION: u32 = 1;

/// One entry of the tensor table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// JSON side of a model file. The payload is a raw little-endian f32 file
/// next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub skewed: bool,
    pub payload: String,
    pub tensors: Vec<ManifestTensor>,
}

fn layer_tensors(l: usize, w: &LayerWeights) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    for (name, m) in [
        ("w_q", &w.w_q),
        ("w_k", &w.w_k),
        ("w_v", &w.w_v),
        ("w_o", &w.w_o),
        ("ffn_in", &w.ffn_in),
        ("ffn_out", &w.ffn_out),
    ] {
        out.push((format!("layers.{l}.{name}"), vec![m.rows(), m.cols()], m.data()));
    }
    for (name, v) in [
        ("ln1_gain", &w.ln1_gain),
        ("ln1_bias", &w.ln1_bias),
        ("ln2_gain", &w.ln2_gain),
        ("ln2_bias", &w.ln2_bias),
    ] {
        out.push((format!("layers.{l}.{name}"), vec![v.len()], v.as_slice()));
    }
    out
}

fn skew_tensors(skew: &SkewSet) -> Vec<(String, Vec<usize>, &[f32])> {
    let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    for (l, heads) in skew.layers.iter().enumerate() {
        for (h, hs) in heads.iter().enumerate() {
            out.push((format!("skew.{l}.{h}.a"), vec![hs.a.rows(), hs.a.cols()], hs.a.data()));
            out.push((format!("skew.{l}.{h}.sigma"), vec![hs.sigma.len()], hs.sigma.as_slice()));
        }
    }
    out
}

/// Path of the payload written next to `manifest`.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `model` as a JSON manifest at `path` plus a `.bin` payload.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    for (l, w) in model.layers.iter().enumerate() {
        entries.extend(layer_tensors(l, w));
    }
    if let Some(skew) = &model.skew {
        entries.extend(skew_tensors(skew));
    }

    let mut bytes = Vec::new();
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, shape, data) in entries {
        let offset = bytes.len() as u64;
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(ManifestTensor {
            name,
            shape,
            offset,
            length: bytes.len() as u64 - offset,
        });
    }

    let payload = payload_path(path);
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        spec: model.spec.clone(),
        skewed: model.is_skewed(),
        payload: payload
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::invalid(format!("bad model path {}", path.display())))?
            .to_string(),
        tensors,
    };
    fs::write(&payload, bytes)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

struct Payload<'a> {
    manifest: &'a ModelManifest,
    bytes: Vec<u8>,
}

impl Payload<'_> {
    fn tensor(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(Error::Validation(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape, shape
            )));
        }
        let expected = 4 * shape.iter().product::<usize>() as u64;
        if entry.length != expected {
            return Err(Error::PayloadSize {
                what: name.into(),
                expected,
                actual: entry.length,
            });
        }
        let end = entry.offset.saturating_add(entry.length);
        if end > self.bytes.len() as u64 {
            return Err(Error::PayloadSize {
                what: name.into(),
                expected: end,
                actual: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[entry.offset as usize..end as usize];
        Ok(slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::new(rows, cols, self.tensor(name, &[rows, cols])?)
    }
}

/// Reads a manifest and its payload.
pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Manifest(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != MODEL_VERSION {
        return Err(Error::Manifest(format!("unsupported version {}", manifest.version)));
    }
    manifest.spec.validate()?;

    let payload_file = path.parent().unwrap_or_else(|| Path::new(".")).join(&manifest.payload);
    let bytes = fs::read(&payload_file)?;
    let table_end = manifest
        .tensors
        .iter()
        .map(|t| t.offset.saturating_add(t.length))
        .max()
        .unwrap_or(0);
    if table_end != bytes.len() as u64 {
        return Err(Error::PayloadSize {
            what: manifest.payload.clone(),
            expected: table_end,
            actual: bytes.len() as u64,
        });
    }
    let p = Payload {
        manifest: &manifest,
        bytes,
    };

    let spec = &manifest.spec;
    let (d, f) = (spec.model_dim, spec.ffn_dim);
    let mut layers = Vec::with_capacity(spec.layers);
    for l in 0..spec.layers {
        let name = |n: &str| format!("layers.{l}.{n}");
        layers.push(LayerWeights {
            w_q: p.matrix(&name("w_q"), d, d)?,
            w_k: p.matrix(&name("w_k"), d, d)?,
            w_v: p.matrix(&name("w_v"), d, d)?,
            w_o: p.matrix(&name("w_o"), d, d)?,
            ffn_in: p.matrix(&name("ffn_in"), d, f)?,
            ffn_out: p.matrix(&name("ffn_out"), f, d)?,
            ln1_gain: p.tensor(&name("ln1_gain"), &[d])?,
            ln1_bias: p.tensor(&name("ln1_bias"), &[d])?,
            ln2_gain: p.tensor(&name("ln2_gain"), &[d])?,
            ln2_bias: p.tensor(&name("ln2_bias"), &[d])?,
        });
    }
    let mut model = Model::new(spec.clone(), layers)?;

    if manifest.skewed {
        let hd = spec.head_dim;
        let mut skew = SkewSet {
            layers: Vec::with_capacity(spec.layers),
        };
        for l in 0..spec.layers {
            let mut heads = Vec::with_capacity(spec.heads);
            for h in 0..spec.heads {
                heads.push(HeadSkew {
                    a: p.matrix(&format!("skew.{l}.{h}.a"), hd, hd)?,
                    sigma: p.tensor(&format!("skew.{l}.{h}.sigma"), &[hd])?,
                });
            }
            skew.layers.push(heads);
        }
        skew.validate(spec)?;
        model.skew = Some(skew);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_prompt;

    fn model() -> Model {
        let spec = ModelSpec::new(2, 16, 2)
            .with_ffn_dim(24)
            .with_outliers(2, 4.0)
            .with_seed(3);
        Model::generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = model();
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(m, back);
        let x = random_prompt(4, 16, 9);
        assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn truncated_payload_is_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&model(), &path).unwrap();
        let bin = payload_path(&path);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::PayloadSize { .. })));
    }

    #[test]
    fn inconsistent_head_dim_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&model(), &path).unwrap();
        let mut manifest: ModelManifest = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        manifest.spec.head_dim = 7;
        fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn garbage_manifest_is_manifest_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, b"{\"format\": 3").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Manifest(_))));
    }
}

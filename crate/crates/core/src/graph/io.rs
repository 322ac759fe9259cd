//! Model files: a JSON manifest (layers, hyper-parameters, tensor table with
//! byte offsets and SHA-256 checksums) next to one raw blob of
//! little-endian `f64` values in manifest order.

use super::{LayerKind, LayerSpec, ModelGraph, Shape3};
use crate::bn::BNParams;
use crate::error::{Error, Result};
use crate::quant::QuantPoint;
use crate::tensor::{ConvParams, DepthwiseConvParams, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const MODEL_FORMAT: &str = "pfq-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    input_shape: Shape3,
    blob: String,
    blob_bytes: u64,
    layers: Vec<LayerRecord>,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    #[serde(flatten)]
    kind: KindRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_quant: Option<QuantPoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum KindRecord {
    Conv {
        stride: [usize; 2],
        padding: [usize; 2],
        weights: String,
        bias: Option<String>,
    },
    DepthwiseConv {
        stride: [usize; 2],
        padding: [usize; 2],
        weights: String,
        bias: Option<String>,
    },
    Affine {
        weights: String,
        bias: String,
    },
    Bn {
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
        epsilon: f64,
        rho: f64,
    },
    Relu,
    Relu6,
    GlobalAvgPool,
    AddJunction {
        inputs: [String; 2],
    },
    QuantPoint {
        quant: QuantPoint,
    },
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
    records: Vec<TensorRecord>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f64]) -> String {
        let offset = self.bytes.len() as u64;
        let start = self.bytes.len();
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        let sha = hex::encode(Sha256::digest(&self.bytes[start..]));
        self.records.push(TensorRecord {
            name: name.clone(),
            shape,
            offset,
            bytes: (self.bytes.len() - start) as u64,
            sha256: sha,
        });
        name
    }

    fn tensor(&mut self, name: String, t: &Tensor) -> String {
        self.push(name, t.shape().to_vec(), t.data())
    }

    fn vector(&mut self, name: String, v: &[f64]) -> String {
        self.push(name, vec![v.len()], v)
    }
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `path` (manifest) and a sibling `.bin` blob.
pub fn save_model(graph: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    graph.validate()?;
    let mut blob = BlobWriter::default();
    let mut layers = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let n = &layer.name;
        let kind = match &layer.kind {
            LayerKind::Conv {
                params,
                stride,
                padding,
            } => KindRecord::Conv {
                stride: [stride.0, stride.1],
                padding: [padding.0, padding.1],
                weights: blob.tensor(format!("{n}.weights"), &params.weights),
                bias: params.bias.as_ref().map(|b| blob.vector(format!("{n}.bias"), b)),
            },
            LayerKind::DepthwiseConv {
                params,
                stride,
                padding,
            } => KindRecord::DepthwiseConv {
                stride: [stride.0, stride.1],
                padding: [padding.0, padding.1],
                weights: blob.tensor(format!("{n}.weights"), &params.weights),
                bias: params.bias.as_ref().map(|b| blob.vector(format!("{n}.bias"), b)),
            },
            LayerKind::Affine { weights, bias } => KindRecord::Affine {
                weights: blob.tensor(format!("{n}.weights"), weights),
                bias: blob.vector(format!("{n}.bias"), bias),
            },
            LayerKind::BatchNorm(bn) => KindRecord::Bn {
                gamma: blob.vector(format!("{n}.gamma"), &bn.gamma),
                beta: blob.vector(format!("{n}.beta"), &bn.beta),
                running_mean: blob.vector(format!("{n}.running_mean"), &bn.running_mean),
                running_var: blob.vector(format!("{n}.running_var"), &bn.running_var),
                epsilon: bn.epsilon,
                rho: bn.rho,
            },
            LayerKind::Relu => KindRecord::Relu,
            LayerKind::Relu6 => KindRecord::Relu6,
            LayerKind::GlobalAvgPool => KindRecord::GlobalAvgPool,
            LayerKind::AddJunction { lhs, rhs } => KindRecord::AddJunction {
                inputs: [lhs.clone(), rhs.clone()],
            },
            LayerKind::QuantPoint(qp) => KindRecord::QuantPoint { quant: qp.clone() },
        };
        layers.push(LayerRecord {
            name: n.clone(),
            kind,
            weight_quant: layer.weight_quant.clone(),
        });
    }
    let blob_path = blob_path_for(path);
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Malformed(format!("bad model path {}", path.display())))?
        .to_string();
    let manifest = Manifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input_shape: graph.input_shape,
        blob: blob_name,
        blob_bytes: blob.bytes.len() as u64,
        layers,
        tensors: blob.records,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob_path, &blob.bytes)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

struct BlobReader {
    values: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl BlobReader {
    fn take(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        self.values
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Malformed(format!("manifest references missing tensor `{name}`")))
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (shape, data) = self.take(name)?;
        Tensor::new(shape, data).map_err(|e| Error::Malformed(e.to_string()))
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let (shape, data) = self.take(name)?;
        if shape.len() != 1 {
            return Err(Error::Malformed(format!("`{name}` should be a vector, has shape {shape:?}")));
        }
        Ok(data)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::Malformed(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != MODEL_VERSION {
        return Err(Error::Version {
            expected: MODEL_VERSION,
            found: manifest.version,
        });
    }
    let blob_path = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_path)?;

    let mut values = HashMap::new();
    for rec in &manifest.tensors {
        let start = rec.offset as usize;
        let end = start.saturating_add(rec.bytes as usize);
        let Some(slice) = bytes.get(start..end) else {
            return Err(Error::Checksum(rec.name.clone()));
        };
        if hex::encode(Sha256::digest(slice)) != rec.sha256 {
            return Err(Error::Checksum(rec.name.clone()));
        }
        if slice.len() % 8 != 0 {
            return Err(Error::Malformed(format!("`{}` is not a whole number of f64", rec.name)));
        }
        let data: Vec<f64> = slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        values.insert(rec.name.clone(), (rec.shape.clone(), data));
    }
    if bytes.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checksum(manifest.blob.clone()));
    }
    let blob = BlobReader { values };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for rec in manifest.layers {
        let kind = match rec.kind {
            KindRecord::Conv {
                stride,
                padding,
                weights,
                bias,
            } => LayerKind::Conv {
                params: ConvParams::new(
                    blob.tensor(&weights)?,
                    bias.map(|b| blob.vector(&b)).transpose()?,
                )?,
                stride: (stride[0], stride[1]),
                padding: (padding[0], padding[1]),
            },
            KindRecord::DepthwiseConv {
                stride,
                padding,
                weights,
                bias,
            } => LayerKind::DepthwiseConv {
                params: DepthwiseConvParams::new(
                    blob.tensor(&weights)?,
                    bias.map(|b| blob.vector(&b)).transpose()?,
                )?,
                stride: (stride[0], stride[1]),
                padding: (padding[0], padding[1]),
            },
            KindRecord::Affine { weights, bias } => LayerKind::Affine {
                weights: blob.tensor(&weights)?,
                bias: blob.vector(&bias)?,
            },
            KindRecord::Bn {
                gamma,
                beta,
                running_mean,
                running_var,
                epsilon,
                rho,
            } => LayerKind::BatchNorm(BNParams {
                gamma: blob.vector(&gamma)?,
                beta: blob.vector(&beta)?,
                running_mean: blob.vector(&running_mean)?,
                running_var: blob.vector(&running_var)?,
                epsilon,
                rho,
            }),
            KindRecord::Relu => LayerKind::Relu,
            KindRecord::Relu6 => LayerKind::Relu6,
            KindRecord::GlobalAvgPool => LayerKind::GlobalAvgPool,
            KindRecord::AddJunction { inputs: [lhs, rhs] } => LayerKind::AddJunction { lhs, rhs },
            KindRecord::QuantPoint { quant } => LayerKind::QuantPoint(quant),
        };
        layers.push(LayerSpec {
            name: rec.name,
            kind,
            weight_quant: rec.weight_quant,
        });
    }
    ModelGraph::new(manifest.input_shape, layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelGraph {
        let params =
            ConvParams::new(Tensor::from_fn(&[2, 1, 1, 1], |i| i as f64 + 0.1), Some(vec![0.3, -0.2]))
                .unwrap();
        ModelGraph::new(
            [1, 2, 2],
            vec![LayerSpec::new(
                "c",
                LayerKind::Conv {
                    params,
                    stride: (1, 1),
                    padding: (0, 0),
                },
            )],
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&tiny(), &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), tiny());
    }

    #[test]
    fn truncated_blob_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&tiny(), &p).unwrap();
        let bin = p.with_extension("bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Checksum(_))));
    }

    #[test]
    fn corrupted_byte_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&tiny(), &p).unwrap();
        let bin = p.with_extension("bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Checksum(_))));
    }

    #[test]
    fn missing_tensor_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&tiny(), &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["layers"][0]["bias"] = "c.nope".into();
        fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Malformed(_))));

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["version"] = 99.into();
        fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Version { found: 99, .. })));

        fs::write(&p, "{ not json").unwrap();
        assert!(matches!(load_model(&p), Err(Error::Malformed(_))));
    }
}

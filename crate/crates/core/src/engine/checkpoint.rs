//! Parameter checkpoints: `model.json` plus one little-endian f32 blob per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::layer::{BatchNorm1d, Conv1d, Dense, Layer, LayerKind, LayerSpec, Node, Shortcut, ValueShape};
use crate::engine::network::Network;
use crate::error::{Error, LoadError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(flatten)]
    pub spec: LayerSpec,
    #[serde(default)]
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub input_shape: ValueShape,
    pub class_names: Vec<String>,
    pub layers: Vec<LayerRecord>,
}

pub fn write_f32le(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` values (or the whole file when `None`).
/// Text of a format manifest; a missing file is a load error naming it.
pub(crate) fn read_manifest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(LoadError::MissingBlob { path: path.to_path_buf() }.into());
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_f32le(path: &Path, expected: Option<usize>) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(LoadError::MissingBlob { path: path.to_path_buf() }.into());
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = match expected {
        Some(n) => {
            if bytes.len() != n * 4 {
                return Err(LoadError::TruncatedBlob {
                    path: path.to_path_buf(),
                    expected: (n * 4) as u64,
                    actual: bytes.len() as u64,
                }
                .into());
            }
            n
        }
        None => {
            if bytes.len() % 4 != 0 {
                return Err(LoadError::TruncatedBlob {
                    path: path.to_path_buf(),
                    expected: (bytes.len() / 4 * 4 + 4) as u64,
                    actual: bytes.len() as u64,
                }
                .into());
            }
            bytes.len() / 4
        }
    };
    Ok(bytes[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' }).collect()
}

pub fn save_checkpoint(net: &Network<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::new();
    let mut counter = 0usize;
    for (node, spec) in net.nodes().iter().zip(net.specs()) {
        let tensors: Vec<(&str, &Tensor<f32>)> = match &node.layer {
            Layer::Conv1d(c) => vec![("weight", &c.weight), ("bias", &c.bias)],
            Layer::BatchNorm1d(b) => vec![
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ],
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            _ => vec![],
        };
        let mut params = Vec::new();
        for (pname, t) in tensors {
            let file = format!("{counter:03}_{}.{pname}.f32le", sanitize(&node.name));
            counter += 1;
            write_f32le(&dir.join(&file), t.data())?;
            params.push(ParamRecord { name: pname.to_string(), shape: t.shape().to_vec(), file });
        }
        layers.push(LayerRecord { spec, params });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        input_shape: net.input_shape(),
        class_names: net.class_names().to_vec(),
        layers,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    LoadError::MalformedManifest { path: path.to_path_buf(), reason: reason.into() }.into()
}

pub fn load_checkpoint(dir: &Path) -> Result<Network<f32>> {
    let path = dir.join(MANIFEST_NAME);
    let text = read_manifest(&path)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| malformed(&path, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(LoadError::Version { path, found: manifest.version }.into());
    }
    let mut shapes = vec![manifest.input_shape];
    let mut nodes = Vec::with_capacity(manifest.layers.len());
    for rec in &manifest.layers {
        let spec = &rec.spec;
        let tensor = |pname: &str| -> Result<Tensor<f32>> {
            let p = rec
                .params
                .iter()
                .find(|p| p.name == pname)
                .ok_or_else(|| malformed(&path, format!("layer `{}` lacks parameter `{pname}`", spec.name)))?;
            let numel = p.shape.iter().product();
            let data = read_f32le(&dir.join(&p.file), Some(numel))?;
            Tensor::new(p.shape.clone(), data).map_err(|e| malformed(&path, e.to_string()))
        };
        let need = |v: Option<usize>, what: &str| {
            v.ok_or_else(|| malformed(&path, format!("layer `{}` lacks `{what}`", spec.name)))
        };
        let layer = match spec.kind {
            LayerKind::Conv1d => {
                let weight = tensor("weight")?;
                let bias = tensor("bias")?;
                let [out_channels, in_channels, kernel] = weight.shape() else {
                    return Err(malformed(&path, format!("layer `{}` weight must be 3-d", spec.name)));
                };
                Layer::Conv1d(Conv1d {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: need(spec.kernel, "kernel").and_then(|k| {
                        if k == *kernel {
                            Ok(k)
                        } else {
                            Err(malformed(&path, format!("layer `{}` kernel mismatch", spec.name)))
                        }
                    })?,
                    stride: need(spec.stride, "stride")?,
                    padding: need(spec.padding, "padding")?,
                    weight,
                    bias,
                })
            }
            LayerKind::Batchnorm1d => {
                let gamma = tensor("gamma")?;
                Layer::BatchNorm1d(BatchNorm1d {
                    channels: gamma.numel(),
                    eps: spec.eps.unwrap_or(1e-5),
                    momentum: spec.momentum.unwrap_or(0.1),
                    gamma,
                    beta: tensor("beta")?,
                    running_mean: tensor("running_mean")?,
                    running_var: tensor("running_var")?,
                })
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::AddResidual => {
                let skip = *spec
                    .inputs
                    .get(1)
                    .and_then(|&v| shapes.get(v))
                    .ok_or_else(|| malformed(&path, format!("layer `{}` has a dangling skip input", spec.name)))?;
                let in_channels = match skip {
                    ValueShape::Seq { channels, .. } => channels,
                    ValueShape::Flat { features } => features,
                };
                let out_channels = match spec.out_shape {
                    ValueShape::Seq { channels, .. } => channels,
                    ValueShape::Flat { features } => features,
                };
                Layer::AddResidual(Shortcut { stride: need(spec.stride, "stride")?, in_channels, out_channels })
            }
            LayerKind::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerKind::Dense => {
                let weight = tensor("weight")?;
                let [out_features, in_features] = weight.shape() else {
                    return Err(malformed(&path, format!("layer `{}` weight must be 2-d", spec.name)));
                };
                let (out_features, in_features) = (*out_features, *in_features);
                Layer::Dense(Dense { in_features, out_features, weight, bias: tensor("bias")? })
            }
            LayerKind::Softmax => Layer::Softmax,
        };
        shapes.push(spec.out_shape);
        nodes.push(Node::new(spec.name.clone(), layer, spec.inputs.clone()));
    }
    let net = Network::new(manifest.input_shape, nodes, manifest.class_names)?;
    for (i, rec) in manifest.layers.iter().enumerate() {
        if net.value_shape(i + 1) != rec.spec.out_shape {
            return Err(malformed(&path, format!("layer `{}` declared shape disagrees with graph", rec.spec.name)));
        }
    }
    Ok(net)
}

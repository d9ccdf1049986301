//! Model file format.
//!
//! A model is a JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "input_shape": [60],
//!   "zero_bias": true,
//!   "layers": [ {"kind": "dense", "weight": {"shape": [60, 100], "data": "..."}, "bias": null}, ... ],
//!   "meta": { ... }
//! }
//! ```
//!
//! Weight and bias blobs are little-endian `f64`, base64-encoded. `meta` is an
//! optional free-form object (the CLI stores benchmark seeds there). Loading
//! rejects unknown `format_version` values and unknown layer kinds, and
//! verifies the `zero_bias` flag against the stored biases.

use crate::codec::TensorRepr;
use crate::error::{Error, Result};
use crate::network::{Layer, NetworkGraph};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FORMAT_VERSION: u32 = 1;

const KNOWN_KINDS: [&str; 9] = [
    "dense",
    "conv2d",
    "relu",
    "max_pool",
    "min_pool",
    "sum_pool",
    "shift",
    "branch_max",
    "linear_projection",
];

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    input_shape: Vec<usize>,
    zero_bias: bool,
    layers: Vec<LayerRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerRepr {
    Dense {
        weight: TensorRepr,
        bias: Option<TensorRepr>,
    },
    Conv2d {
        weight: TensorRepr,
        bias: Option<TensorRepr>,
        stride: [usize; 2],
    },
    Relu,
    MaxPool {
        window: Vec<usize>,
        stride: Vec<usize>,
    },
    MinPool {
        window: Vec<usize>,
        stride: Vec<usize>,
    },
    SumPool {
        window: Vec<usize>,
        stride: Vec<usize>,
    },
    Shift {
        offset: Vec<isize>,
    },
    BranchMax {
        branches: usize,
    },
    LinearProjection {
        weight: TensorRepr,
    },
}

fn layer_to_repr(layer: &Layer) -> LayerRepr {
    match layer {
        Layer::Dense { weight, bias } => LayerRepr::Dense {
            weight: TensorRepr::from_tensor(weight),
            bias: bias.as_ref().map(TensorRepr::from_tensor),
        },
        Layer::Conv2D { weight, bias, stride } => LayerRepr::Conv2d {
            weight: TensorRepr::from_tensor(weight),
            bias: bias.as_ref().map(TensorRepr::from_tensor),
            stride: [stride.0, stride.1],
        },
        Layer::ReLU => LayerRepr::Relu,
        Layer::MaxPool { window, stride } => LayerRepr::MaxPool {
            window: window.clone(),
            stride: stride.clone(),
        },
        Layer::MinPool { window, stride } => LayerRepr::MinPool {
            window: window.clone(),
            stride: stride.clone(),
        },
        Layer::SumPool { window, stride } => LayerRepr::SumPool {
            window: window.clone(),
            stride: stride.clone(),
        },
        Layer::Shift { offset } => LayerRepr::Shift {
            offset: offset.clone(),
        },
        Layer::BranchMax { branches } => LayerRepr::BranchMax {
            branches: *branches,
        },
        Layer::LinearProjection { weight } => LayerRepr::LinearProjection {
            weight: TensorRepr::from_tensor(weight),
        },
    }
}

fn layer_from_repr(repr: LayerRepr, index: usize) -> Result<Layer> {
    let ctx = |field: &str| format!("layers[{index}].{field}");
    Ok(match repr {
        LayerRepr::Dense { weight, bias } => Layer::Dense {
            weight: weight.to_tensor(&ctx("weight"))?,
            bias: bias.map(|b| b.to_tensor(&ctx("bias"))).transpose()?,
        },
        LayerRepr::Conv2d { weight, bias, stride } => Layer::Conv2D {
            weight: weight.to_tensor(&ctx("weight"))?,
            bias: bias.map(|b| b.to_tensor(&ctx("bias"))).transpose()?,
            stride: (stride[0], stride[1]),
        },
        LayerRepr::Relu => Layer::ReLU,
        LayerRepr::MaxPool { window, stride } => Layer::MaxPool { window, stride },
        LayerRepr::MinPool { window, stride } => Layer::MinPool { window, stride },
        LayerRepr::SumPool { window, stride } => Layer::SumPool { window, stride },
        LayerRepr::Shift { offset } => Layer::Shift { offset },
        LayerRepr::BranchMax { branches } => Layer::BranchMax { branches },
        LayerRepr::LinearProjection { weight } => Layer::LinearProjection {
            weight: weight.to_tensor(&ctx("weight"))?,
        },
    })
}

/// Serializes a graph to the model file format, with an optional `meta` block.
pub fn save_model_with_meta(net: &NetworkGraph, meta: Option<serde_json::Value>) -> Vec<u8> {
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        zero_bias: net.zero_bias(),
        layers: net.layers().iter().map(layer_to_repr).collect(),
        meta,
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("serializable");
    out.push(b'\n');
    out
}

/// Serializes a graph to the model file format.
pub fn save_model(net: &NetworkGraph) -> Vec<u8> {
    save_model_with_meta(net, None)
}

/// Parses a model file, rebuilding the graph and re-validating every shape.
pub fn load_model(bytes: &[u8]) -> Result<NetworkGraph> {
    let (net, _) = load_model_with_meta(bytes)?;
    Ok(net)
}

/// Like [`load_model`], also returning the optional `meta` block.
pub fn load_model_with_meta(bytes: &[u8]) -> Result<(NetworkGraph, Option<serde_json::Value>)> {
    let value: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::parse("model file", e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse("model file", "missing or non-integer `format_version`"))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::UnsupportedVersion(version as u32));
    }
    if let Some(layers) = value.get("layers").and_then(|l| l.as_array()) {
        for (i, l) in layers.iter().enumerate() {
            let kind = l
                .get("kind")
                .and_then(|k| k.as_str())
                .ok_or_else(|| Error::parse(format!("layers[{i}]"), "missing `kind`"))?;
            if !KNOWN_KINDS.contains(&kind) {
                return Err(Error::UnsupportedKind(kind.to_string()));
            }
        }
    }
    let file: ModelFile = serde_json::from_value(value)
        .map_err(|e| Error::parse("model file", e.to_string()))?;
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, r)| layer_from_repr(r, i))
        .collect::<Result<Vec<_>>>()?;
    let net = NetworkGraph::new(file.input_shape, layers)?;
    if file.zero_bias != net.zero_bias() {
        return Err(Error::parse(
            "model file",
            format!(
                "`zero_bias` flag is {} but stored biases say {}",
                file.zero_bias,
                net.zero_bias()
            ),
        ));
    }
    Ok((net, file.meta))
}

/// SHA-256 of the canonical serialized model, as lowercase hex.
pub fn model_hash(net: &NetworkGraph) -> String {
    let digest = Sha256::digest(save_model(net));
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

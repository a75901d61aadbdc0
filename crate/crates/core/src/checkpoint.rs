//! Checkpoint serialization: a JSON manifest describing the graph topology
//! plus a raw little-endian `f32` weight blob in declared node order.
//!
//! The format is deterministic: saving, loading, and saving again produces
//! byte-identical files. Corrupt manifests, truncated blobs, and shape
//! mismatches are reported as distinct errors and never yield a partial
//! model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, Conv2dParams, DenseParams, Padding};
use crate::netgraph::{ModelGraph, NodeOp, PortRef};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// Provenance recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected_metric: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyperparameters: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum ManifestOp {
    Conv2d {
        kernel_shape: Vec<usize>,
        padding: Padding,
        stride: [usize; 2],
        activation: Activation,
        frozen: bool,
    },
    Maxpool2d,
    Flatten,
    Dense {
        weight_shape: Vec<usize>,
        activation: Activation,
        frozen: bool,
    },
    Dropout {
        rate: f64,
    },
    Concat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestNode {
    name: String,
    /// `"input:<slot>"` or the name of an earlier node.
    inputs: Vec<String>,
    #[serde(flatten)]
    op: ManifestOp,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    input_shapes: Vec<Vec<usize>>,
    nodes: Vec<ManifestNode>,
    outputs: Vec<String>,
    output_names: Vec<String>,
    param_count: usize,
    trainable_param_count: usize,
    weight_floats: usize,
    meta: CheckpointMeta,
}

/// `<base>.manifest.json` / `<base>.weights.bin` path pair.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let stem = base.to_string_lossy();
    (
        PathBuf::from(format!("{stem}.manifest.json")),
        PathBuf::from(format!("{stem}.weights.bin")),
    )
}

fn port_to_string(graph: &ModelGraph, p: PortRef) -> String {
    match p {
        PortRef::Input(i) => format!("input:{i}"),
        PortRef::Node(id) => graph.nodes()[id].name.clone(),
    }
}

/// Writes the manifest/weights pair for a graph.
pub fn save_checkpoint(graph: &ModelGraph, base: &Path, meta: &CheckpointMeta) -> Result<()> {
    let (manifest_path, weights_path) = checkpoint_paths(base);
    let mut nodes = Vec::with_capacity(graph.nodes().len());
    let mut blob: Vec<u8> = Vec::new();
    let mut floats = 0usize;

    for node in graph.nodes() {
        let inputs = node
            .inputs
            .iter()
            .map(|&p| port_to_string(graph, p))
            .collect();
        let op = match &node.op {
            NodeOp::Conv2d { params, activation } => {
                for t in [&params.kernels, &params.bias] {
                    floats += t.len();
                    for &v in t.data() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ManifestOp::Conv2d {
                    kernel_shape: params.kernels.shape().to_vec(),
                    padding: params.padding,
                    stride: [params.stride.0, params.stride.1],
                    activation: *activation,
                    frozen: params.frozen,
                }
            }
            NodeOp::Dense { params } => {
                for t in [&params.weights, &params.bias] {
                    floats += t.len();
                    for &v in t.data() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ManifestOp::Dense {
                    weight_shape: params.weights.shape().to_vec(),
                    activation: params.activation,
                    frozen: params.frozen,
                }
            }
            NodeOp::MaxPool2d => ManifestOp::Maxpool2d,
            NodeOp::Flatten => ManifestOp::Flatten,
            NodeOp::Dropout { rate } => ManifestOp::Dropout { rate: *rate },
            NodeOp::Concat => ManifestOp::Concat,
        };
        nodes.push(ManifestNode {
            name: node.name.clone(),
            inputs,
            op,
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shapes: graph.input_shapes().to_vec(),
        nodes,
        outputs: graph
            .outputs()
            .iter()
            .map(|&id| graph.nodes()[id].name.clone())
            .collect(),
        output_names: graph.output_names().to_vec(),
        param_count: graph.param_count(false),
        trainable_param_count: graph.param_count(true),
        weight_floats: floats,
        meta: meta.clone(),
    };

    let mut json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Manifest(format!("serialize: {e}")))?;
    json.push(b'\n');
    std::fs::write(&manifest_path, json)?;
    std::fs::write(&weights_path, blob)?;
    Ok(())
}

/// Loads a manifest/weights pair back into a graph.
pub fn load_checkpoint(base: &Path) -> Result<(ModelGraph, CheckpointMeta)> {
    let (manifest_path, weights_path) = checkpoint_paths(base);
    let manifest_bytes = std::fs::read(&manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }

    let blob = std::fs::read(&weights_path)?;
    let expected_bytes = manifest.weight_floats * 4;
    if blob.len() < expected_bytes {
        return Err(Error::TruncatedBlob {
            expected: expected_bytes,
            found: blob.len(),
        });
    }
    if blob.len() > expected_bytes {
        return Err(Error::CheckpointShape(format!(
            "weight blob has {} bytes, manifest declares {expected_bytes}",
            blob.len()
        )));
    }

    let mut graph = ModelGraph::new(manifest.input_shapes.clone());
    let mut offset = 0usize;
    let mut take_tensor = |shape: &[usize]| -> Result<Tensor> {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let bytes: [u8; 4] = blob[offset..offset + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(bytes));
            offset += 4;
        }
        Tensor::from_vec(shape, data)
    };

    for mnode in &manifest.nodes {
        let inputs = mnode
            .inputs
            .iter()
            .map(|s| -> Result<PortRef> {
                if let Some(slot) = s.strip_prefix("input:") {
                    let i: usize = slot
                        .parse()
                        .map_err(|_| Error::Manifest(format!("bad input ref {s}")))?;
                    Ok(PortRef::Input(i))
                } else {
                    graph
                        .node_index(s)
                        .map(PortRef::Node)
                        .ok_or_else(|| Error::Manifest(format!("unknown node reference {s}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let op = match &mnode.op {
            ManifestOp::Conv2d {
                kernel_shape,
                padding,
                stride,
                activation,
                frozen,
            } => {
                if kernel_shape.len() != 4 {
                    return Err(Error::CheckpointShape(format!(
                        "conv kernel shape {kernel_shape:?} at node {}",
                        mnode.name
                    )));
                }
                let kernels = take_tensor(kernel_shape)?;
                let bias = take_tensor(&[kernel_shape[3]])?;
                NodeOp::Conv2d {
                    params: Conv2dParams {
                        kernels,
                        bias,
                        padding: *padding,
                        stride: (stride[0], stride[1]),
                        frozen: *frozen,
                    },
                    activation: *activation,
                }
            }
            ManifestOp::Dense {
                weight_shape,
                activation,
                frozen,
            } => {
                if weight_shape.len() != 2 {
                    return Err(Error::CheckpointShape(format!(
                        "dense weight shape {weight_shape:?} at node {}",
                        mnode.name
                    )));
                }
                let weights = take_tensor(weight_shape)?;
                let bias = take_tensor(&[weight_shape[1]])?;
                NodeOp::Dense {
                    params: DenseParams {
                        weights,
                        bias,
                        activation: *activation,
                        frozen: *frozen,
                    },
                }
            }
            ManifestOp::Maxpool2d => NodeOp::MaxPool2d,
            ManifestOp::Flatten => NodeOp::Flatten,
            ManifestOp::Dropout { rate } => NodeOp::Dropout { rate: *rate },
            ManifestOp::Concat => NodeOp::Concat,
        };
        graph
            .add_node(&mnode.name, op, inputs)
            .map_err(|e| Error::Manifest(format!("rebuilding node {}: {e}", mnode.name)))?;
    }

    for (out_name, display) in manifest.outputs.iter().zip(&manifest.output_names) {
        let id = graph
            .node_index(out_name)
            .ok_or_else(|| Error::Manifest(format!("unknown output node {out_name}")))?;
        graph.mark_output(id, display)?;
    }

    if graph.param_count(false) != manifest.param_count {
        return Err(Error::CheckpointShape(format!(
            "rebuilt graph has {} params, manifest declares {}",
            graph.param_count(false),
            manifest.param_count
        )));
    }
    if offset != blob.len() {
        return Err(Error::CheckpointShape(format!(
            "blob has {} unread bytes",
            blob.len() - offset
        )));
    }
    graph
        .infer_shapes()
        .map_err(|e| Error::CheckpointShape(format!("rebuilt graph is inconsistent: {e}")))?;

    Ok((graph, manifest.meta))
}

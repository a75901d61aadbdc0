//! Model graphs: DAG construction, the dual-branch model, dense-to-conv head
//! surgery, the unified final model, freeze masks, and the parameter audit.
//!
//! Graphs are built node-by-node in topological order (edges may only point
//! backwards), so they are acyclic by construction. The dual model has two
//! inputs and two outputs; the final model has one of each.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    self, Activation, Conv2dParams, DenseParams, DropoutMask, DropoutMode, Padding, PoolRecord,
};
use crate::rng::RngStream;
use crate::tensor::{flatten_index, he_normal_init, zeros_init, Tensor};

pub type NodeId = usize;

/// Where a node reads its value from: a graph input slot or an earlier node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortRef {
    Input(usize),
    Node(NodeId),
}

#[derive(Clone, Debug)]
pub enum NodeOp {
    Conv2d {
        params: Conv2dParams,
        activation: Activation,
    },
    MaxPool2d,
    Flatten,
    Dense {
        params: DenseParams,
    },
    Dropout {
        rate: f64,
    },
    Concat,
}

impl NodeOp {
    pub fn kind(&self) -> &'static str {
        match self {
            NodeOp::Conv2d { .. } => "conv2d",
            NodeOp::MaxPool2d => "maxpool2d",
            NodeOp::Flatten => "flatten",
            NodeOp::Dense { .. } => "dense",
            NodeOp::Dropout { .. } => "dropout",
            NodeOp::Concat => "concat",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, NodeOp::Conv2d { .. } | NodeOp::Dense { .. })
    }

    pub fn param_count(&self) -> usize {
        match self {
            NodeOp::Conv2d { params, .. } => params.kernels.len() + params.bias.len(),
            NodeOp::Dense { params } => params.weights.len() + params.bias.len(),
            _ => 0,
        }
    }

    pub fn frozen(&self) -> bool {
        match self {
            NodeOp::Conv2d { params, .. } => params.frozen,
            NodeOp::Dense { params } => params.frozen,
            _ => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<PortRef>,
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    input_shapes: Vec<Vec<usize>>,
    outputs: Vec<NodeId>,
    output_names: Vec<String>,
}

/// Per-node trainability; `true` means the node's parameters receive updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(graph: &ModelGraph) -> Self {
        Self {
            trainable: vec![true; graph.nodes.len()],
        }
    }

    pub fn all_frozen(graph: &ModelGraph) -> Self {
        Self {
            trainable: vec![false; graph.nodes.len()],
        }
    }

    /// Only the named nodes stay trainable.
    pub fn trainable_only(graph: &ModelGraph, names: &[&str]) -> Result<Self> {
        let mut mask = Self::all_frozen(graph);
        for name in names {
            let idx = graph
                .node_index(name)
                .ok_or_else(|| Error::Config(format!("no node named {name}")))?;
            mask.trainable[idx] = true;
        }
        Ok(mask)
    }
}

/// Parameter gradients for one node.
#[derive(Clone, Debug)]
pub struct ParamGradPair {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients for every trainable node of a graph, aligned by node index.
#[derive(Clone, Debug)]
pub struct GraphGrads {
    pub by_node: Vec<Option<ParamGradPair>>,
}

impl GraphGrads {
    pub fn zeros_like(graph: &ModelGraph) -> Self {
        Self {
            by_node: graph
                .nodes
                .iter()
                .map(|n| match &n.op {
                    NodeOp::Conv2d { params, .. } => Some(ParamGradPair {
                        weights: Tensor::zeros(params.kernels.shape()),
                        bias: Tensor::zeros(params.bias.shape()),
                    }),
                    NodeOp::Dense { params } => Some(ParamGradPair {
                        weights: Tensor::zeros(params.weights.shape()),
                        bias: Tensor::zeros(params.bias.shape()),
                    }),
                    _ => None,
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GraphGrads) {
        for (dst, src) in self.by_node.iter_mut().zip(&other.by_node) {
            if let (Some(d), Some(s)) = (dst, src) {
                for (a, b) in d.weights.data_mut().iter_mut().zip(s.weights.data()) {
                    *a += b;
                }
                for (a, b) in d.bias.data_mut().iter_mut().zip(s.bias.data()) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.by_node.iter_mut().flatten() {
            for v in g.weights.data_mut() {
                *v *= s;
            }
            for v in g.bias.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Execution mode for a traced forward pass.
#[derive(Clone, Debug)]
pub enum ExecMode {
    Infer,
    /// Dropout draws from `RngStream(seed, "{scope}/{node_name}")`.
    Train {
        dropout_seed: u64,
        dropout_scope: String,
    },
}

enum NodeCache {
    None,
    Pool(PoolRecord),
    Drop(Option<DropoutMask>),
}

/// Values recorded by a traced forward pass, consumed by `backward`.
pub struct ForwardTrace {
    inputs: Vec<Tensor>,
    node_outputs: Vec<Tensor>,
    caches: Vec<NodeCache>,
}

impl ForwardTrace {
    pub fn outputs(&self, graph: &ModelGraph) -> Vec<Tensor> {
        graph
            .outputs
            .iter()
            .map(|&id| self.node_outputs[id].clone())
            .collect()
    }

    pub fn output(&self, graph: &ModelGraph, idx: usize) -> &Tensor {
        &self.node_outputs[graph.outputs[idx]]
    }

    pub fn node_output(&self, id: NodeId) -> &Tensor {
        &self.node_outputs[id]
    }
}

/// Backward-pass seed for one graph output.
pub enum OutputSeed {
    /// Gradient w.r.t. the output node's pre-activation value (used for the
    /// fused softmax + cross-entropy path).
    WrtLogits(Tensor),
    /// Gradient w.r.t. the post-activation output.
    WrtOutput(Tensor),
}

/// Which gradients a backward pass must produce, derived from the freeze
/// state. Nodes with no trainable self-or-ancestor are skipped entirely.
#[derive(Clone, Debug)]
pub struct GradPlan {
    /// Node's own parameters need gradients.
    pub wants_params: Vec<bool>,
    /// Gradient w.r.t. the node's output is needed at all.
    pub wants_output_grad: Vec<bool>,
}

impl ModelGraph {
    pub fn new(input_shapes: Vec<Vec<usize>>) -> Self {
        Self {
            nodes: Vec::new(),
            input_shapes,
            outputs: Vec::new(),
            output_names: Vec::new(),
        }
    }

    /// Appends a node. Edges may only reference graph inputs or existing
    /// nodes, which keeps the graph acyclic by construction.
    pub fn add_node(&mut self, name: &str, op: NodeOp, inputs: Vec<PortRef>) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Config(format!("duplicate node name {name}")));
        }
        for port in &inputs {
            match *port {
                PortRef::Input(i) if i >= self.input_shapes.len() => {
                    return Err(Error::Config(format!("input slot {i} out of range")))
                }
                PortRef::Node(id) if id >= self.nodes.len() => {
                    return Err(Error::Config(format!(
                        "node {name} references later node {id}; edges must point backwards"
                    )))
                }
                _ => {}
            }
        }
        let expected_inputs = match op {
            NodeOp::Concat => 2,
            _ => 1,
        };
        if inputs.len() != expected_inputs {
            return Err(Error::Config(format!(
                "{} node {name} takes {expected_inputs} input(s), got {}",
                op.kind(),
                inputs.len()
            )));
        }
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn mark_output(&mut self, id: NodeId, name: &str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Config(format!("output node {id} out of range")));
        }
        self.outputs.push(id);
        self.output_names.push(name.to_string());
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_index(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input_shapes(&self) -> &[Vec<usize>] {
        &self.input_shapes
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    /// Output shape of every node, in node order.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let in_shapes: Vec<&[usize]> = node
                .inputs
                .iter()
                .map(|p| match *p {
                    PortRef::Input(i) => self.input_shapes[i].as_slice(),
                    PortRef::Node(id) => shapes[id].as_slice(),
                })
                .collect();
            let shape = match &node.op {
                NodeOp::Conv2d { params, .. } => {
                    let s = in_shapes[0];
                    if s.len() != 3 || s[2] != params.cin() {
                        return Err(Error::Shape(format!(
                            "node {}: input shape {s:?} incompatible with kernel {:?}",
                            node.name,
                            params.kernels.shape()
                        )));
                    }
                    let (oh, ow) = params.output_dims(s[0], s[1])?;
                    vec![oh, ow, params.filters()]
                }
                NodeOp::MaxPool2d => {
                    let s = in_shapes[0];
                    if s.len() != 3 || s[0] < 2 || s[1] < 2 {
                        return Err(Error::Shape(format!(
                            "node {}: cannot pool shape {s:?}",
                            node.name
                        )));
                    }
                    vec![s[0] / 2, s[1] / 2, s[2]]
                }
                NodeOp::Flatten => vec![in_shapes[0].iter().product()],
                NodeOp::Dense { params } => {
                    let len: usize = in_shapes[0].iter().product();
                    if len != params.input_len() {
                        return Err(Error::Shape(format!(
                            "node {}: input {len} does not match weights [{}, {}]",
                            node.name,
                            params.input_len(),
                            params.output_len()
                        )));
                    }
                    vec![params.output_len()]
                }
                NodeOp::Dropout { .. } => in_shapes[0].to_vec(),
                NodeOp::Concat => {
                    let (a, b) = (in_shapes[0], in_shapes[1]);
                    if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[1] != b[1] {
                        return Err(Error::Shape(format!(
                            "node {}: concat of {a:?} and {b:?}",
                            node.name
                        )));
                    }
                    vec![a[0], a[1], a[2] + b[2]]
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Total (or trainable-only) parameter count.
    pub fn param_count(&self, trainable_only: bool) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                if trainable_only && n.op.frozen() {
                    0
                } else {
                    n.op.param_count()
                }
            })
            .sum()
    }

    /// Parameter bytes at 4 bytes per weight.
    pub fn param_bytes(&self, trainable_only: bool) -> usize {
        self.param_count(trainable_only) * 4
    }

    /// Audit line like `14,862 (58.05 KB)`.
    pub fn size_summary(&self, trainable_only: bool) -> String {
        let count = self.param_count(trainable_only);
        format!(
            "{} ({:.2} KB)",
            group_thousands(count as u64),
            (count * 4) as f64 / 1024.0
        )
    }

    /// Applies a freeze mask covering every node.
    pub fn set_freeze(&mut self, mask: &FreezeMask) -> Result<()> {
        if mask.trainable.len() != self.nodes.len() {
            return Err(Error::Config(format!(
                "freeze mask covers {} nodes, graph has {}",
                mask.trainable.len(),
                self.nodes.len()
            )));
        }
        for (node, &trainable) in self.nodes.iter_mut().zip(&mask.trainable) {
            match &mut node.op {
                NodeOp::Conv2d { params, .. } => params.frozen = !trainable,
                NodeOp::Dense { params } => params.frozen = !trainable,
                _ => {}
            }
        }
        Ok(())
    }

    /// Visits every parameter tensor mutably: `(node, half, tensor, frozen)`.
    pub fn visit_params_mut(
        &mut self,
        mut f: impl FnMut(usize, crate::optim::ParamHalf, &mut Tensor, bool),
    ) {
        use crate::optim::ParamHalf;
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            match &mut node.op {
                NodeOp::Conv2d { params, .. } => {
                    let frozen = params.frozen;
                    f(idx, ParamHalf::Weights, &mut params.kernels, frozen);
                    f(idx, ParamHalf::Bias, &mut params.bias, frozen);
                }
                NodeOp::Dense { params } => {
                    let frozen = params.frozen;
                    f(idx, ParamHalf::Weights, &mut params.weights, frozen);
                    f(idx, ParamHalf::Bias, &mut params.bias, frozen);
                }
                _ => {}
            }
        }
    }

    /// Snapshot of every parameter tensor, in node order.
    pub fn snapshot_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                NodeOp::Conv2d { params, .. } => {
                    out.push(params.kernels.clone());
                    out.push(params.bias.clone());
                }
                NodeOp::Dense { params } => {
                    out.push(params.weights.clone());
                    out.push(params.bias.clone());
                }
                _ => {}
            }
        }
        out
    }

    /// Restores a snapshot taken by [`ModelGraph::snapshot_params`].
    pub fn restore_params(&mut self, snapshot: &[Tensor]) {
        let mut it = snapshot.iter();
        self.visit_params_mut(|_, _, t, _| {
            *t = it.next().expect("snapshot length mismatch").clone();
        });
    }

    fn port_value<'a>(
        &self,
        trace_inputs: &'a [Tensor],
        outputs: &'a [Tensor],
        p: PortRef,
    ) -> &'a Tensor {
        match p {
            PortRef::Input(i) => &trace_inputs[i],
            PortRef::Node(id) => &outputs[id],
        }
    }

    /// Inference forward pass (dropout is the identity).
    pub fn forward(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let trace = self.forward_traced(inputs, &ExecMode::Infer, None)?;
        Ok(trace.outputs(self))
    }

    /// Forward pass that records what backward needs. `plan` limits caching
    /// to the parts of the graph gradients will actually reach.
    pub fn forward_traced(
        &self,
        inputs: &[Tensor],
        mode: &ExecMode,
        plan: Option<&GradPlan>,
    ) -> Result<ForwardTrace> {
        if inputs.len() != self.input_shapes.len() {
            return Err(Error::Shape(format!(
                "graph takes {} inputs, got {}",
                self.input_shapes.len(),
                inputs.len()
            )));
        }
        for (i, (t, s)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!(
                    "input {i} shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut caches: Vec<NodeCache> = Vec::with_capacity(self.nodes.len());

        for (idx, node) in self.nodes.iter().enumerate() {
            let wants = plan.map(|p| p.wants_output_grad[idx]).unwrap_or(false);
            let value = self.port_value(inputs, &outputs, node.inputs[0]);
            let (out, cache) = match &node.op {
                NodeOp::Conv2d { params, activation } => {
                    let pre = layers::conv2d_forward(value, params)?;
                    (layers::apply_activation(*activation, pre), NodeCache::None)
                }
                NodeOp::MaxPool2d => {
                    let (out, rec) = layers::maxpool2d_forward(value)?;
                    (
                        out,
                        if wants {
                            NodeCache::Pool(rec)
                        } else {
                            NodeCache::None
                        },
                    )
                }
                NodeOp::Flatten => {
                    let len = value.len();
                    (value.clone().reshaped(&[len])?, NodeCache::None)
                }
                NodeOp::Dense { params } => {
                    let pre = layers::dense_forward_linear(value, params)?;
                    (
                        layers::apply_activation(params.activation, pre),
                        NodeCache::None,
                    )
                }
                NodeOp::Dropout { rate } => match mode {
                    ExecMode::Infer => (value.clone(), NodeCache::None),
                    ExecMode::Train {
                        dropout_seed,
                        dropout_scope,
                    } => {
                        let mut rng = RngStream::new(
                            *dropout_seed,
                            &format!("{dropout_scope}/{}", node.name),
                        );
                        let (out, mask) =
                            layers::dropout_forward(value, *rate, DropoutMode::Train, &mut rng)?;
                        (
                            out,
                            if wants {
                                NodeCache::Drop(mask)
                            } else {
                                NodeCache::None
                            },
                        )
                    }
                },
                NodeOp::Concat => {
                    let a = value;
                    let b = self.port_value(inputs, &outputs, node.inputs[1]);
                    let (sa, sb) = (a.shape(), b.shape());
                    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
                        return Err(Error::Shape(format!(
                            "concat of {sa:?} and {sb:?} at node {}",
                            node.name
                        )));
                    }
                    let (h, w, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
                    let mut data = Vec::with_capacity(h * w * (ca + cb));
                    for pos in 0..h * w {
                        data.extend_from_slice(&a.data()[pos * ca..(pos + 1) * ca]);
                        data.extend_from_slice(&b.data()[pos * cb..(pos + 1) * cb]);
                    }
                    (Tensor::from_vec(&[h, w, ca + cb], data)?, NodeCache::None)
                }
            };
            outputs.push(out);
            caches.push(cache);
        }

        Ok(ForwardTrace {
            inputs: inputs.to_vec(),
            node_outputs: outputs,
            caches,
        })
    }

    /// Derives the backward plan from the current freeze flags.
    pub fn grad_plan(&self) -> GradPlan {
        let mut wants_params = vec![false; self.nodes.len()];
        let mut reaches_trainable = vec![false; self.nodes.len()];
        for (idx, node) in self.nodes.iter().enumerate() {
            let own = node.op.is_parameterized() && !node.op.frozen();
            wants_params[idx] = own;
            let upstream = node.inputs.iter().any(|p| match *p {
                PortRef::Input(_) => false,
                PortRef::Node(id) => reaches_trainable[id],
            });
            reaches_trainable[idx] = own || upstream;
        }
        GradPlan {
            wants_params,
            wants_output_grad: reaches_trainable,
        }
    }

    /// Backpropagates from the output seeds through the recorded trace.
    /// Returns parameter gradients for every trainable node.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        seeds: Vec<OutputSeed>,
        plan: &GradPlan,
    ) -> Result<GraphGrads> {
        if seeds.len() != self.outputs.len() {
            return Err(Error::Shape(format!(
                "graph has {} outputs, got {} seeds",
                self.outputs.len(),
                seeds.len()
            )));
        }
        let mut grads = GraphGrads::zeros_like(self);
        // Post-activation gradient accumulator per node, plus the logits-seed
        // override for output nodes under the fused cross-entropy path.
        let mut out_grad: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut logit_seed: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();

        for (&node_id, seed) in self.outputs.iter().zip(seeds) {
            if !plan.wants_output_grad[node_id] {
                continue;
            }
            match seed {
                OutputSeed::WrtOutput(g) => accumulate(&mut out_grad[node_id], g),
                OutputSeed::WrtLogits(g) => {
                    if logit_seed[node_id].is_some() || out_grad[node_id].is_some() {
                        return Err(Error::Config(format!(
                            "output node {} receives multiple seeds",
                            self.nodes[node_id].name
                        )));
                    }
                    logit_seed[node_id] = Some(g);
                }
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            if !plan.wants_output_grad[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            let has_logit_seed = logit_seed[idx].is_some();
            let g_out = match (logit_seed[idx].take(), out_grad[idx].take()) {
                (Some(g), None) => g,
                (None, Some(g)) => g,
                (None, None) => continue,
                (Some(_), Some(_)) => {
                    return Err(Error::Config(format!(
                        "node {} has both logit and output gradients",
                        node.name
                    )))
                }
            };
            let post = &trace.node_outputs[idx];
            let input_value = self.port_value(&trace.inputs, &trace.node_outputs, node.inputs[0]);
            let wants_input = |p: PortRef| match p {
                PortRef::Input(_) => false,
                PortRef::Node(id) => plan.wants_output_grad[id],
            };

            match &node.op {
                NodeOp::Conv2d { params, activation } => {
                    let pre_grad = if has_logit_seed {
                        g_out
                    } else {
                        layers::activation_backward(*activation, post, &g_out)
                    };
                    let need_input = wants_input(node.inputs[0]);
                    if plan.wants_params[idx] || need_input {
                        let lg =
                            layers::conv2d_backward(input_value, params, &pre_grad, need_input)?;
                        if plan.wants_params[idx] {
                            let slot = grads.by_node[idx].as_mut().unwrap();
                            slot.weights = lg.weights;
                            slot.bias = lg.bias;
                        }
                        if let (Some(di), PortRef::Node(src)) = (lg.input, node.inputs[0]) {
                            accumulate(&mut out_grad[src], di);
                        }
                    }
                }
                NodeOp::Dense { params } => {
                    let pre_grad = if has_logit_seed {
                        g_out
                    } else {
                        layers::activation_backward(params.activation, post, &g_out)
                    };
                    let need_input = wants_input(node.inputs[0]);
                    if plan.wants_params[idx] || need_input {
                        let lg = layers::dense_backward_linear(
                            input_value,
                            params,
                            &pre_grad,
                            need_input,
                        )?;
                        if plan.wants_params[idx] {
                            let slot = grads.by_node[idx].as_mut().unwrap();
                            slot.weights = lg.weights;
                            slot.bias = lg.bias;
                        }
                        if let (Some(di), PortRef::Node(src)) = (lg.input, node.inputs[0]) {
                            accumulate(&mut out_grad[src], di);
                        }
                    }
                }
                NodeOp::MaxPool2d => {
                    if let PortRef::Node(src) = node.inputs[0] {
                        if plan.wants_output_grad[src] {
                            let rec = match &trace.caches[idx] {
                                NodeCache::Pool(rec) => rec,
                                _ => {
                                    return Err(Error::Training(format!(
                                        "missing pool record at node {}",
                                        node.name
                                    )))
                                }
                            };
                            accumulate(
                                &mut out_grad[src],
                                layers::maxpool2d_backward(rec, &g_out)?,
                            );
                        }
                    }
                }
                NodeOp::Flatten => {
                    if let PortRef::Node(src) = node.inputs[0] {
                        if plan.wants_output_grad[src] {
                            let shape = trace.node_outputs[src].shape().to_vec();
                            accumulate(&mut out_grad[src], g_out.reshaped(&shape)?);
                        }
                    }
                }
                NodeOp::Dropout { .. } => {
                    if let PortRef::Node(src) = node.inputs[0] {
                        if plan.wants_output_grad[src] {
                            let di = match &trace.caches[idx] {
                                NodeCache::Drop(Some(mask)) => {
                                    layers::dropout_backward(mask, &g_out)
                                }
                                NodeCache::Drop(None) => g_out,
                                NodeCache::None => g_out,
                                _ => {
                                    return Err(Error::Training(format!(
                                        "unexpected cache at dropout node {}",
                                        node.name
                                    )))
                                }
                            };
                            accumulate(&mut out_grad[src], di);
                        }
                    }
                }
                NodeOp::Concat => {
                    let b_value =
                        self.port_value(&trace.inputs, &trace.node_outputs, node.inputs[1]);
                    let (sa, sb) = (input_value.shape(), b_value.shape());
                    let (h, w, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
                    let g = g_out.data();
                    let mut ga = Tensor::zeros(sa);
                    let mut gb = Tensor::zeros(sb);
                    for pos in 0..h * w {
                        let base = pos * (ca + cb);
                        ga.data_mut()[pos * ca..(pos + 1) * ca]
                            .copy_from_slice(&g[base..base + ca]);
                        gb.data_mut()[pos * cb..(pos + 1) * cb]
                            .copy_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    if let PortRef::Node(src) = node.inputs[0] {
                        if plan.wants_output_grad[src] {
                            accumulate(&mut out_grad[src], ga);
                        }
                    }
                    if let PortRef::Node(src) = node.inputs[1] {
                        if plan.wants_output_grad[src] {
                            accumulate(&mut out_grad[src], gb);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Extracts the single-input subgraph that feeds the given output.
    pub fn extract_branch(&self, output_idx: usize) -> Result<ModelGraph> {
        let root = *self
            .outputs
            .get(output_idx)
            .ok_or_else(|| Error::Config(format!("no output index {output_idx}")))?;
        let mut keep = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        let mut used_inputs = Vec::new();
        while let Some(id) = stack.pop() {
            if keep[id] {
                continue;
            }
            keep[id] = true;
            for p in &self.nodes[id].inputs {
                match *p {
                    PortRef::Node(src) => stack.push(src),
                    PortRef::Input(i) => {
                        if !used_inputs.contains(&i) {
                            used_inputs.push(i)
                        }
                    }
                }
            }
        }
        if used_inputs.len() != 1 {
            return Err(Error::Config(format!(
                "branch for output {output_idx} touches {} graph inputs",
                used_inputs.len()
            )));
        }
        let input_slot = used_inputs[0];
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut branch = ModelGraph::new(vec![self.input_shapes[input_slot].clone()]);
        for (id, node) in self.nodes.iter().enumerate() {
            if !keep[id] {
                continue;
            }
            let inputs = node
                .inputs
                .iter()
                .map(|p| match *p {
                    PortRef::Input(_) => PortRef::Input(0),
                    PortRef::Node(src) => PortRef::Node(remap[src]),
                })
                .collect();
            remap[id] = branch.add_node(&node.name, node.op.clone(), inputs)?;
        }
        branch.mark_output(remap[root], &self.output_names[output_idx])?;
        Ok(branch)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn group_thousands(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Builds one classifier branch:
/// `Conv(10, 3x3, valid, relu) -> MaxPool -> Conv(20, 3x3, valid, relu) ->
/// MaxPool -> Flatten -> Dense(10, softmax)`, He-initialized from labeled
/// streams under `init/{prefix}/...`.
pub fn build_branch(input_shape: &[usize], seed: u64, prefix: &str) -> Result<ModelGraph> {
    if input_shape.len() != 3 {
        return Err(Error::Config(format!(
            "branch input must be [h, w, c], got {input_shape:?}"
        )));
    }
    let mut g = ModelGraph::new(vec![input_shape.to_vec()]);
    let cin = input_shape[2];

    let conv = |filters: usize, cin: usize, label: &str| -> Result<Conv2dParams> {
        Ok(Conv2dParams {
            kernels: he_normal_init(
                &[3, 3, cin, filters],
                3 * 3 * cin,
                &mut RngStream::new(seed, &format!("init/{label}/kernel")),
            )?,
            bias: zeros_init(&[filters]),
            padding: Padding::Valid,
            stride: (1, 1),
            frozen: false,
        })
    };

    let c1 = g.add_node(
        &format!("{prefix}/conv1"),
        NodeOp::Conv2d {
            params: conv(10, cin, &format!("{prefix}/conv1"))?,
            activation: Activation::Relu,
        },
        vec![PortRef::Input(0)],
    )?;
    let p1 = g.add_node(
        &format!("{prefix}/pool1"),
        NodeOp::MaxPool2d,
        vec![PortRef::Node(c1)],
    )?;
    let c2 = g.add_node(
        &format!("{prefix}/conv2"),
        NodeOp::Conv2d {
            params: conv(20, 10, &format!("{prefix}/conv2"))?,
            activation: Activation::Relu,
        },
        vec![PortRef::Node(p1)],
    )?;
    let p2 = g.add_node(
        &format!("{prefix}/pool2"),
        NodeOp::MaxPool2d,
        vec![PortRef::Node(c2)],
    )?;
    let f = g.add_node(
        &format!("{prefix}/flatten"),
        NodeOp::Flatten,
        vec![PortRef::Node(p2)],
    )?;

    // Shape-check the trunk before sizing the head; this is where too-small
    // spatial dims surface as an error.
    let shapes = g.infer_shapes()?;
    let feature_len: usize = shapes[f].iter().product();

    let d = g.add_node(
        &format!("{prefix}/dense"),
        NodeOp::Dense {
            params: DenseParams {
                weights: he_normal_init(
                    &[feature_len, 10],
                    feature_len,
                    &mut RngStream::new(seed, &format!("init/{prefix}/dense/kernel")),
                )?,
                bias: zeros_init(&[10]),
                activation: Activation::Softmax,
                frozen: false,
            },
        },
        vec![PortRef::Node(f)],
    )?;
    g.mark_output(d, prefix)?;
    Ok(g)
}

/// Builds the dual model: two independently initialized branches with
/// separate inputs and outputs named `model1` and `model2`.
pub fn build_dual_model(input_shape: &[usize], seed: u64) -> Result<ModelGraph> {
    let b1 = build_branch(input_shape, seed, "model1")?;
    let b2 = build_branch(input_shape, seed, "model2")?;
    let mut g = ModelGraph::new(vec![input_shape.to_vec(), input_shape.to_vec()]);
    let append =
        |g: &mut ModelGraph, branch: &ModelGraph, input_slot: usize| -> Result<NodeId> {
            let offset = g.nodes.len();
            let mut last = 0;
            for node in &branch.nodes {
                let inputs = node
                    .inputs
                    .iter()
                    .map(|p| match *p {
                        PortRef::Input(_) => PortRef::Input(input_slot),
                        PortRef::Node(id) => PortRef::Node(id + offset),
                    })
                    .collect();
                last = g.add_node(&node.name, node.op.clone(), inputs)?;
            }
            Ok(last)
        };
    let out1 = append(&mut g, &b1, 0)?;
    let out2 = append(&mut g, &b2, 1)?;
    g.mark_output(out1, "model1")?;
    g.mark_output(out2, "model2")?;
    Ok(g)
}

/// Reshapes a dense layer into an equivalent convolution over the full
/// spatial extent of its incoming feature map. The kernel at `[h, w, c, f]`
/// is the dense weight at `[flatten_index(h, w, c), f]`, so a valid-padding
/// stride-1 pass over the map reproduces the dense output exactly.
pub fn dense_to_conv(dense: &DenseParams, feature_shape: &[usize]) -> Result<Conv2dParams> {
    let [h, w, c] = match *feature_shape {
        [h, w, c] => [h, w, c],
        _ => {
            return Err(Error::Shape(format!(
                "feature shape must be [h, w, c], got {feature_shape:?}"
            )))
        }
    };
    if dense.input_len() != h * w * c {
        return Err(Error::Shape(format!(
            "dense input {} does not match feature map {h}x{w}x{c}",
            dense.input_len()
        )));
    }
    let out = dense.output_len();
    let mut kernels = Tensor::zeros(&[h, w, c, out]);
    let dw = dense.weights.data();
    for hh in 0..h {
        for ww in 0..w {
            for cc in 0..c {
                let flat = flatten_index(hh, ww, cc, w, c);
                let k_base = ((hh * w + ww) * c + cc) * out;
                kernels.data_mut()[k_base..k_base + out]
                    .copy_from_slice(&dw[flat * out..(flat + 1) * out]);
            }
        }
    }
    Ok(Conv2dParams {
        kernels,
        bias: dense.bias.clone(),
        padding: Padding::Valid,
        stride: (1, 1),
        frozen: dense.frozen,
    })
}

/// Builds the unified final model from two trained dual-model graphs (one per
/// best checkpoint). Branch `model1` is taken from the first graph, `model2`
/// from the second; each dense head is transplanted as a full-extent
/// convolution that keeps its softmax. The merged features pass through
/// `Flatten -> Dense(32, relu) -> Dropout(0.5) -> Dense(10, softmax)` with
/// fresh He init for the two new layers.
pub fn build_final_model(
    dual_for_model1: &ModelGraph,
    dual_for_model2: &ModelGraph,
    seed: u64,
) -> Result<ModelGraph> {
    let b1 = dual_for_model1.extract_branch(0)?;
    let b2 = dual_for_model2.extract_branch(1)?;
    if b1.input_shapes != b2.input_shapes {
        return Err(Error::Config(format!(
            "branch input shapes differ: {:?} vs {:?}",
            b1.input_shapes, b2.input_shapes
        )));
    }
    let input_shape = b1.input_shapes[0].clone();
    let mut g = ModelGraph::new(vec![input_shape]);

    let transplant = |g: &mut ModelGraph, branch: &ModelGraph| -> Result<NodeId> {
        let shapes = branch.infer_shapes()?;
        let dense_id = branch
            .nodes
            .iter()
            .position(|n| matches!(n.op, NodeOp::Dense { .. }))
            .ok_or_else(|| Error::Config("branch has no dense head".into()))?;
        let flatten_id = match branch.nodes[dense_id].inputs[0] {
            PortRef::Node(id) if matches!(branch.nodes[id].op, NodeOp::Flatten) => id,
            _ => return Err(Error::Config("dense head must follow a flatten".into())),
        };
        let trunk_end = match branch.nodes[flatten_id].inputs[0] {
            PortRef::Node(id) => id,
            _ => return Err(Error::Config("flatten reads a graph input".into())),
        };
        let feature_shape = shapes[trunk_end].clone();

        // Copy the trunk (everything except flatten + dense).
        let mut remap = vec![usize::MAX; branch.nodes.len()];
        for (id, node) in branch.nodes.iter().enumerate() {
            if id == flatten_id || id == dense_id {
                continue;
            }
            let inputs = node
                .inputs
                .iter()
                .map(|p| match *p {
                    PortRef::Input(_) => PortRef::Input(0),
                    PortRef::Node(src) => PortRef::Node(remap[src]),
                })
                .collect();
            remap[id] = g.add_node(&node.name, node.op.clone(), inputs)?;
        }

        let dense = match &branch.nodes[dense_id].op {
            NodeOp::Dense { params } => params,
            _ => unreachable!(),
        };
        let head = dense_to_conv(dense, &feature_shape)?;
        g.add_node(
            &format!("{}/head_conv", branch.output_names[0]),
            NodeOp::Conv2d {
                params: head,
                activation: dense.activation,
            },
            vec![PortRef::Node(remap[trunk_end])],
        )
    };

    let h1 = transplant(&mut g, &b1)?;
    let h2 = transplant(&mut g, &b2)?;

    let concat = g.add_node(
        "head/concat",
        NodeOp::Concat,
        vec![PortRef::Node(h1), PortRef::Node(h2)],
    )?;
    let flat = g.add_node("head/flatten", NodeOp::Flatten, vec![PortRef::Node(concat)])?;
    let merged: usize = {
        let shapes = g.infer_shapes()?;
        shapes[flat].iter().product()
    };
    let d1 = g.add_node(
        "head/dense1",
        NodeOp::Dense {
            params: DenseParams {
                weights: he_normal_init(
                    &[merged, 32],
                    merged,
                    &mut RngStream::new(seed, "init/head/dense1/kernel"),
                )?,
                bias: zeros_init(&[32]),
                activation: Activation::Relu,
                frozen: false,
            },
        },
        vec![PortRef::Node(flat)],
    )?;
    let drop = g.add_node(
        "head/dropout",
        NodeOp::Dropout { rate: 0.5 },
        vec![PortRef::Node(d1)],
    )?;
    let d2 = g.add_node(
        "head/dense2",
        NodeOp::Dense {
            params: DenseParams {
                weights: he_normal_init(
                    &[32, 10],
                    32,
                    &mut RngStream::new(seed, "init/head/dense2/kernel"),
                )?,
                bias: zeros_init(&[10]),
                activation: Activation::Softmax,
                frozen: false,
            },
        },
        vec![PortRef::Node(drop)],
    )?;
    g.mark_output(d2, "output")?;
    g.infer_shapes()?;
    Ok(g)
}

/// Names of the two freshly added head layers of a final model; these are the
/// only trainable nodes in the head-training stage.
pub const FINAL_HEAD_DENSE_NODES: [&str; 2] = ["head/dense1", "head/dense2"];

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Supported model envelope.
pub const MAX_CHANNELS: usize = 64;
pub const MAX_INPUT_SIDE: usize = 64;
pub const MAX_PARAMETRIC_LAYERS: usize = 64;
pub const MAX_NODES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of neuron positions in one feature map.
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    PoolMax {
        size: usize,
        stride: usize,
    },
    PoolAvg {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dense,
    Add,
    Softmax,
}

impl LayerKind {
    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Dense)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::PoolMax { .. } => "pool_max",
            LayerKind::PoolAvg { .. } => "pool_avg",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Dense => "dense",
            LayerKind::Add => "add",
            LayerKind::Softmax => "softmax",
        }
    }
}

/// One node of the layer DAG as it appears in a model manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Group path from the hierarchy root down to (excluding) this layer.
    #[serde(default)]
    pub group: Vec<String>,
}

impl LayerNode {
    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }
}

/// Dense parameters of a conv or dense layer.
///
/// Conv weights are laid out `[out][in][ky][kx]`, dense weights `[out][in]`
/// where `in` indexes the flattened channel-major input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(weight: usize, bias: usize) -> Self {
        LayerParams {
            weight: vec![0.0; weight],
            bias: vec![0.0; bias],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HierarchyNode {
    pub name: String,
    /// Slash-joined path from the root; empty for the root.
    pub path: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Layer index for leaves.
    pub layer: Option<usize>,
    pub depth: usize,
}

impl HierarchyNode {
    pub fn is_leaf(&self) -> bool {
        self.layer.is_some()
    }
}

/// Group tree over the layers. Node 0 is the root; children are kept in
/// first-appearance order so a pre-order walk follows the topological order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hierarchy {
    nodes: Vec<HierarchyNode>,
    leaf_of_layer: Vec<usize>,
}

impl Hierarchy {
    pub const ROOT: usize = 0;

    pub(crate) fn build(layers: &[LayerNode]) -> Result<Self> {
        let mut nodes = vec![HierarchyNode {
            name: String::new(),
            path: String::new(),
            parent: None,
            children: Vec::new(),
            layer: None,
            depth: 0,
        }];
        let mut by_path: HashMap<String, usize> = HashMap::new();
        let mut leaf_of_layer = Vec::with_capacity(layers.len());

        for (li, layer) in layers.iter().enumerate() {
            let mut parent = Self::ROOT;
            for name in &layer.group {
                if name.is_empty() || name.contains('/') {
                    return Err(Error::InvalidModel(format!(
                        "layer `{}` has an invalid group name `{name}`",
                        layer.id
                    )));
                }
                let path = child_path(&nodes[parent].path, name);
                parent = match by_path.get(&path) {
                    Some(&idx) => {
                        if nodes[idx].is_leaf() {
                            return Err(Error::InvalidModel(format!(
                                "hierarchy path `{path}` is both a layer and a group"
                            )));
                        }
                        idx
                    }
                    None => {
                        let idx = nodes.len();
                        let depth = nodes[parent].depth + 1;
                        nodes.push(HierarchyNode {
                            name: name.clone(),
                            path: path.clone(),
                            parent: Some(parent),
                            children: Vec::new(),
                            layer: None,
                            depth,
                        });
                        nodes[parent].children.push(idx);
                        by_path.insert(path, idx);
                        idx
                    }
                };
            }
            let path = child_path(&nodes[parent].path, &layer.id);
            if by_path.contains_key(&path) {
                return Err(Error::InvalidModel(format!(
                    "hierarchy path `{path}` is not unique"
                )));
            }
            let idx = nodes.len();
            let depth = nodes[parent].depth + 1;
            nodes.push(HierarchyNode {
                name: layer.id.clone(),
                path: path.clone(),
                parent: Some(parent),
                children: Vec::new(),
                layer: Some(li),
                depth,
            });
            nodes[parent].children.push(idx);
            by_path.insert(path, idx);
            leaf_of_layer.push(idx);
        }
        Ok(Hierarchy {
            nodes,
            leaf_of_layer,
        })
    }

    pub fn nodes(&self) -> &[HierarchyNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &HierarchyNode {
        &self.nodes[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, path: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.path == path)
    }

    pub fn leaf_of_layer(&self, layer: usize) -> usize {
        self.leaf_of_layer[layer]
    }

    /// Nodes in pre-order (hierarchy order).
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![Self::ROOT];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n].children.iter().rev());
        }
        out
    }

    /// Layer indices of every leaf under `node`, in hierarchy order.
    pub fn layers_under(&self, node: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if let Some(l) = self.nodes[n].layer {
                out.push(l);
            }
            stack.extend(self.nodes[n].children.iter().rev());
        }
        out
    }

    pub fn is_ancestor_or_self(&self, ancestor: usize, mut node: usize) -> bool {
        loop {
            if node == ancestor {
                return true;
            }
            match self.nodes[node].parent {
                Some(p) => node = p,
                None => return false,
            }
        }
    }

    pub fn lowest_common_ancestor(&self, a: usize, b: usize) -> usize {
        let (mut a, mut b) = (a, b);
        while self.nodes[a].depth > self.nodes[b].depth {
            a = self.nodes[a].parent.unwrap_or(Self::ROOT);
        }
        while self.nodes[b].depth > self.nodes[a].depth {
            b = self.nodes[b].parent.unwrap_or(Self::ROOT);
        }
        while a != b {
            a = self.nodes[a].parent.unwrap_or(Self::ROOT);
            b = self.nodes[b].parent.unwrap_or(Self::ROOT);
        }
        a
    }
}

fn child_path(parent: &str, name: &str) -> String {
    if parent.is_empty() {
        name.to_string()
    } else {
        format!("{parent}/{name}")
    }
}

/// Validated layer DAG with weights and the layer hierarchy.
///
/// Nodes are stored in topological order: every node's inputs precede it.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    nodes: Vec<LayerNode>,
    inputs: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams>>,
    index: HashMap<String, usize>,
    hierarchy: Hierarchy,
    input: usize,
    output: usize,
    hash: String,
}

impl ModelGraph {
    /// Validates the node list and parameters and builds the graph.
    ///
    /// `params` is indexed like `nodes`; conv and dense layers must carry
    /// parameters of the right size, every other node `None`.
    pub fn new(nodes: Vec<LayerNode>, params: Vec<Option<LayerParams>>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidModel("model has no nodes".into()));
        }
        if nodes.len() > MAX_NODES {
            return Err(Error::InvalidModel(format!(
                "{} nodes exceeds the supported maximum of {MAX_NODES}",
                nodes.len()
            )));
        }
        if params.len() != nodes.len() {
            return Err(Error::InvalidModel(format!(
                "{} parameter slots for {} nodes",
                params.len(),
                nodes.len()
            )));
        }

        let mut index = HashMap::new();
        let mut inputs = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.id.is_empty() || node.id.contains('/') {
                return Err(Error::InvalidModel(format!("invalid layer id `{}`", node.id)));
            }
            let mut ins = Vec::new();
            for src in &node.inputs {
                match index.get(src.as_str()) {
                    Some(&j) => ins.push(j),
                    None if nodes.iter().any(|n| &n.id == src) => {
                        return Err(Error::InvalidModel(format!(
                            "layer `{}` consumes `{src}` which does not precede it (cycle or unordered manifest)",
                            node.id
                        )))
                    }
                    None => return Err(Error::UnknownLayer(src.clone())),
                }
            }
            if ins.len() != node.kind.arity() {
                return Err(Error::InvalidModel(format!(
                    "layer `{}` ({}) needs {} inputs, has {}",
                    node.id,
                    node.kind.name(),
                    node.kind.arity(),
                    ins.len()
                )));
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate layer id `{}`", node.id)));
            }
            inputs.push(ins);
        }

        let input_nodes: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == LayerKind::Input)
            .map(|(i, _)| i)
            .collect();
        if input_nodes.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "expected exactly one input node, found {}",
                input_nodes.len()
            )));
        }
        let softmax_nodes: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == LayerKind::Softmax)
            .map(|(i, _)| i)
            .collect();
        if softmax_nodes.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "expected exactly one softmax node, found {}",
                softmax_nodes.len()
            )));
        }
        let (input, output) = (input_nodes[0], softmax_nodes[0]);

        let mut consumers = vec![Vec::new(); nodes.len()];
        for (i, ins) in inputs.iter().enumerate() {
            for &j in ins {
                consumers[j].push(i);
            }
        }
        for (i, node) in nodes.iter().enumerate() {
            if i != output && consumers[i].is_empty() {
                return Err(Error::InvalidModel(format!(
                    "layer `{}` has no consumers",
                    node.id
                )));
            }
        }
        if !consumers[output].is_empty() {
            return Err(Error::InvalidModel("softmax must be the final node".into()));
        }

        let parametric = nodes.iter().filter(|n| n.kind.is_parametric()).count();
        if parametric > MAX_PARAMETRIC_LAYERS {
            return Err(Error::InvalidModel(format!(
                "{parametric} conv/dense layers exceeds the supported maximum of {MAX_PARAMETRIC_LAYERS}"
            )));
        }

        for (i, node) in nodes.iter().enumerate() {
            let expected = infer_shape(node, &inputs[i], &nodes)?;
            if expected != node.shape() {
                return Err(Error::ShapeMismatch {
                    layer: node.id.clone(),
                    expected: expected.to_string(),
                    actual: node.shape().to_string(),
                });
            }
            if node.channels == 0 || node.height == 0 || node.width == 0 {
                return Err(Error::InvalidModel(format!("layer `{}` has an empty shape", node.id)));
            }
            if node.channels > MAX_CHANNELS {
                return Err(Error::InvalidModel(format!(
                    "layer `{}` has {} channels, supported maximum is {MAX_CHANNELS}",
                    node.id, node.channels
                )));
            }
            check_params(node, &inputs[i], &nodes, params[i].as_ref())?;
        }
        let in_shape = nodes[input].shape();
        if in_shape.height > MAX_INPUT_SIDE || in_shape.width > MAX_INPUT_SIDE {
            return Err(Error::InvalidModel(format!(
                "input {in_shape} exceeds the supported {MAX_INPUT_SIDE}x{MAX_INPUT_SIDE}"
            )));
        }

        let hierarchy = Hierarchy::build(&nodes)?;
        let mut model = ModelGraph {
            nodes,
            inputs,
            consumers,
            params,
            index,
            hierarchy,
            input,
            output,
            hash: String::new(),
        };
        model.hash = model.compute_hash();
        Ok(model)
    }

    fn compute_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.nodes).expect("layer nodes serialize"));
        for p in self.params.iter().flatten() {
            for v in p.weight.iter().chain(&p.bias) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Content hash over topology, shapes, hierarchy and weights.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &LayerNode {
        &self.nodes[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn layer_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    pub fn inputs_of(&self, idx: usize) -> &[usize] {
        &self.inputs[idx]
    }

    pub fn consumers_of(&self, idx: usize) -> &[usize] {
        &self.consumers[idx]
    }

    /// Producer → consumer pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.inputs
            .iter()
            .enumerate()
            .flat_map(|(i, ins)| ins.iter().map(move |&j| (j, i)))
    }

    pub fn params(&self, idx: usize) -> Option<&LayerParams> {
        self.params[idx].as_ref()
    }

    pub fn all_params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    /// Replaces the parameters of a layer. Sizes must match the layer.
    pub fn set_params(&mut self, id: &str, params: LayerParams) -> Result<()> {
        let idx = self.layer_index(id)?;
        check_params(&self.nodes[idx], &self.inputs[idx], &self.nodes, Some(&params))?;
        self.params[idx] = Some(params);
        self.hash = self.compute_hash();
        Ok(())
    }

    /// Applies `f` to every parameter vector, then revalidates and rehashes.
    pub fn update_params<F>(&mut self, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &mut LayerParams),
    {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(p) = p {
                f(i, p);
            }
        }
        for i in 0..self.nodes.len() {
            check_params(&self.nodes[i], &self.inputs[i], &self.nodes, self.params[i].as_ref())?;
        }
        self.hash = self.compute_hash();
        Ok(())
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn input_index(&self) -> usize {
        self.input
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn input_shape(&self) -> Shape {
        self.nodes[self.input].shape()
    }

    pub fn num_classes(&self) -> usize {
        self.nodes[self.output].channels
    }

    /// Default candidate layers: every relu output and every residual add output.
    pub fn post_activation_layers(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, LayerKind::Relu | LayerKind::Add))
            .map(|(i, _)| i)
            .collect()
    }

    /// Whether `to` is reachable from `from` along producer → consumer edges.
    pub fn reaches(&self, from: usize, to: usize) -> bool {
        if from == to {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            for &c in &self.consumers[n] {
                if c == to {
                    return true;
                }
                if !seen[c] && c < to {
                    seen[c] = true;
                    stack.push(c);
                }
            }
        }
        false
    }
}

fn infer_shape(node: &LayerNode, ins: &[usize], nodes: &[LayerNode]) -> Result<Shape> {
    let src = |k: usize| nodes[ins[k]].shape();
    let window = |len: usize, size: usize, stride: usize, pad: usize| -> Result<usize> {
        if size == 0 || stride == 0 {
            return Err(Error::InvalidModel(format!(
                "layer `{}` has a zero kernel or stride",
                node.id
            )));
        }
        if len + 2 * pad < size {
            return Err(Error::ShapeMismatch {
                layer: node.id.clone(),
                expected: format!("spatial extent >= {size}"),
                actual: format!("{}", len + 2 * pad),
            });
        }
        Ok((len + 2 * pad - size) / stride + 1)
    };
    Ok(match node.kind {
        LayerKind::Input => node.shape(),
        LayerKind::Conv {
            kernel,
            stride,
            padding,
        } => {
            let s = src(0);
            Shape::new(
                node.channels,
                window(s.height, kernel, stride, padding)?,
                window(s.width, kernel, stride, padding)?,
            )
        }
        LayerKind::Relu => src(0),
        LayerKind::PoolMax { size, stride } | LayerKind::PoolAvg { size, stride } => {
            let s = src(0);
            Shape::new(
                s.channels,
                window(s.height, size, stride, 0)?,
                window(s.width, size, stride, 0)?,
            )
        }
        LayerKind::GlobalAvgPool => Shape::new(src(0).channels, 1, 1),
        LayerKind::Dense => Shape::new(node.channels, 1, 1),
        LayerKind::Add => {
            let (a, b) = (src(0), src(1));
            if a != b {
                return Err(Error::ShapeMismatch {
                    layer: node.id.clone(),
                    expected: a.to_string(),
                    actual: b.to_string(),
                });
            }
            a
        }
        LayerKind::Softmax => {
            let s = src(0);
            if s.spatial() != 1 {
                return Err(Error::ShapeMismatch {
                    layer: node.id.clone(),
                    expected: format!("{}x1x1", s.channels),
                    actual: s.to_string(),
                });
            }
            s
        }
    })
}

fn check_params(
    node: &LayerNode,
    ins: &[usize],
    nodes: &[LayerNode],
    params: Option<&LayerParams>,
) -> Result<()> {
    let expected = match node.kind {
        LayerKind::Conv { kernel, .. } => {
            let in_c = nodes[ins[0]].channels;
            Some((node.channels * in_c * kernel * kernel, node.channels))
        }
        LayerKind::Dense => Some((node.channels * nodes[ins[0]].shape().len(), node.channels)),
        _ => None,
    };
    match (expected, params) {
        (None, None) => Ok(()),
        (None, Some(_)) => Err(Error::InvalidModel(format!(
            "layer `{}` ({}) takes no parameters",
            node.id,
            node.kind.name()
        ))),
        (Some(_), None) => Err(Error::InvalidModel(format!(
            "layer `{}` is missing its parameters",
            node.id
        ))),
        (Some((w, b)), Some(p)) => {
            if p.weight.len() != w || p.bias.len() != b {
                return Err(Error::ShapeMismatch {
                    layer: node.id.clone(),
                    expected: format!("weight {w}, bias {b}"),
                    actual: format!("weight {}, bias {}", p.weight.len(), p.bias.len()),
                });
            }
            if p.weight.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of `{}`", node.id)));
            }
            Ok(())
        }
    }
}

/// Incremental construction of a [`ModelGraph`] with zero-initialized weights.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    nodes: Vec<LayerNode>,
    params: Vec<Option<LayerParams>>,
    group: Vec<String>,
}

impl ModelBuilder {
    pub fn new(input_id: &str, shape: Shape) -> Self {
        ModelBuilder {
            nodes: vec![LayerNode {
                id: input_id.to_string(),
                kind: LayerKind::Input,
                inputs: Vec::new(),
                channels: shape.channels,
                height: shape.height,
                width: shape.width,
                group: Vec::new(),
            }],
            params: vec![None],
            group: Vec::new(),
        }
    }

    /// Sets the group path for subsequently added layers.
    pub fn group(&mut self, path: &[&str]) -> &mut Self {
        self.group = path.iter().map(|s| s.to_string()).collect();
        self
    }

    fn shape_of(&self, id: &str) -> Shape {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .map(|n| n.shape())
            .unwrap_or_else(|| panic!("unknown layer `{id}` in builder"))
    }

    fn push(&mut self, id: &str, kind: LayerKind, inputs: &[&str], shape: Shape, params: Option<LayerParams>) -> String {
        self.nodes.push(LayerNode {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            group: self.group.clone(),
        });
        self.params.push(params);
        id.to_string()
    }

    pub fn conv(&mut self, id: &str, input: &str, out: usize, kernel: usize, stride: usize, padding: usize) -> String {
        let s = self.shape_of(input);
        let side = |len: usize| (len + 2 * padding).saturating_sub(kernel) / stride.max(1) + 1;
        let shape = Shape::new(out, side(s.height), side(s.width));
        let params = LayerParams::zeros(out * s.channels * kernel * kernel, out);
        self.push(
            id,
            LayerKind::Conv {
                kernel,
                stride,
                padding,
            },
            &[input],
            shape,
            Some(params),
        )
    }

    pub fn relu(&mut self, id: &str, input: &str) -> String {
        let s = self.shape_of(input);
        self.push(id, LayerKind::Relu, &[input], s, None)
    }

    pub fn max_pool(&mut self, id: &str, input: &str, size: usize, stride: usize) -> String {
        let s = self.shape_of(input);
        let side = |len: usize| len.saturating_sub(size) / stride.max(1) + 1;
        let shape = Shape::new(s.channels, side(s.height), side(s.width));
        self.push(id, LayerKind::PoolMax { size, stride }, &[input], shape, None)
    }

    pub fn avg_pool(&mut self, id: &str, input: &str, size: usize, stride: usize) -> String {
        let s = self.shape_of(input);
        let side = |len: usize| len.saturating_sub(size) / stride.max(1) + 1;
        let shape = Shape::new(s.channels, side(s.height), side(s.width));
        self.push(id, LayerKind::PoolAvg { size, stride }, &[input], shape, None)
    }

    pub fn global_avg_pool(&mut self, id: &str, input: &str) -> String {
        let s = self.shape_of(input);
        self.push(id, LayerKind::GlobalAvgPool, &[input], Shape::new(s.channels, 1, 1), None)
    }

    pub fn dense(&mut self, id: &str, input: &str, out: usize) -> String {
        let s = self.shape_of(input);
        let params = LayerParams::zeros(out * s.len(), out);
        self.push(id, LayerKind::Dense, &[input], Shape::new(out, 1, 1), Some(params))
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> String {
        let s = self.shape_of(a);
        self.push(id, LayerKind::Add, &[a, b], s, None)
    }

    pub fn softmax(&mut self, id: &str, input: &str) -> String {
        let s = self.shape_of(input);
        self.push(id, LayerKind::Softmax, &[input], s, None)
    }

    pub fn build(self) -> Result<ModelGraph> {
        ModelGraph::new(self.nodes, self.params)
    }
}

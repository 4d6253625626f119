//! Network IR: typed nodes over named tensors plus an initializer store.
//!
//! A [`GraphModel`] is treated as an immutable value once validated; every
//! transformation in this crate returns a new model.

mod builder;
mod debug;
mod shape;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use builder::{BnInit, GraphBuilder};
pub use debug::{to_debug_json, DebugOptions, DEBUG_FORMAT_VERSION};
pub use shape::{infer_shapes, infer_shapes_declared};

/// Opset declared on saved models and required on load.
pub const OPSET_VERSION: i64 = 13;

pub const DEFAULT_BN_EPSILON: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Int64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorKind {
    GraphInput,
    GraphOutput,
    Intermediate,
    Parameter,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
}

/// Conv attributes. Grouped and dilated convolutions are not representable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConvAttrs {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    /// `[top, left, bottom, right]`, the ONNX `pads` ordering.
    pub pads: [usize; 4],
}

impl ConvAttrs {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [kernel, kernel],
            stride: [stride, stride],
            pads: [pad; 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PoolAttrs {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub pads: [usize; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum OpKind {
    Conv,
    BatchNorm,
    Relu,
    Add,
    Concat,
    Resize,
    MaxPool,
    ScatterND,
    Transpose,
    ConstantOfShape,
    Softmax,
    ArgMax,
}

impl OpKind {
    /// ONNX `op_type` string.
    pub fn onnx_name(self) -> &'static str {
        match self {
            OpKind::Conv => "Conv",
            OpKind::BatchNorm => "BatchNormalization",
            OpKind::Relu => "Relu",
            OpKind::Add => "Add",
            OpKind::Concat => "Concat",
            OpKind::Resize => "Resize",
            OpKind::MaxPool => "MaxPool",
            OpKind::ScatterND => "ScatterND",
            OpKind::Transpose => "Transpose",
            OpKind::ConstantOfShape => "ConstantOfShape",
            OpKind::Softmax => "Softmax",
            OpKind::ArgMax => "ArgMax",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    /// Inputs: `x, weight[, bias]`.
    Conv(ConvAttrs),
    /// Inputs: `x, scale, bias, mean, var` (inference form).
    BatchNorm { epsilon: f32 },
    Relu,
    Add,
    /// Always the channel axis in this IR.
    Concat { axis: i64 },
    /// Bilinear, half-pixel coordinates. Scales apply to H and W.
    Resize { scales: [f32; 2] },
    MaxPool(PoolAttrs),
    /// Inputs: `data, indices, updates`.
    ScatterND,
    Transpose { perm: Vec<usize> },
    /// Input: an int64 shape initializer.
    ConstantOfShape { value: f32 },
    Softmax { axis: i64 },
    ArgMax { axis: i64, keepdims: bool },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Conv(_) => OpKind::Conv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu => OpKind::Relu,
            Op::Add => OpKind::Add,
            Op::Concat { .. } => OpKind::Concat,
            Op::Resize { .. } => OpKind::Resize,
            Op::MaxPool(_) => OpKind::MaxPool,
            Op::ScatterND => OpKind::ScatterND,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::ConstantOfShape { .. } => OpKind::ConstantOfShape,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::ArgMax { .. } => OpKind::ArgMax,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Node {
    pub fn new(name: impl Into<String>, op: Op, inputs: Vec<String>, outputs: Vec<String>) -> Self {
        Self {
            name: name.into(),
            op,
            inputs,
            outputs,
        }
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

/// A constant tensor stored with the model.
#[derive(Clone, Debug, PartialEq)]
pub enum Initializer {
    Float(Tensor<f32>),
    Int64(Tensor<i64>),
}

impl Initializer {
    pub fn shape(&self) -> &[usize] {
        match self {
            Initializer::Float(t) => t.shape(),
            Initializer::Int64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Initializer::Float(_) => DType::Float32,
            Initializer::Int64(_) => DType::Int64,
        }
    }

    pub fn as_float(&self) -> Option<&Tensor<f32>> {
        match self {
            Initializer::Float(t) => Some(t),
            Initializer::Int64(_) => None,
        }
    }

    pub fn as_int(&self) -> Option<&Tensor<i64>> {
        match self {
            Initializer::Int64(t) => Some(t),
            Initializer::Float(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Initializer::Float(t) => t.len(),
            Initializer::Int64(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0` and compares NaN payloads).
    pub fn bits_eq(&self, other: &Initializer) -> bool {
        match (self, other) {
            (Initializer::Float(a), Initializer::Float(b)) => {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Initializer::Int64(a), Initializer::Int64(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphModel {
    pub name: String,
    pub opset: i64,
    pub inputs: Vec<GraphInput>,
    pub outputs: Vec<String>,
    pub nodes: Vec<Node>,
    pub initializers: BTreeMap<String, Initializer>,
    /// Shapes of every non-parameter tensor, filled by shape inference.
    pub value_shapes: BTreeMap<String, Vec<usize>>,
}

impl GraphModel {
    pub fn float_param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.initializers
            .get(name)
            .and_then(Initializer::as_float)
            .ok_or_else(|| Error::InvalidGraph(format!("missing float parameter `{name}`")))
    }

    pub fn float_param_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        match self.initializers.get_mut(name) {
            Some(Initializer::Float(t)) => Ok(t),
            _ => Err(Error::InvalidGraph(format!("missing float parameter `{name}`"))),
        }
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn shape_of(&self, tensor: &str) -> Result<&[usize]> {
        if let Some(s) = self.value_shapes.get(tensor) {
            return Ok(s);
        }
        if let Some(init) = self.initializers.get(tensor) {
            return Ok(init.shape());
        }
        Err(Error::InvalidGraph(format!("no shape known for `{tensor}`")))
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }

    /// Map from tensor name to the index of the node producing it.
    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for out in &node.outputs {
                map.insert(out.as_str(), i);
            }
        }
        map
    }

    /// Map from tensor name to the indices of the nodes consuming it.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            for inp in &node.inputs {
                map.entry(inp.as_str()).or_default().push(i);
            }
        }
        map
    }

    /// Node indices in a topological order. Ties are broken by position in
    /// `nodes`, so the order is deterministic.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let producers = self.producers();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut successors: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let mut preds = BTreeSet::new();
            for inp in &node.inputs {
                if let Some(&p) = producers.get(inp.as_str()) {
                    preds.insert(p);
                }
            }
            indegree[i] = preds.len();
            for p in preds {
                successors[p].push(i);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| Reverse(i))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &s in &successors[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(Reverse(s));
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::InvalidGraph("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Structural checks that do not need shapes: naming, resolvability,
    /// arity, acyclicity, exclusive parameter ownership.
    pub fn check_structure(&self) -> Result<()> {
        if self.opset < OPSET_VERSION {
            return Err(Error::InvalidGraph(format!(
                "opset {} is below the supported minimum {OPSET_VERSION}",
                self.opset
            )));
        }
        if self.inputs.is_empty() {
            return Err(Error::InvalidGraph("graph has no inputs".into()));
        }
        if self.outputs.is_empty() {
            return Err(Error::InvalidGraph("graph has no outputs".into()));
        }
        let mut defined: BTreeSet<&str> = BTreeSet::new();
        for inp in &self.inputs {
            if inp.name.is_empty() || !defined.insert(&inp.name) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate or empty graph input name `{}`",
                    inp.name
                )));
            }
            if self.initializers.contains_key(&inp.name) {
                return Err(Error::InvalidGraph(format!(
                    "graph input `{}` shadows an initializer",
                    inp.name
                )));
            }
        }
        for name in self.initializers.keys() {
            if name.is_empty() {
                return Err(Error::InvalidGraph("empty initializer name".into()));
            }
            defined.insert(name);
        }
        let mut node_names = BTreeSet::new();
        for node in &self.nodes {
            if !node_names.insert(node.name.as_str()) {
                return Err(Error::InvalidGraph(format!("duplicate node name `{}`", node.name)));
            }
            for out in &node.outputs {
                if out.is_empty() || !defined.insert(out) {
                    return Err(Error::InvalidGraph(format!(
                        "tensor `{out}` is defined more than once (node `{}`)",
                        node.name
                    )));
                }
            }
        }
        for node in &self.nodes {
            check_arity(node)?;
            for inp in &node.inputs {
                if !defined.contains(inp.as_str()) {
                    return Err(Error::MissingInput(format!("{inp} (node `{}`)", node.name)));
                }
            }
        }
        for out in &self.outputs {
            if !defined.contains(out.as_str()) || self.initializers.contains_key(out) {
                return Err(Error::InvalidGraph(format!("graph output `{out}` is not produced")));
            }
        }
        self.check_parameter_ownership()?;
        self.topo_order()?;
        Ok(())
    }

    /// Parameter slots of Conv and BatchNorm nodes must be initializers used by
    /// exactly one parameter slot; slicing would otherwise be ambiguous.
    fn check_parameter_ownership(&self) -> Result<()> {
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for node in &self.nodes {
            let slots: &[String] = match node.kind() {
                OpKind::Conv | OpKind::BatchNorm => &node.inputs[1..],
                _ => &[],
            };
            for p in slots {
                match self.initializers.get(p) {
                    Some(Initializer::Float(_)) => {}
                    _ => {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}`: parameter `{p}` must be a float initializer",
                            node.name
                        )))
                    }
                }
                if let Some(prev) = owner.insert(p, &node.name) {
                    return Err(Error::InvalidGraph(format!(
                        "parameter `{p}` is shared by nodes `{prev}` and `{}`",
                        node.name
                    )));
                }
            }
            if node.kind() != OpKind::Conv && node.kind() != OpKind::BatchNorm {
                // Activations may not be fed from float parameters, except
                // where the op takes constants.
                let const_slots: &[usize] = match node.kind() {
                    OpKind::ScatterND => &[1],
                    OpKind::ConstantOfShape => &[0],
                    _ => &[],
                };
                for (i, inp) in node.inputs.iter().enumerate() {
                    let is_init = self.initializers.contains_key(inp);
                    if const_slots.contains(&i) && !is_init {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}`: input {i} must be an initializer",
                            node.name
                        )));
                    }
                    if !const_slots.contains(&i) && is_init {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}`: activation input `{inp}` cannot be an initializer",
                            node.name
                        )));
                    }
                }
            } else if self.initializers.contains_key(&node.inputs[0]) {
                return Err(Error::InvalidGraph(format!(
                    "node `{}`: activation input cannot be an initializer",
                    node.name
                )));
            }
        }
        Ok(())
    }

    /// Full validation: structure, then shape inference from the declared
    /// input shapes. Returns the model with shapes filled.
    pub fn validated(&self) -> Result<GraphModel> {
        infer_shapes_declared(self)
    }

    /// Every tensor of the model with its kind and inferred shape.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let outputs: BTreeSet<&str> = self.outputs.iter().map(String::as_str).collect();
        let mut specs = Vec::new();
        for inp in &self.inputs {
            specs.push(TensorSpec {
                name: inp.name.clone(),
                dtype: DType::Float32,
                shape: inp.shape.clone(),
                kind: TensorKind::GraphInput,
            });
        }
        for node in &self.nodes {
            for out in &node.outputs {
                let dtype = if node.kind() == OpKind::ArgMax {
                    DType::Int64
                } else {
                    DType::Float32
                };
                specs.push(TensorSpec {
                    name: out.clone(),
                    dtype,
                    shape: self.value_shapes.get(out).cloned().unwrap_or_default(),
                    kind: if outputs.contains(out.as_str()) {
                        TensorKind::GraphOutput
                    } else {
                        TensorKind::Intermediate
                    },
                });
            }
        }
        for (name, init) in &self.initializers {
            specs.push(TensorSpec {
                name: name.clone(),
                dtype: init.dtype(),
                shape: init.shape().to_vec(),
                kind: TensorKind::Parameter,
            });
        }
        specs
    }

    /// Equality ignoring node names: compares topology (tensor wiring in node
    /// order), attributes, graph interface, and initializer bytes.
    pub fn structurally_eq(&self, other: &GraphModel) -> bool {
        self.opset == other.opset
            && self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
                a.op == b.op && a.inputs == b.inputs && a.outputs == b.outputs
            })
            && self.initializers.len() == other.initializers.len()
            && self
                .initializers
                .iter()
                .zip(&other.initializers)
                .all(|((na, a), (nb, b))| na == nb && a.bits_eq(b))
    }
}

fn check_arity(node: &Node) -> Result<()> {
    let (min_in, max_in) = match node.kind() {
        OpKind::Conv => (2, 3),
        OpKind::BatchNorm => (5, 5),
        OpKind::Relu | OpKind::Resize | OpKind::MaxPool | OpKind::Transpose => (1, 1),
        OpKind::Softmax | OpKind::ArgMax | OpKind::ConstantOfShape => (1, 1),
        OpKind::Add => (2, 2),
        OpKind::Concat => (1, usize::MAX),
        OpKind::ScatterND => (3, 3),
    };
    let n = node.inputs.len();
    if n < min_in || n > max_in {
        return Err(Error::InvalidGraph(format!(
            "node `{}` ({}) has {n} inputs",
            node.name,
            node.kind().onnx_name()
        )));
    }
    if node.outputs.len() != 1 {
        return Err(Error::InvalidGraph(format!(
            "node `{}` must have exactly one output",
            node.name
        )));
    }
    if node.inputs.iter().any(String::is_empty) {
        return Err(Error::InvalidGraph(format!(
            "node `{}` has an empty input name",
            node.name
        )));
    }
    match &node.op {
        Op::BatchNorm { epsilon } if !(*epsilon > 0.0 && epsilon.is_finite()) => Err(Error::attr(
            &node.name,
            "epsilon",
            format!("must be positive, got {epsilon}"),
        )),
        Op::Concat { axis } if *axis != 1 => Err(Error::attr(
            &node.name,
            "axis",
            format!("only the channel axis is supported, got {axis}"),
        )),
        Op::Softmax { axis } | Op::ArgMax { axis, .. } if *axis != 1 => Err(Error::attr(
            &node.name,
            "axis",
            format!("only the channel axis is supported, got {axis}"),
        )),
        Op::Conv(a) if a.kernel.contains(&0) || a.stride.contains(&0) => {
            Err(Error::attr(&node.name, "kernel_shape", "zero kernel or stride"))
        }
        Op::MaxPool(a) if a.kernel.contains(&0) || a.stride.contains(&0) => {
            Err(Error::attr(&node.name, "kernel_shape", "zero kernel or stride"))
        }
        Op::Resize { scales } if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) => {
            Err(Error::attr(&node.name, "scales", "scales must be positive"))
        }
        Op::Transpose { perm } => {
            let mut seen = vec![false; perm.len()];
            for &p in perm {
                if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::attr(&node.name, "perm", format!("{perm:?} is not a permutation")));
                }
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

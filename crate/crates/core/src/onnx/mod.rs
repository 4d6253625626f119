//! Reading and writing models in a restricted ONNX subset.
//!
//! Only the node kinds of [`crate::graph::OpKind`] are accepted, float32
//! activations in NCHW layout, default-domain opset 13 or newer, and static
//! shapes. Anything else is rejected at load time rather than coerced.
//!
//! Resize scales live in the IR as an attribute; on disk they become a
//! `<node>.scales` initializer wired into the node's third input, as the
//! opset requires.

pub mod proto;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use prost::Message;

use crate::error::{Error, Result};
use crate::graph::{ConvAttrs, GraphInput, GraphModel, Initializer, Node, Op, OpKind, PoolAttrs, DEFAULT_BN_EPSILON};
use crate::tensor::{checked_numel, Tensor};
use proto::*;

pub const IR_VERSION: i64 = 8;
pub const PRODUCER_NAME: &str = "netshrink";

/// Decode and validate a model from its serialized bytes.
pub fn decode_model(bytes: &[u8]) -> Result<GraphModel> {
    let proto = ModelProto::decode(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    from_proto(&proto)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GraphModel> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes)
}

/// Serialize a model. The output is a pure function of the model.
pub fn encode_model(model: &GraphModel) -> Result<Vec<u8>> {
    let model = model.validated()?;
    Ok(to_proto(&model)?.encode_to_vec())
}

pub fn save_model(model: &GraphModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------- encoding

fn attr_ints(name: &str, v: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: attribute_type::INTS,
        ints: v.to_vec(),
        ..Default::default()
    }
}

fn attr_int(name: &str, v: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: attribute_type::INT,
        i: Some(v),
        ..Default::default()
    }
}

fn attr_float(name: &str, v: f32) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: attribute_type::FLOAT,
        f: Some(v),
        ..Default::default()
    }
}

fn attr_str(name: &str, v: &str) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: attribute_type::STRING,
        s: v.as_bytes().to_vec(),
        ..Default::default()
    }
}

fn usizes(v: &[usize]) -> Vec<i64> {
    v.iter().map(|&x| x as i64).collect()
}

fn float_tensor_proto(name: &str, t: &Tensor<f32>) -> TensorProto {
    TensorProto {
        dims: usizes(t.shape()),
        data_type: data_type::FLOAT,
        name: name.into(),
        raw_data: t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn int_tensor_proto(name: &str, t: &Tensor<i64>) -> TensorProto {
    TensorProto {
        dims: usizes(t.shape()),
        data_type: data_type::INT64,
        name: name.into(),
        raw_data: t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn value_info(name: &str, elem_type: i32, shape: Option<&[usize]>) -> ValueInfoProto {
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            tensor_type: Some(TypeProtoTensor {
                elem_type,
                shape: shape.map(|s| TensorShapeProto {
                    dim: s
                        .iter()
                        .map(|&d| Dimension {
                            value: Some(DimValue::DimValue(d as i64)),
                        })
                        .collect(),
                }),
            }),
        }),
        doc_string: String::new(),
    }
}

fn resize_scales_name(node: &str) -> String {
    format!("{node}.scales")
}

fn to_proto(model: &GraphModel) -> Result<ModelProto> {
    let mut extra: BTreeMap<String, TensorProto> = BTreeMap::new();
    let mut nodes = Vec::with_capacity(model.nodes.len());
    for node in &model.nodes {
        let mut inputs = node.inputs.clone();
        let mut attrs = Vec::new();
        match &node.op {
            Op::Conv(a) => {
                attrs.push(attr_ints("dilations", &[1, 1]));
                attrs.push(attr_int("group", 1));
                attrs.push(attr_ints("kernel_shape", &usizes(&a.kernel)));
                attrs.push(attr_ints("pads", &usizes(&a.pads)));
                attrs.push(attr_ints("strides", &usizes(&a.stride)));
            }
            Op::BatchNorm { epsilon } => attrs.push(attr_float("epsilon", *epsilon)),
            Op::Relu | Op::Add | Op::ScatterND => {}
            Op::Concat { axis } => attrs.push(attr_int("axis", *axis)),
            Op::Resize { scales } => {
                attrs.push(attr_str("coordinate_transformation_mode", "half_pixel"));
                attrs.push(attr_str("mode", "linear"));
                let sname = resize_scales_name(&node.name);
                if model.initializers.contains_key(&sname) || model.value_shapes.contains_key(&sname) {
                    return Err(Error::InvalidGraph(format!(
                        "tensor name `{sname}` is reserved for Resize scales"
                    )));
                }
                let t = Tensor::from_vec(&[4], vec![1.0, 1.0, scales[0], scales[1]])?;
                extra.insert(sname.clone(), float_tensor_proto(&sname, &t));
                inputs.push(String::new());
                inputs.push(sname);
            }
            Op::MaxPool(a) => {
                attrs.push(attr_ints("kernel_shape", &usizes(&a.kernel)));
                attrs.push(attr_ints("pads", &usizes(&a.pads)));
                attrs.push(attr_ints("strides", &usizes(&a.stride)));
            }
            Op::Transpose { perm } => attrs.push(attr_ints("perm", &usizes(perm))),
            Op::ConstantOfShape { value } => {
                let t = Tensor::from_vec(&[1], vec![*value])?;
                attrs.push(AttributeProto {
                    name: "value".into(),
                    r#type: attribute_type::TENSOR,
                    t: Some(float_tensor_proto("value", &t)),
                    ..Default::default()
                });
            }
            Op::Softmax { axis } => attrs.push(attr_int("axis", *axis)),
            Op::ArgMax { axis, keepdims } => {
                attrs.push(attr_int("axis", *axis));
                attrs.push(attr_int("keepdims", *keepdims as i64));
            }
        }
        nodes.push(NodeProto {
            input: inputs,
            output: node.outputs.clone(),
            name: node.name.clone(),
            op_type: node.kind().onnx_name().into(),
            attribute: attrs,
            ..Default::default()
        });
    }

    let mut initializer: BTreeMap<String, TensorProto> = model
        .initializers
        .iter()
        .map(|(name, init)| {
            let p = match init {
                Initializer::Float(t) => float_tensor_proto(name, t),
                Initializer::Int64(t) => int_tensor_proto(name, t),
            };
            (name.clone(), p)
        })
        .collect();
    initializer.extend(extra);

    let elem_of = |name: &str| -> i32 {
        let argmax = model
            .nodes
            .iter()
            .any(|n| n.kind() == OpKind::ArgMax && n.outputs[0] == name);
        if argmax {
            data_type::INT64
        } else {
            data_type::FLOAT
        }
    };
    let graph_outputs: BTreeSet<&str> = model.outputs.iter().map(String::as_str).collect();
    let graph = GraphProto {
        node: nodes,
        name: model.name.clone(),
        initializer: initializer.into_values().collect(),
        input: model
            .inputs
            .iter()
            .map(|i| value_info(&i.name, data_type::FLOAT, Some(&i.shape)))
            .collect(),
        output: model
            .outputs
            .iter()
            .map(|o| value_info(o, elem_of(o), model.value_shapes.get(o).map(Vec::as_slice)))
            .collect(),
        value_info: model
            .nodes
            .iter()
            .flat_map(|n| n.outputs.iter())
            .filter(|o| !graph_outputs.contains(o.as_str()))
            .map(|o| value_info(o, elem_of(o), model.value_shapes.get(o).map(Vec::as_slice)))
            .collect(),
        ..Default::default()
    };
    Ok(ModelProto {
        ir_version: IR_VERSION,
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: model.opset,
        }],
        producer_name: PRODUCER_NAME.into(),
        producer_version: env!("CARGO_PKG_VERSION").into(),
        graph: Some(graph),
        ..Default::default()
    })
}

// ---------------------------------------------------------------- decoding

fn is_default_domain(d: &str) -> bool {
    d.is_empty() || d == "ai.onnx"
}

fn dims_of(name: &str, dims: &[i64]) -> Result<Vec<usize>> {
    dims.iter()
        .map(|&d| {
            usize::try_from(d).map_err(|_| Error::Decode(format!("tensor `{name}` has negative dim {d}")))
        })
        .collect()
}

fn tensor_from_proto(t: &TensorProto) -> Result<Initializer> {
    if t.data_location != 0 {
        return Err(Error::Decode(format!("tensor `{}` uses external data", t.name)));
    }
    let shape = dims_of(&t.name, &t.dims)?;
    let n = checked_numel(&shape).ok_or_else(|| Error::Decode(format!("tensor `{}` is too large", t.name)))?;
    let bad_len = |got: usize| Error::Decode(format!("tensor `{}`: {got} values for shape {shape:?}", t.name));
    match t.data_type {
        data_type::FLOAT => {
            let data: Vec<f32> = if !t.raw_data.is_empty() {
                if Some(t.raw_data.len()) != n.checked_mul(4) {
                    return Err(bad_len(t.raw_data.len() / 4));
                }
                t.raw_data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect()
            } else {
                if t.float_data.len() != n {
                    return Err(bad_len(t.float_data.len()));
                }
                t.float_data.clone()
            };
            Ok(Initializer::Float(Tensor::from_vec(&shape, data)?))
        }
        data_type::INT64 => {
            let data: Vec<i64> = if !t.raw_data.is_empty() {
                if Some(t.raw_data.len()) != n.checked_mul(8) {
                    return Err(bad_len(t.raw_data.len() / 8));
                }
                t.raw_data
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            } else {
                if t.int64_data.len() != n {
                    return Err(bad_len(t.int64_data.len()));
                }
                t.int64_data.clone()
            };
            Ok(Initializer::Int64(Tensor::from_vec(&shape, data)?))
        }
        other => Err(Error::Decode(format!(
            "tensor `{}` has unsupported data type {other} (only float32 and int64)",
            t.name
        ))),
    }
}

struct Attrs<'a> {
    node: &'a str,
    map: HashMap<&'a str, &'a AttributeProto>,
}

impl<'a> Attrs<'a> {
    fn new(node: &'a NodeProto) -> Result<Self> {
        let mut map = HashMap::new();
        for a in &node.attribute {
            if map.insert(a.name.as_str(), a).is_some() {
                return Err(Error::attr(&node.name, &a.name, "duplicate attribute"));
            }
        }
        Ok(Self { node: &node.name, map })
    }

    /// Fail on any attribute outside `known`.
    fn only(&self, known: &[&str]) -> Result<()> {
        for name in self.map.keys() {
            if !known.contains(name) {
                return Err(Error::attr(self.node, name, "attribute not supported"));
            }
        }
        Ok(())
    }

    fn typed(&self, name: &str, ty: i32) -> Result<Option<&'a AttributeProto>> {
        match self.map.get(name) {
            None => Ok(None),
            Some(a) if a.r#type == ty || a.r#type == 0 => Ok(Some(a)),
            Some(a) => Err(Error::attr(self.node, name, format!("unexpected attribute type {}", a.r#type))),
        }
    }

    fn int(&self, name: &str) -> Result<Option<i64>> {
        Ok(self.typed(name, attribute_type::INT)?.map(|a| a.i.unwrap_or(0)))
    }

    fn float(&self, name: &str) -> Result<Option<f32>> {
        Ok(self.typed(name, attribute_type::FLOAT)?.map(|a| a.f.unwrap_or(0.0)))
    }

    fn ints(&self, name: &str) -> Result<Option<&'a [i64]>> {
        Ok(self.typed(name, attribute_type::INTS)?.map(|a| a.ints.as_slice()))
    }

    fn string(&self, name: &str) -> Result<Option<String>> {
        Ok(self
            .typed(name, attribute_type::STRING)?
            .map(|a| String::from_utf8_lossy(&a.s).into_owned()))
    }

    fn usize_pair(&self, name: &str, default: [usize; 2]) -> Result<[usize; 2]> {
        match self.ints(name)? {
            None => Ok(default),
            Some(v) if v.len() == 2 && v.iter().all(|&x| x > 0 && x < 1 << 20) => Ok([v[0] as usize, v[1] as usize]),
            Some(v) => Err(Error::attr(self.node, name, format!("expected two positive values, got {v:?}"))),
        }
    }

    fn pads(&self) -> Result<[usize; 4]> {
        match self.ints("pads")? {
            None => Ok([0; 4]),
            Some(v) if v.len() == 4 && v.iter().all(|&x| (0..1 << 20).contains(&x)) => {
                Ok([v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize])
            }
            Some(v) => Err(Error::attr(self.node, "pads", format!("expected four non-negative values, got {v:?}"))),
        }
    }

    fn require_ones(&self, name: &str) -> Result<()> {
        if let Some(v) = self.ints(name)? {
            if v.iter().any(|&d| d != 1) {
                return Err(Error::attr(self.node, name, format!("only 1 is supported, got {v:?}")));
            }
        }
        Ok(())
    }

    fn require_int(&self, name: &str, expected: i64) -> Result<()> {
        match self.int(name)? {
            Some(v) if v != expected => Err(Error::attr(self.node, name, format!("only {expected} is supported, got {v}"))),
            _ => Ok(()),
        }
    }

    fn require_auto_pad_notset(&self) -> Result<()> {
        match self.string("auto_pad")?.as_deref() {
            None | Some("NOTSET") => Ok(()),
            Some(v) => Err(Error::attr(self.node, "auto_pad", format!("`{v}` is not supported"))),
        }
    }
}

/// Normalize a possibly negative rank-4 axis to the channel axis.
fn channel_axis(node: &str, attr: &str, axis: i64) -> Result<i64> {
    let a = if axis < 0 { axis + 4 } else { axis };
    if a != 1 {
        return Err(Error::attr(node, attr, format!("only the channel axis is supported, got {axis}")));
    }
    Ok(1)
}

fn node_from_proto(
    n: &NodeProto,
    inits: &BTreeMap<String, Initializer>,
    consumed_scales: &mut BTreeSet<String>,
) -> Result<Node> {
    let name = n.name.as_str();
    if !is_default_domain(&n.domain) {
        return Err(Error::UnsupportedOp {
            node: name.into(),
            op: format!("{}::{}", n.domain, n.op_type),
        });
    }
    let a = Attrs::new(n)?;
    let mut inputs = n.input.clone();
    let op = match n.op_type.as_str() {
        "Conv" => {
            a.only(&["auto_pad", "dilations", "group", "kernel_shape", "pads", "strides"])?;
            a.require_auto_pad_notset()?;
            a.require_ones("dilations")?;
            a.require_int("group", 1)?;
            let weight_kernel = inputs
                .get(1)
                .and_then(|w| inits.get(w))
                .map(|w| w.shape().to_vec())
                .filter(|s| s.len() == 4)
                .map(|s| [s[2], s[3]]);
            let kernel = match (a.ints("kernel_shape")?, weight_kernel) {
                (Some(_), _) => a.usize_pair("kernel_shape", [1, 1])?,
                (None, Some(k)) => k,
                (None, None) => return Err(Error::attr(name, "kernel_shape", "cannot be inferred")),
            };
            Op::Conv(ConvAttrs {
                kernel,
                stride: a.usize_pair("strides", [1, 1])?,
                pads: a.pads()?,
            })
        }
        "BatchNormalization" => {
            a.only(&["epsilon", "momentum", "training_mode"])?;
            a.require_int("training_mode", 0)?;
            Op::BatchNorm {
                epsilon: a.float("epsilon")?.unwrap_or(DEFAULT_BN_EPSILON),
            }
        }
        "Relu" => {
            a.only(&[])?;
            Op::Relu
        }
        "Add" => {
            a.only(&[])?;
            Op::Add
        }
        "Concat" => {
            a.only(&["axis"])?;
            let axis = a.int("axis")?.ok_or_else(|| Error::attr(name, "axis", "required"))?;
            Op::Concat {
                axis: channel_axis(name, "axis", axis)?,
            }
        }
        "Resize" => {
            a.only(&[
                "coordinate_transformation_mode",
                "cubic_coeff_a",
                "exclude_outside",
                "extrapolation_value",
                "mode",
                "nearest_mode",
            ])?;
            match a.string("mode")?.as_deref() {
                Some("linear") => {}
                other => return Err(Error::attr(name, "mode", format!("only `linear` is supported, got {other:?}"))),
            }
            match a.string("coordinate_transformation_mode")?.as_deref() {
                None | Some("half_pixel") => {}
                Some(other) => {
                    return Err(Error::attr(
                        name,
                        "coordinate_transformation_mode",
                        format!("only `half_pixel` is supported, got `{other}`"),
                    ))
                }
            }
            a.require_int("exclude_outside", 0)?;
            if inputs.len() != 3 || !inputs[1].is_empty() {
                return Err(Error::attr(name, "inputs", "expected (X, '', scales) with no roi or sizes"));
            }
            let scales = inits
                .get(&inputs[2])
                .and_then(Initializer::as_float)
                .ok_or_else(|| Error::attr(name, "scales", "must be a float initializer"))?;
            let s = scales.data();
            if s.len() != 4 || s[0] != 1.0 || s[1] != 1.0 {
                return Err(Error::attr(name, "scales", format!("only spatial scaling is supported, got {s:?}")));
            }
            consumed_scales.insert(inputs[2].clone());
            inputs.truncate(1);
            Op::Resize { scales: [s[2], s[3]] }
        }
        "MaxPool" => {
            a.only(&["auto_pad", "ceil_mode", "dilations", "kernel_shape", "pads", "storage_order", "strides"])?;
            a.require_auto_pad_notset()?;
            a.require_int("ceil_mode", 0)?;
            a.require_int("storage_order", 0)?;
            a.require_ones("dilations")?;
            if a.ints("kernel_shape")?.is_none() {
                return Err(Error::attr(name, "kernel_shape", "required"));
            }
            Op::MaxPool(PoolAttrs {
                kernel: a.usize_pair("kernel_shape", [1, 1])?,
                stride: a.usize_pair("strides", [1, 1])?,
                pads: a.pads()?,
            })
        }
        "ScatterND" => {
            a.only(&["reduction"])?;
            match a.string("reduction")?.as_deref() {
                None | Some("none") => {}
                Some(other) => return Err(Error::attr(name, "reduction", format!("`{other}` is not supported"))),
            }
            Op::ScatterND
        }
        "Transpose" => {
            a.only(&["perm"])?;
            let perm = a.ints("perm")?.ok_or_else(|| Error::attr(name, "perm", "required"))?;
            let perm = perm
                .iter()
                .map(|&p| usize::try_from(p).map_err(|_| Error::attr(name, "perm", "negative entry")))
                .collect::<Result<Vec<_>>>()?;
            Op::Transpose { perm }
        }
        "ConstantOfShape" => {
            a.only(&["value"])?;
            let value = match a.typed("value", attribute_type::TENSOR)? {
                None => 0.0,
                Some(attr) => {
                    let t = attr.t.as_ref().ok_or_else(|| Error::attr(name, "value", "missing tensor"))?;
                    match tensor_from_proto(t)? {
                        Initializer::Float(t) if t.len() == 1 => t.data()[0],
                        _ => return Err(Error::attr(name, "value", "must be a single float32")),
                    }
                }
            };
            Op::ConstantOfShape { value }
        }
        "Softmax" => {
            a.only(&["axis"])?;
            Op::Softmax {
                axis: channel_axis(name, "axis", a.int("axis")?.unwrap_or(-1))?,
            }
        }
        "ArgMax" => {
            a.only(&["axis", "keepdims", "select_last_index"])?;
            a.require_int("select_last_index", 0)?;
            let keepdims = match a.int("keepdims")?.unwrap_or(1) {
                0 => false,
                1 => true,
                v => return Err(Error::attr(name, "keepdims", format!("must be 0 or 1, got {v}"))),
            };
            Op::ArgMax {
                axis: channel_axis(name, "axis", a.int("axis")?.unwrap_or(0))?,
                keepdims,
            }
        }
        other => {
            return Err(Error::UnsupportedOp {
                node: name.into(),
                op: other.into(),
            })
        }
    };
    Ok(Node::new(name, op, inputs, n.output.clone()))
}

fn from_proto(proto: &ModelProto) -> Result<GraphModel> {
    let mut opset = None;
    for o in &proto.opset_import {
        if is_default_domain(&o.domain) {
            opset = Some(o.version);
        }
    }
    let opset = opset.ok_or_else(|| Error::Decode("model declares no default-domain opset".into()))?;
    let graph = proto.graph.as_ref().ok_or_else(|| Error::Decode("model has no graph".into()))?;

    let mut inits = BTreeMap::new();
    for t in &graph.initializer {
        if inits.insert(t.name.clone(), tensor_from_proto(t)?).is_some() {
            return Err(Error::Decode(format!("duplicate initializer `{}`", t.name)));
        }
    }

    let mut inputs = Vec::new();
    for vi in &graph.input {
        if inits.contains_key(&vi.name) {
            continue;
        }
        let tt = vi
            .r#type
            .as_ref()
            .and_then(|t| t.tensor_type.as_ref())
            .ok_or_else(|| Error::Decode(format!("input `{}` is not a tensor", vi.name)))?;
        if tt.elem_type != data_type::FLOAT {
            return Err(Error::Decode(format!("input `{}` must be float32", vi.name)));
        }
        let dims = tt
            .shape
            .as_ref()
            .ok_or_else(|| Error::Decode(format!("input `{}` has no shape", vi.name)))?;
        let shape = dims
            .dim
            .iter()
            .map(|d| match d.value {
                Some(DimValue::DimValue(v)) if v > 0 => Ok(v as usize),
                _ => Err(Error::Decode(format!("input `{}` must have static positive dims", vi.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        inputs.push(GraphInput {
            name: vi.name.clone(),
            shape,
        });
    }

    let mut consumed_scales = BTreeSet::new();
    let nodes = graph
        .node
        .iter()
        .map(|n| node_from_proto(n, &inits, &mut consumed_scales))
        .collect::<Result<Vec<_>>>()?;
    // Scales are folded into Resize attributes; drop them unless some other
    // node also reads them (which validation will then reject).
    for s in consumed_scales {
        if !nodes.iter().any(|n| n.inputs.contains(&s)) {
            inits.remove(&s);
        }
    }

    let model = GraphModel {
        name: graph.name.clone(),
        opset,
        inputs,
        outputs: graph.output.iter().map(|o| o.name.clone()).collect(),
        nodes,
        initializers: inits,
        value_shapes: BTreeMap::new(),
    };
    model.validated()
}

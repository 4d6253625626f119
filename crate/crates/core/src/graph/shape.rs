use std::collections::{BTreeMap, HashMap};

use super::{GraphInput, GraphModel, Initializer, Node, Op};
use crate::error::{Error, Result};
use crate::tensor::checked_numel;

/// Fill `value_shapes` for a model whose single graph input is given `input_shape`.
pub fn infer_shapes(model: &GraphModel, input_shape: &[usize]) -> Result<GraphModel> {
    if model.inputs.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "infer_shapes expects a single graph input, model has {}",
            model.inputs.len()
        )));
    }
    let mut m = model.clone();
    m.inputs[0].shape = input_shape.to_vec();
    infer_shapes_declared(&m)
}

/// Fill `value_shapes` from the shapes declared on the graph inputs.
pub fn infer_shapes_declared(model: &GraphModel) -> Result<GraphModel> {
    model.check_structure()?;
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for GraphInput { name, shape } in &model.inputs {
        check_activation_shape(name, shape)?;
        shapes.insert(name.clone(), shape.clone());
    }
    for idx in model.topo_order()? {
        let node = &model.nodes[idx];
        let lookup: HashMap<&str, &[usize]> = node
            .inputs
            .iter()
            .filter_map(|n| {
                shapes
                    .get(n)
                    .map(|s| (n.as_str(), s.as_slice()))
                    .or_else(|| model.initializers.get(n).map(|i| (n.as_str(), i.shape())))
            })
            .collect();
        let out = node_output_shape(node, &lookup, &model.initializers)?;
        shapes.insert(node.outputs[0].clone(), out);
    }
    let mut m = model.clone();
    m.value_shapes = shapes;
    Ok(m)
}

fn check_activation_shape(name: &str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape.contains(&0) {
        return Err(Error::InvalidGraph(format!(
            "input `{name}` must have a positive rank-4 NCHW shape, got {shape:?}"
        )));
    }
    if checked_numel(shape).is_none() {
        return Err(Error::InvalidGraph(format!("input `{name}` is too large")));
    }
    Ok(())
}

fn rank4<'a>(node: &Node, shapes: &HashMap<&str, &'a [usize]>, slot: usize) -> Result<&'a [usize]> {
    let s = input_shape(node, shapes, slot)?;
    if s.len() != 4 {
        return Err(Error::shape(&node.name, format!("input {slot} must be rank 4, got {s:?}")));
    }
    Ok(s)
}

fn input_shape<'a>(node: &Node, shapes: &HashMap<&str, &'a [usize]>, slot: usize) -> Result<&'a [usize]> {
    shapes
        .get(node.inputs[slot].as_str())
        .copied()
        .ok_or_else(|| Error::MissingInput(node.inputs[slot].clone()))
}

fn window_out(node: &Node, len: usize, pad: usize, kernel: usize, stride: usize) -> Result<usize> {
    let padded = len
        .checked_add(pad)
        .ok_or_else(|| Error::shape(&node.name, "padding overflow"))?;
    if padded < kernel {
        return Err(Error::shape(
            &node.name,
            format!("kernel {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output shape of one node from its input shapes.
pub(crate) fn node_output_shape(
    node: &Node,
    shapes: &HashMap<&str, &[usize]>,
    inits: &BTreeMap<String, Initializer>,
) -> Result<Vec<usize>> {
    let name = node.name.as_str();
    match &node.op {
        Op::Conv(a) => {
            let x = rank4(node, shapes, 0)?;
            let w = input_shape(node, shapes, 1)?;
            if w.len() != 4 {
                return Err(Error::shape(name, format!("weight must be rank 4, got {w:?}")));
            }
            if w[1] != x[1] {
                return Err(Error::shape(
                    name,
                    format!("weight expects {} input channels, input has {}", w[1], x[1]),
                ));
            }
            if w[2] != a.kernel[0] || w[3] != a.kernel[1] {
                return Err(Error::shape(
                    name,
                    format!("weight kernel {:?} disagrees with kernel_shape {:?}", &w[2..], a.kernel),
                ));
            }
            if w[0] == 0 {
                return Err(Error::shape(name, "conv has zero output channels"));
            }
            if node.inputs.len() == 3 {
                let b = input_shape(node, shapes, 2)?;
                if b != [w[0]] {
                    return Err(Error::shape(name, format!("bias shape {b:?}, expected [{}]", w[0])));
                }
            }
            let h = window_out(node, x[2], a.pads[0] + a.pads[2], a.kernel[0], a.stride[0])?;
            let wd = window_out(node, x[3], a.pads[1] + a.pads[3], a.kernel[1], a.stride[1])?;
            Ok(vec![x[0], w[0], h, wd])
        }
        Op::BatchNorm { .. } => {
            let x = rank4(node, shapes, 0)?;
            for slot in 1..5 {
                let p = input_shape(node, shapes, slot)?;
                if p != [x[1]] {
                    return Err(Error::shape(
                        name,
                        format!("parameter {} has shape {p:?}, expected [{}]", node.inputs[slot], x[1]),
                    ));
                }
            }
            if let Some(Initializer::Float(var)) = inits.get(&node.inputs[4]) {
                if var.data().iter().any(|v| v.is_nan() || *v <= 0.0) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{name}`: running variance must be positive"
                    )));
                }
            }
            Ok(x.to_vec())
        }
        Op::Relu | Op::Softmax { .. } => Ok(rank4(node, shapes, 0)?.to_vec()),
        Op::Add => {
            let a = rank4(node, shapes, 0)?;
            let b = rank4(node, shapes, 1)?;
            if a != b {
                return Err(Error::shape(name, format!("Add operands differ: {a:?} vs {b:?}")));
            }
            Ok(a.to_vec())
        }
        Op::Concat { .. } => {
            let first = rank4(node, shapes, 0)?;
            let mut out = first.to_vec();
            out[1] = 0;
            for slot in 0..node.inputs.len() {
                let s = rank4(node, shapes, slot)?;
                if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
                    return Err(Error::shape(
                        name,
                        format!("Concat operands differ outside the channel axis: {first:?} vs {s:?}"),
                    ));
                }
                out[1] += s[1];
            }
            Ok(out)
        }
        Op::Resize { scales } => {
            let x = rank4(node, shapes, 0)?;
            let h = (x[2] as f64 * scales[0] as f64).floor();
            let w = (x[3] as f64 * scales[1] as f64).floor();
            if !(h >= 1.0 && w >= 1.0 && h < 1e9 && w < 1e9) {
                return Err(Error::shape(name, format!("Resize produces an invalid size {h}x{w}")));
            }
            Ok(vec![x[0], x[1], h as usize, w as usize])
        }
        Op::MaxPool(a) => {
            let x = rank4(node, shapes, 0)?;
            if a.pads[0] >= a.kernel[0] || a.pads[2] >= a.kernel[0] || a.pads[1] >= a.kernel[1] || a.pads[3] >= a.kernel[1] {
                return Err(Error::attr(name, "pads", "padding must be smaller than the kernel"));
            }
            let h = window_out(node, x[2], a.pads[0] + a.pads[2], a.kernel[0], a.stride[0])?;
            let w = window_out(node, x[3], a.pads[1] + a.pads[3], a.kernel[1], a.stride[1])?;
            Ok(vec![x[0], x[1], h, w])
        }
        Op::Transpose { perm } => {
            let x = input_shape(node, shapes, 0)?;
            if perm.len() != x.len() {
                return Err(Error::shape(name, format!("perm {perm:?} does not match rank {}", x.len())));
            }
            Ok(perm.iter().map(|&p| x[p]).collect())
        }
        Op::ConstantOfShape { .. } => {
            let t = inits
                .get(&node.inputs[0])
                .and_then(Initializer::as_int)
                .ok_or_else(|| Error::InvalidGraph(format!("node `{name}`: shape must be an int64 initializer")))?;
            if t.rank() != 1 || t.data().iter().any(|&d| d <= 0) {
                return Err(Error::shape(name, format!("invalid target shape {:?}", t.data())));
            }
            let out: Vec<usize> = t.data().iter().map(|&d| d as usize).collect();
            if checked_numel(&out).is_none() {
                return Err(Error::shape(name, "target shape too large"));
            }
            Ok(out)
        }
        Op::ScatterND => {
            let data = input_shape(node, shapes, 0)?;
            let idx = inits
                .get(&node.inputs[1])
                .and_then(Initializer::as_int)
                .ok_or_else(|| Error::InvalidGraph(format!("node `{name}`: indices must be an int64 initializer")))?;
            let upd = input_shape(node, shapes, 2)?;
            let q = idx.rank();
            if q == 0 {
                return Err(Error::shape(name, "indices must have rank >= 1"));
            }
            let k = idx.shape()[q - 1];
            if k == 0 || k > data.len() {
                return Err(Error::shape(name, format!("index depth {k} invalid for data rank {}", data.len())));
            }
            let mut expected: Vec<usize> = idx.shape()[..q - 1].to_vec();
            expected.extend_from_slice(&data[k..]);
            if upd != expected.as_slice() {
                return Err(Error::shape(
                    name,
                    format!("updates shape {upd:?}, expected {expected:?}"),
                ));
            }
            for tuple in idx.data().chunks(k) {
                for (d, &i) in tuple.iter().enumerate() {
                    let dim = data[d] as i64;
                    if i < -dim || i >= dim {
                        return Err(Error::shape(name, format!("index {i} out of range for dim {dim}")));
                    }
                }
            }
            Ok(data.to_vec())
        }
        Op::ArgMax { keepdims, .. } => {
            let x = rank4(node, shapes, 0)?;
            if *keepdims {
                Ok(vec![x[0], 1, x[2], x[3]])
            } else {
                Ok(vec![x[0], x[2], x[3]])
            }
        }
    }
}

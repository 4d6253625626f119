//! Parameter and MAC accounting.
//!
//! The headline parameter count covers learnable weights only: Conv weights
//! and biases plus BN γ and β. Running statistics and the int64 constants of
//! scatter chains are reported separately. MACs are counted for convolutions
//! only (`Cout·Hout·Wout·Cin·kH·kW`, bias excluded); every other node kind
//! contributes zero.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{GraphModel, Initializer, Op, OpKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct NodeCost {
    pub node: String,
    pub op: OpKind,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub headline: u64,
    pub running_stats: u64,
    pub index_constants: u64,
    /// Headline parameters per Conv / BatchNorm node.
    pub per_node: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MacCount {
    pub total: u64,
    pub per_node: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub macs: u64,
    pub running_stats: u64,
    pub index_constants: u64,
    pub breakdown: Vec<NodeCost>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mac_fraction: Option<f64>,
}

fn len_of(model: &GraphModel, name: &str) -> u64 {
    model.initializers.get(name).map_or(0, |i| i.len() as u64)
}

pub fn count_params(model: &GraphModel) -> ParamCount {
    let mut headline = 0;
    let mut running_stats = 0;
    let mut per_node = Vec::new();
    for node in &model.nodes {
        let p = match node.kind() {
            OpKind::Conv => node.inputs[1..].iter().map(|n| len_of(model, n)).sum(),
            OpKind::BatchNorm => {
                running_stats += len_of(model, &node.inputs[3]) + len_of(model, &node.inputs[4]);
                len_of(model, &node.inputs[1]) + len_of(model, &node.inputs[2])
            }
            _ => continue,
        };
        headline += p;
        per_node.push((node.name.clone(), p));
    }
    let index_constants = model
        .initializers
        .values()
        .filter(|i| matches!(i, Initializer::Int64(_)))
        .map(|i| i.len() as u64)
        .sum();
    ParamCount {
        headline,
        running_stats,
        index_constants,
        per_node,
    }
}

/// Convolution MACs at the model's declared input shape.
pub fn count_macs(model: &GraphModel) -> Result<MacCount> {
    let model = if model.value_shapes.is_empty() {
        model.validated()?
    } else {
        model.clone()
    };
    let mut total = 0u64;
    let mut per_node = Vec::new();
    for node in &model.nodes {
        if let Op::Conv(a) = &node.op {
            let w = model.shape_of(&node.inputs[1])?;
            let out = model.shape_of(node.output())?;
            let macs = (out[1] * out[2] * out[3]) as u64 * (w[1] * a.kernel[0] * a.kernel[1]) as u64;
            total += macs;
            per_node.push((node.name.clone(), macs));
        }
    }
    Ok(MacCount { total, per_node })
}

/// Convolution MACs with the single graph input resized to `input_shape`.
pub fn count_macs_at(model: &GraphModel, input_shape: &[usize]) -> Result<MacCount> {
    count_macs(&crate::graph::infer_shapes(model, input_shape)?)
}

/// Full report, with fractions relative to `baseline` when given.
pub fn cost_report(model: &GraphModel, baseline: Option<&GraphModel>) -> Result<CostReport> {
    let p = count_params(model);
    let m = count_macs(model)?;
    let params_of: std::collections::HashMap<&str, u64> = p.per_node.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let macs_of: std::collections::HashMap<&str, u64> = m.per_node.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let breakdown = model
        .nodes
        .iter()
        .map(|n| NodeCost {
            node: n.name.clone(),
            op: n.kind(),
            params: params_of.get(n.name.as_str()).copied().unwrap_or(0),
            macs: macs_of.get(n.name.as_str()).copied().unwrap_or(0),
        })
        .collect();
    let (param_fraction, mac_fraction) = match baseline {
        Some(b) => {
            let bp = count_params(b).headline;
            let bm = count_macs(b)?.total;
            (
                (bp > 0).then(|| p.headline as f64 / bp as f64),
                (bm > 0).then(|| m.total as f64 / bm as f64),
            )
        }
        None => (None, None),
    };
    Ok(CostReport {
        params: p.headline,
        macs: m.total,
        running_stats: p.running_stats,
        index_constants: p.index_constants,
        breakdown,
        param_fraction,
        mac_fraction,
    })
}

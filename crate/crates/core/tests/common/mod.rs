//! Oracles that recompute results from the raw graph, without going through
//! the partition or shrinker code paths.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use netshrink::exec::Value;
use netshrink::graph::{GraphModel, Op};
use netshrink::prune::PruneMask;

/// Live channels of every activation tensor under `mask`, propagated node by
/// node. Mask keys are Conv output tensors.
pub fn live_channels(model: &GraphModel, mask: &PruneMask) -> BTreeMap<String, Vec<usize>> {
    let mut live: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let full = |m: &GraphModel, t: &str| (0..m.value_shapes[t][1]).collect::<Vec<_>>();
    for i in &model.inputs {
        live.insert(i.name.clone(), (0..i.shape[1]).collect());
    }
    for n in &model.nodes {
        let out = &n.outputs[0];
        let s = match &n.op {
            Op::Conv(_) => mask.kept.get(out).cloned().unwrap_or_else(|| full(model, out)),
            Op::BatchNorm { .. } | Op::Relu | Op::Resize { .. } | Op::MaxPool(_) => live[&n.inputs[0]].clone(),
            Op::Add => {
                let u: BTreeSet<usize> = n.inputs.iter().flat_map(|t| live[t].iter().copied()).collect();
                u.into_iter().collect()
            }
            Op::Concat { .. } => {
                let mut off = 0;
                let mut v = Vec::new();
                for t in &n.inputs {
                    v.extend(live[t].iter().map(|c| c + off));
                    off += model.value_shapes[t][1];
                }
                v
            }
            Op::ArgMax { .. } => vec![0],
            _ => full(model, out),
        };
        live.insert(out.clone(), s);
    }
    live
}

/// Add inputs whose live set differs from the Add's live set.
pub fn mismatched_add_inputs(model: &GraphModel, live: &BTreeMap<String, Vec<usize>>) -> BTreeMap<String, usize> {
    model
        .nodes
        .iter()
        .filter(|n| matches!(n.op, Op::Add))
        .map(|n| {
            let out = &live[&n.outputs[0]];
            (n.name.clone(), n.inputs.iter().filter(|t| &live[*t] != out).count())
        })
        .collect()
}

/// Conv MACs of the physically shrunk network, computed on the original
/// graph: each Conv sees only the live channels of its input and output.
pub fn expected_macs(model: &GraphModel, live: &BTreeMap<String, Vec<usize>>) -> u64 {
    model
        .nodes
        .iter()
        .filter_map(|n| match &n.op {
            Op::Conv(a) => {
                let o = &model.value_shapes[&n.outputs[0]];
                let cin = live[&n.inputs[0]].len() as u64;
                let cout = live[&n.outputs[0]].len() as u64;
                Some(cout * o[2] as u64 * o[3] as u64 * cin * (a.kernel[0] * a.kernel[1]) as u64)
            }
            _ => None,
        })
        .sum()
}

/// Conv weights and biases plus BN scale and shift.
pub fn headline_recount(model: &GraphModel) -> u64 {
    let mut n = 0;
    for node in &model.nodes {
        let params: &[String] = match node.op {
            Op::Conv(_) => &node.inputs[1..],
            Op::BatchNorm { .. } => &node.inputs[1..3],
            _ => &[],
        };
        n += params.iter().map(|p| model.initializers[p].len() as u64).sum::<u64>();
    }
    n
}

/// The original model with removed channels silenced at their BN.
pub fn silenced(model: &GraphModel, mask: &PruneMask) -> GraphModel {
    let mut out = model.clone();
    for (conv_out, kept) in &mask.kept {
        let bn = model
            .nodes
            .iter()
            .find(|n| matches!(n.op, Op::BatchNorm { .. }) && &n.inputs[0] == conv_out)
            .expect("pruned conv feeds a BN");
        let c = model.value_shapes[conv_out][1];
        for p in &bn.inputs[1..3] {
            let t = out.float_param_mut(p).unwrap();
            for ch in (0..c).filter(|ch| !kept.contains(ch)) {
                t.data_mut()[ch] = 0.0;
            }
        }
    }
    out
}

pub fn max_rel_err(a: &BTreeMap<String, Value>, b: &BTreeMap<String, Value>) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, bv) in b {
        let av = &a[k];
        assert_eq!(av.shape(), bv.shape(), "output `{k}` shape");
        for (x, y) in av.to_f64_vec().into_iter().zip(bv.to_f64_vec()) {
            let e = (x - y).abs() / (y.abs() + 1e-8);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
    }
    worst
}

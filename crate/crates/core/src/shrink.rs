//! Physical application of a [`PruneMask`].
//!
//! Conv filters, kernel input slices and BN parameters are cut down to the
//! surviving channels of their groups. Where the inputs of an Add survive
//! differently, each mismatched input is scattered into the Add's reference
//! channel space `M_out` (the union of input survivors) with
//!
//! ```text
//! Transpose(perm 1,0,2,3) → ScatterND(ConstantOfShape([|M_out|,N,H,W]), idx (|S|,1), ·) → Transpose(perm 1,0,2,3)
//! ```
//!
//! since ScatterND addresses leading dimensions only.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::cost::count_params;
use crate::deps::DependencyPartition;
use crate::error::{Error, Result};
use crate::exec::{execute, random_inputs};
use crate::graph::{GraphModel, Initializer, Node, Op, OpKind};
use crate::prune::PruneMask;
use crate::tensor::Tensor;

pub const CHANNEL_LEADING_PERM: [usize; 4] = [1, 0, 2, 3];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum InputAction {
    Passthrough,
    /// Positions of the input's survivors within `M_out`.
    Scatter { indices: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AddInputPlan {
    pub tensor: String,
    pub group: String,
    pub survivors: Vec<usize>,
    pub action: InputAction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AddPlan {
    pub node: String,
    pub m_out: Vec<usize>,
    pub inputs: Vec<AddInputPlan>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReconciliationPlan {
    /// Survivors of every group, in original channel indexing.
    pub survivors: BTreeMap<String, Vec<usize>>,
    pub adds: Vec<AddPlan>,
}

impl ReconciliationPlan {
    pub fn scatter_count(&self) -> usize {
        self.adds
            .iter()
            .flat_map(|a| &a.inputs)
            .filter(|i| matches!(i.action, InputAction::Scatter { .. }))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupKept {
    pub kept: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShrinkReport {
    pub params_before: u64,
    pub params_after: u64,
    pub kept: BTreeMap<String, GroupKept>,
    pub scatter_nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rel_err: Option<f64>,
}

/// How one parameter was cut: kept indices along axes 0 and 1, if sliced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamSlice {
    pub original_shape: Vec<usize>,
    pub axis0: Option<Vec<usize>>,
    pub axis1: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct ShrinkOutput {
    pub model: GraphModel,
    pub report: ShrinkReport,
    pub plan: ReconciliationPlan,
    pub slices: BTreeMap<String, ParamSlice>,
}

pub fn plan_reconciliation(model: &GraphModel, partition: &DependencyPartition, mask: &PruneMask) -> Result<ReconciliationPlan> {
    let survivors = partition.survivors(mask)?;
    let mut adds = Vec::new();
    for rec in &partition.adds {
        let node = model
            .node(&rec.node)
            .ok_or_else(|| Error::InvalidGraph(format!("partition names unknown Add `{}`", rec.node)))?;
        let m_out = survivors[&rec.output].clone();
        let inputs = node
            .inputs
            .iter()
            .zip(&rec.inputs)
            .map(|(t, g)| {
                let s = survivors[g].clone();
                let action = if s == m_out {
                    InputAction::Passthrough
                } else {
                    InputAction::Scatter {
                        indices: s
                            .iter()
                            .map(|c| m_out.binary_search(c).expect("survivors are a subset of M_out"))
                            .collect(),
                    }
                };
                AddInputPlan {
                    tensor: t.clone(),
                    group: g.clone(),
                    survivors: s,
                    action,
                }
            })
            .collect();
        adds.push(AddPlan {
            node: rec.node.clone(),
            m_out,
            inputs,
        });
    }
    Ok(ReconciliationPlan { survivors, adds })
}

fn is_full(s: &[usize], n: usize) -> bool {
    s.len() == n
}

pub fn shrink(model: &GraphModel, partition: &DependencyPartition, mask: &PruneMask) -> Result<ShrinkOutput> {
    let model = if model.value_shapes.is_empty() {
        model.validated()?
    } else {
        model.clone()
    };
    let plan = plan_reconciliation(&model, partition, mask)?;
    let surv_of = |tensor: &str| -> Result<&Vec<usize>> {
        let g = partition
            .tensor_group
            .get(tensor)
            .ok_or_else(|| Error::InvalidGraph(format!("tensor `{tensor}` is not in the partition")))?;
        Ok(&plan.survivors[g])
    };

    let mut out = model.clone();
    let mut slices = BTreeMap::new();
    let mut cut = |name: &str, axis0: Option<&Vec<usize>>, axis1: Option<&Vec<usize>>, out: &mut GraphModel| -> Result<()> {
        let t = out.float_param(name)?.clone();
        let shape = t.shape().to_vec();
        let a0 = axis0.filter(|s| !is_full(s, shape[0])).cloned();
        let a1 = axis1.filter(|s| !is_full(s, shape[1])).cloned();
        if a0.is_none() && a1.is_none() {
            return Ok(());
        }
        let mut t = t;
        if let Some(s) = &a0 {
            t = t.select(0, s);
        }
        if let Some(s) = &a1 {
            t = t.select(1, s);
        }
        out.initializers.insert(name.to_string(), Initializer::Float(t));
        slices.insert(
            name.to_string(),
            ParamSlice {
                original_shape: shape,
                axis0: a0,
                axis1: a1,
            },
        );
        Ok(())
    };

    for node in &model.nodes {
        match node.kind() {
            OpKind::Conv => {
                let s_out = surv_of(node.output())?;
                let s_in = surv_of(&node.inputs[0])?;
                cut(&node.inputs[1], Some(s_out), Some(s_in), &mut out)?;
                if let Some(b) = node.inputs.get(2) {
                    cut(b, Some(s_out), None, &mut out)?;
                }
            }
            OpKind::BatchNorm => {
                let s = surv_of(&node.inputs[0])?;
                for p in &node.inputs[1..] {
                    cut(p, Some(s), None, &mut out)?;
                }
            }
            _ => {}
        }
    }

    // Scatter chains, inserted directly before their Add.
    let mut nodes: Vec<Node> = Vec::with_capacity(model.nodes.len());
    let plans: BTreeMap<&str, &AddPlan> = plan.adds.iter().map(|a| (a.node.as_str(), a)).collect();
    let mut scatter_nodes = 0;
    for node in &model.nodes {
        let mut node = node.clone();
        if let Some(ap) = plans.get(node.name.as_str()) {
            for (slot, ip) in ap.inputs.iter().enumerate() {
                let InputAction::Scatter { indices } = &ip.action else {
                    continue;
                };
                let shape = model.shape_of(&ip.tensor)?;
                let base = format!("{}.scatter{slot}", node.name);
                let names = [
                    format!("{base}.pre"),
                    format!("{base}.zeros"),
                    base.clone(),
                    format!("{base}.post"),
                ];
                let shape_const = format!("{base}.shape");
                let idx_const = format!("{base}.indices");
                for n in names.iter().map(|n| format!("{n}.out")).chain([shape_const.clone(), idx_const.clone()]) {
                    if out.initializers.contains_key(&n) || out.value_shapes.contains_key(&n) {
                        return Err(Error::InvalidGraph(format!("cannot insert scatter chain: `{n}` already exists")));
                    }
                }
                let target = [ap.m_out.len(), shape[0], shape[2], shape[3]];
                out.initializers.insert(
                    shape_const.clone(),
                    Initializer::Int64(Tensor::from_vec(&[4], target.iter().map(|&d| d as i64).collect())?),
                );
                out.initializers.insert(
                    idx_const.clone(),
                    Initializer::Int64(Tensor::from_vec(&[indices.len(), 1], indices.iter().map(|&i| i as i64).collect())?),
                );
                let perm = CHANNEL_LEADING_PERM.to_vec();
                let o = |i: usize| format!("{}.out", names[i]);
                nodes.push(Node::new(&names[0], Op::Transpose { perm: perm.clone() }, vec![ip.tensor.clone()], vec![o(0)]));
                nodes.push(Node::new(&names[1], Op::ConstantOfShape { value: 0.0 }, vec![shape_const], vec![o(1)]));
                nodes.push(Node::new(&names[2], Op::ScatterND, vec![o(1), idx_const, o(0)], vec![o(2)]));
                nodes.push(Node::new(&names[3], Op::Transpose { perm }, vec![o(2)], vec![o(3)]));
                node.inputs[slot] = o(3);
                scatter_nodes += 1;
            }
        }
        nodes.push(node);
    }
    out.nodes = nodes;
    out.value_shapes.clear();
    let out = out.validated()?;

    let kept = partition
        .prunable()
        .map(|g| {
            (
                g.id.clone(),
                GroupKept {
                    kept: plan.survivors[&g.id].len(),
                    total: g.channels,
                },
            )
        })
        .collect();
    let report = ShrinkReport {
        params_before: count_params(&model).headline,
        params_after: count_params(&out).headline,
        kept,
        scatter_nodes,
        max_rel_err: None,
    };
    Ok(ShrinkOutput {
        model: out,
        report,
        plan,
        slices,
    })
}

/// The original model with every pruned channel forced to zero right after
/// its BatchNorm. The 0/1 multiplier is folded into BN: zeroing γ and β of
/// a channel makes its output exactly zero.
pub fn masked_oracle(model: &GraphModel, partition: &DependencyPartition, mask: &PruneMask) -> Result<GraphModel> {
    partition.check_mask(mask)?;
    let mut out = model.clone();
    for (gid, removed) in mask.removed(partition) {
        if removed.is_empty() {
            continue;
        }
        let bn_name = partition.groups[&gid].bn.as_deref().expect("prunable groups have a BN");
        let bn = model
            .node(bn_name)
            .ok_or_else(|| Error::InvalidGraph(format!("missing BatchNorm `{bn_name}`")))?;
        for p in &bn.inputs[1..3] {
            let t = out.float_param_mut(p)?;
            for &c in &removed {
                t.data_mut()[c] = 0.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Equivalence {
    pub max_rel_err: f64,
    pub tol: f64,
    pub n_inputs: usize,
    pub passed: bool,
}

/// Max over outputs and elements of `|a − b| / (|b| + 1e-8)`, `a` from the
/// shrunk model and `b` from the masked oracle, over `n_inputs` seeded
/// standard-normal inputs.
pub fn verify_equivalence(
    original: &GraphModel,
    partition: &DependencyPartition,
    mask: &PruneMask,
    shrunk: &GraphModel,
    n_inputs: usize,
    tol: f64,
    seed: u64,
) -> Result<Equivalence> {
    let oracle = masked_oracle(original, partition, mask)?;
    if oracle.outputs != shrunk.outputs {
        return Err(Error::InvalidArgument("models have different graph outputs".into()));
    }
    let mut max_rel_err: f64 = 0.0;
    for i in 0..n_inputs {
        let x = random_inputs(&oracle, seed.wrapping_add(i as u64));
        let a = execute(shrunk, &x)?;
        let b = execute(&oracle, &x)?;
        for (name, bv) in &b.outputs {
            let av = &a.outputs[name];
            if av.shape() != bv.shape() {
                return Err(Error::shape(
                    name,
                    format!("output shapes differ: {:?} vs {:?}", av.shape(), bv.shape()),
                ));
            }
            for (x, y) in av.to_f64_vec().into_iter().zip(bv.to_f64_vec()) {
                let e = (x - y).abs() / (y.abs() + 1e-8);
                // NaN must not compare as a pass.
                max_rel_err = if e.is_nan() { f64::INFINITY } else { max_rel_err.max(e) };
            }
        }
    }
    Ok(Equivalence {
        max_rel_err,
        tol,
        n_inputs,
        passed: max_rel_err <= tol,
    })
}

/// Inverse of [`shrink`] for parameters: put `shrunk`'s weights back into
/// `original`'s topology, filling pruned entries so that pruned channels stay
/// exactly zero (weights, biases, γ, β and means 0; variances 1).
pub fn expand(original: &GraphModel, shrunk: &GraphModel, slices: &BTreeMap<String, ParamSlice>) -> Result<GraphModel> {
    let mut out = original.clone();
    let var_params: BTreeSet<&str> = original
        .nodes
        .iter()
        .filter(|n| n.kind() == OpKind::BatchNorm)
        .map(|n| n.inputs[4].as_str())
        .collect();
    let params: Vec<String> = original
        .nodes
        .iter()
        .filter(|n| matches!(n.kind(), OpKind::Conv | OpKind::BatchNorm))
        .flat_map(|n| n.inputs[1..].iter().cloned())
        .collect();
    for name in params {
        let small = shrunk.float_param(&name)?;
        let fill = if var_params.contains(name.as_str()) { 1.0 } else { 0.0 };
        let t = match slices.get(&name) {
            None => small.clone(),
            Some(s) => {
                let mut t = small.clone();
                if let Some(a1) = &s.axis1 {
                    t = t.expand(1, a1, s.original_shape[1], fill);
                }
                if let Some(a0) = &s.axis0 {
                    t = t.expand(0, a0, s.original_shape[0], fill);
                }
                t
            }
        };
        if t.shape() != original.float_param(&name)?.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` cannot be expanded back to {:?}",
                original.float_param(&name)?.shape()
            )));
        }
        out.initializers.insert(name, Initializer::Float(t));
    }
    Ok(out)
}

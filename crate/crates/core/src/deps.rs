//! Channel dependency analysis.
//!
//! Every activation tensor belongs to exactly one channel group: a set of
//! tensors that share one channel index space, so removing channel `i` from
//! one member removes it from all of them. Groups are named after their root
//! tensor (the output of the node that created the channel space).
//!
//! * A Conv output starts a new group. It is *prunable* when the Conv's only
//!   consumer is a BatchNorm and the output is not a graph output, otherwise
//!   *frozen*.
//! * Relu, BatchNorm, Resize and MaxPool pass their input group through.
//! * Add and Concat start *derived* groups whose surviving channels are a
//!   function of their inputs' (union for Add, offset concatenation for
//!   Concat). Add inputs are not merged: each branch is pruned independently
//!   and reconciled by the shrinker.
//! * Graph inputs and outputs of Softmax, ArgMax, Transpose, ScatterND and
//!   ConstantOfShape are frozen.
//!
//! Some consumers need every channel of their input, which *pins* the group:
//! graph outputs, Softmax, ArgMax, Transpose and ScatterND inputs, and a
//! BatchNorm that is not the one attached to the group's producing Conv
//! (shrinking its parameters would break equivalence, since BN maps a zeroed
//! channel to a nonzero constant). A pinned prunable group becomes frozen and
//! a pinned Add or Concat pins its inputs, so it keeps its full channel range
//! without needing any scatter.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{GraphModel, OpKind};
use crate::prune::PruneMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Prunable,
    Derived,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelGroup {
    pub id: String,
    pub kind: GroupKind,
    /// Member tensors in creation order; the first is the root.
    pub members: Vec<String>,
    pub channels: usize,
    /// Producing Conv node, for Conv-rooted groups.
    pub conv: Option<String>,
    /// The BatchNorm attached to the producing Conv, for prunable groups.
    pub bn: Option<String>,
    /// Derived groups only: keep the full channel range regardless of inputs.
    pub pinned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AddRecord {
    pub node: String,
    /// Group of each Add input, in input order.
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcatPart {
    pub group: String,
    pub offset: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcatRecord {
    pub node: String,
    pub parts: Vec<ConcatPart>,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DependencyPartition {
    pub groups: BTreeMap<String, ChannelGroup>,
    /// Tensor name → group id, for every activation tensor.
    pub tensor_group: BTreeMap<String, String>,
    pub adds: Vec<AddRecord>,
    pub concats: Vec<ConcatRecord>,
    /// Group ids in creation (topological) order.
    pub order: Vec<String>,
}

/// One prunable channel and the BN scale entry that scores it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InventoryEntry {
    pub group: String,
    pub channel: usize,
    pub gamma: String,
}

pub fn build_dependency_partition(model: &GraphModel) -> Result<DependencyPartition> {
    let model = if model.value_shapes.is_empty() {
        model.validated()?
    } else {
        model.clone()
    };
    let consumers = model.consumers();
    let graph_outputs: BTreeSet<&str> = model.outputs.iter().map(String::as_str).collect();
    let channels_of = |t: &str| -> Result<usize> {
        let s = model.shape_of(t)?;
        Ok(s.get(1).copied().unwrap_or(1))
    };

    let mut p = DependencyPartition {
        groups: BTreeMap::new(),
        tensor_group: BTreeMap::new(),
        adds: Vec::new(),
        concats: Vec::new(),
        order: Vec::new(),
    };
    let mut pins: Vec<String> = Vec::new();

    fn new_group(p: &mut DependencyPartition, root: &str, kind: GroupKind, channels: usize) -> Result<()> {
        if p.groups.contains_key(root) {
            return Err(Error::InvalidGraph(format!("tensor `{root}` roots two channel groups")));
        }
        p.groups.insert(
            root.to_string(),
            ChannelGroup {
                id: root.to_string(),
                kind,
                members: vec![root.to_string()],
                channels,
                conv: None,
                bn: None,
                pinned: false,
            },
        );
        p.tensor_group.insert(root.to_string(), root.to_string());
        p.order.push(root.to_string());
        Ok(())
    }

    for inp in &model.inputs {
        new_group(&mut p, &inp.name, GroupKind::Frozen, channels_of(&inp.name)?)?;
    }

    let group_of = |p: &DependencyPartition, t: &str| -> Result<String> {
        p.tensor_group
            .get(t)
            .cloned()
            .ok_or_else(|| Error::InvalidGraph(format!("tensor `{t}` has no channel group")))
    };

    for idx in model.topo_order()? {
        let node = &model.nodes[idx];
        let out = node.outputs[0].as_str();
        match node.kind() {
            OpKind::Conv => {
                let cons = consumers.get(out).map(Vec::as_slice).unwrap_or(&[]);
                let bn = match cons {
                    [only] if model.nodes[*only].kind() == OpKind::BatchNorm && !graph_outputs.contains(out) => {
                        Some(model.nodes[*only].name.clone())
                    }
                    _ => None,
                };
                let kind = if bn.is_some() {
                    GroupKind::Prunable
                } else {
                    GroupKind::Frozen
                };
                new_group(&mut p, out, kind, channels_of(out)?)?;
                let g = p.groups.get_mut(out).expect("just inserted");
                g.conv = Some(node.name.clone());
                g.bn = bn;
            }
            OpKind::BatchNorm | OpKind::Relu | OpKind::Resize | OpKind::MaxPool => {
                let g = group_of(&p, &node.inputs[0])?;
                if node.kind() == OpKind::BatchNorm {
                    let attached = p.groups[&g].bn.as_deref() == Some(node.name.as_str())
                        && p.groups[&g].members.len() == 1;
                    if !attached {
                        pins.push(g.clone());
                    }
                }
                p.groups.get_mut(&g).expect("group exists").members.push(out.to_string());
                p.tensor_group.insert(out.to_string(), g);
            }
            OpKind::Add => {
                let inputs = node
                    .inputs
                    .iter()
                    .map(|t| group_of(&p, t))
                    .collect::<Result<Vec<_>>>()?;
                new_group(&mut p, out, GroupKind::Derived, channels_of(out)?)?;
                p.adds.push(AddRecord {
                    node: node.name.clone(),
                    inputs,
                    output: out.to_string(),
                });
            }
            OpKind::Concat => {
                let mut parts = Vec::new();
                let mut offset = 0;
                for t in &node.inputs {
                    let c = channels_of(t)?;
                    parts.push(ConcatPart {
                        group: group_of(&p, t)?,
                        offset,
                        channels: c,
                    });
                    offset += c;
                }
                new_group(&mut p, out, GroupKind::Derived, channels_of(out)?)?;
                p.concats.push(ConcatRecord {
                    node: node.name.clone(),
                    parts,
                    output: out.to_string(),
                });
            }
            OpKind::Softmax | OpKind::ArgMax | OpKind::Transpose | OpKind::ScatterND | OpKind::ConstantOfShape => {
                for t in &node.inputs {
                    if let Some(g) = p.tensor_group.get(t) {
                        pins.push(g.clone());
                    }
                }
                new_group(&mut p, out, GroupKind::Frozen, channels_of(out)?)?;
            }
        }
    }
    for o in &model.outputs {
        pins.push(group_of(&p, o)?);
    }

    // Resolve pins; Add and Concat pins fan out to their inputs.
    let fan_out: BTreeMap<String, Vec<String>> = p
        .concats
        .iter()
        .map(|c| (c.output.clone(), c.parts.iter().map(|x| x.group.clone()).collect()))
        .chain(p.adds.iter().map(|a| (a.output.clone(), a.inputs.clone())))
        .collect();
    let mut seen = BTreeSet::new();
    while let Some(g) = pins.pop() {
        if !seen.insert(g.clone()) {
            continue;
        }
        let group = p.groups.get_mut(&g).expect("pinned group exists");
        match group.kind {
            GroupKind::Prunable => {
                group.kind = GroupKind::Frozen;
                group.bn = None;
            }
            GroupKind::Frozen => {}
            GroupKind::Derived => {
                group.pinned = true;
                if let Some(parts) = fan_out.get(&g) {
                    pins.extend(parts.iter().cloned());
                }
            }
        }
    }
    Ok(p)
}

impl DependencyPartition {
    pub fn group_of(&self, tensor: &str) -> Option<&ChannelGroup> {
        self.tensor_group.get(tensor).and_then(|g| self.groups.get(g))
    }

    pub fn prunable(&self) -> impl Iterator<Item = &ChannelGroup> {
        self.groups.values().filter(|g| g.kind == GroupKind::Prunable)
    }

    /// Surviving channels of every group under `mask`, ascending, in the
    /// original channel indexing. Prunable groups absent from the mask keep
    /// everything.
    pub fn survivors(&self, mask: &PruneMask) -> Result<BTreeMap<String, Vec<usize>>> {
        self.check_mask(mask)?;
        let adds: BTreeMap<&str, &AddRecord> = self.adds.iter().map(|a| (a.output.as_str(), a)).collect();
        let concats: BTreeMap<&str, &ConcatRecord> = self.concats.iter().map(|c| (c.output.as_str(), c)).collect();
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for id in &self.order {
            let g = &self.groups[id];
            let full = || (0..g.channels).collect::<Vec<_>>();
            let s = match g.kind {
                GroupKind::Frozen => full(),
                GroupKind::Prunable => mask.kept.get(id).cloned().unwrap_or_else(full),
                GroupKind::Derived if g.pinned => full(),
                GroupKind::Derived => {
                    if let Some(a) = adds.get(id.as_str()) {
                        let mut u = BTreeSet::new();
                        for i in &a.inputs {
                            u.extend(out[i].iter().copied());
                        }
                        u.into_iter().collect()
                    } else if let Some(c) = concats.get(id.as_str()) {
                        c.parts
                            .iter()
                            .flat_map(|part| out[&part.group].iter().map(move |&k| k + part.offset))
                            .collect()
                    } else {
                        return Err(Error::InvalidGraph(format!("derived group `{id}` has no producer record")));
                    }
                }
            };
            out.insert(id.clone(), s);
        }
        Ok(out)
    }

    /// A mask may only name prunable groups, with a nonempty strictly
    /// increasing in-range kept list.
    pub fn check_mask(&self, mask: &PruneMask) -> Result<()> {
        for (id, kept) in &mask.kept {
            let g = self
                .groups
                .get(id)
                .ok_or_else(|| Error::InvalidMask(format!("unknown group `{id}`")))?;
            if g.kind != GroupKind::Prunable {
                return Err(Error::InvalidMask(format!(
                    "group `{id}` is {:?} and cannot be pruned",
                    g.kind
                )));
            }
            if kept.is_empty() {
                return Err(Error::InvalidMask(format!("group `{id}` keeps no channels")));
            }
            if kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&k| k >= g.channels) {
                return Err(Error::InvalidMask(format!(
                    "group `{id}`: kept indices must be strictly increasing and below {}",
                    g.channels
                )));
            }
        }
        Ok(())
    }

    pub fn prunable_channel_count(&self) -> usize {
        self.prunable().map(|g| g.channels).sum()
    }
}

/// Every prunable channel with the BN scale tensor that owns it.
pub fn prunable_channel_inventory(model: &GraphModel, partition: &DependencyPartition) -> Result<Vec<InventoryEntry>> {
    let mut out = Vec::new();
    for g in partition.prunable() {
        let bn = g.bn.as_deref().expect("prunable groups have a BN");
        let node = model
            .node(bn)
            .ok_or_else(|| Error::InvalidGraph(format!("missing BatchNorm `{bn}`")))?;
        for c in 0..g.channels {
            out.push(InventoryEntry {
                group: g.id.clone(),
                channel: c,
                gamma: node.inputs[1].clone(),
            });
        }
    }
    Ok(out)
}

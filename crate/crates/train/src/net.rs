//! A [`GraphModel`] lowered to a differentiable step list.

use std::collections::{BTreeMap, HashMap, HashSet};

use netshrink::graph::{ConvAttrs, PoolAttrs};
use netshrink::shrink::CHANNEL_LEADING_PERM;
use netshrink::{kernels, GraphModel, Initializer, Op, Tensor};

use crate::error::{Result, TrainError};
use crate::ops::{self, BnCache};

/// BatchNorm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

pub type ParamMap = BTreeMap<String, Tensor<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BatchNorm.
    Train,
    /// Running statistics in BatchNorm.
    Eval,
}

#[derive(Clone, Debug)]
enum Kind {
    Conv {
        weight: String,
        bias: Option<String>,
        attrs: ConvAttrs,
    },
    BatchNorm {
        scale: String,
        bias: String,
        mean: String,
        var: String,
        eps: f64,
    },
    Relu,
    Add,
    Concat,
    Resize { scales: [f32; 2] },
    MaxPool(PoolAttrs),
    /// A lowered Transpose → ScatterND → Transpose chain.
    Scatter { indices: Vec<usize>, channels: usize },
}

#[derive(Clone, Debug)]
struct Step {
    node: String,
    kind: Kind,
    inputs: Vec<usize>,
    out: usize,
}

/// Activations of one forward pass plus what the backward pass needs.
pub struct Trace {
    acts: Vec<Option<Tensor<f64>>>,
    bn: Vec<Option<BnCache>>,
    pool: Vec<Option<Vec<usize>>>,
    mode: Mode,
    logits: usize,
}

impl Trace {
    pub fn logits(&self) -> &Tensor<f64> {
        self.acts[self.logits].as_ref().expect("logits computed")
    }
}

/// Trainable network: f64 parameters and running statistics keyed by their
/// initializer names in the source model.
#[derive(Clone, Debug)]
pub struct Net {
    template: GraphModel,
    pub params: ParamMap,
    pub buffers: ParamMap,
    steps: Vec<Step>,
    input: usize,
    logits: usize,
    slots: usize,
    logits_name: String,
}

fn float_init(model: &GraphModel, name: &str) -> Result<Tensor<f64>> {
    Ok(model.float_param(name)?.to_f64())
}

fn unsupported(node: &str, reason: impl Into<String>) -> TrainError {
    TrainError::Unsupported {
        node: node.to_string(),
        reason: reason.into(),
    }
}

/// The tensor whose Softmax/ArgMax heads are skipped during training.
fn logits_tensor(model: &GraphModel) -> Result<String> {
    let producers = model.producers();
    let mut t = model
        .outputs
        .first()
        .cloned()
        .ok_or_else(|| netshrink::Error::InvalidGraph("model has no outputs".into()))?;
    while let Some(&i) = producers.get(t.as_str()) {
        let n = &model.nodes[i];
        match n.op {
            Op::Softmax { .. } | Op::ArgMax { .. } => t = n.inputs[0].clone(),
            _ => break,
        }
    }
    Ok(t)
}

/// If `node` is the closing Transpose of a scatter chain, return the chain's
/// source tensor, kept channel indices and full channel count.
fn match_scatter(model: &GraphModel, producers: &HashMap<&str, usize>, node: usize) -> Option<(String, Vec<usize>, usize)> {
    let perm = CHANNEL_LEADING_PERM.to_vec();
    let n = &model.nodes[node];
    if n.op != (Op::Transpose { perm: perm.clone() }) {
        return None;
    }
    let scatter = &model.nodes[*producers.get(n.inputs[0].as_str())?];
    if scatter.op != Op::ScatterND {
        return None;
    }
    let zeros = &model.nodes[*producers.get(scatter.inputs[0].as_str())?];
    let pre = &model.nodes[*producers.get(scatter.inputs[2].as_str())?];
    if zeros.op != (Op::ConstantOfShape { value: 0.0 }) || pre.op != (Op::Transpose { perm }) {
        return None;
    }
    let shape = model.initializers.get(&zeros.inputs[0])?.as_int()?;
    let idx = model.initializers.get(&scatter.inputs[1])?.as_int()?;
    let channels = usize::try_from(*shape.data().first()?).ok()?;
    if idx.shape().len() != 2 || idx.shape()[1] != 1 {
        return None;
    }
    let indices: Vec<usize> = idx.data().iter().map(|&i| usize::try_from(i).ok().filter(|&i| i < channels)).collect::<Option<_>>()?;
    Some((pre.inputs[0].clone(), indices, channels))
}

impl Net {
    pub fn from_model(model: &GraphModel) -> Result<Self> {
        let model = model.validated()?;
        if model.inputs.len() != 1 {
            return Err(unsupported(&model.name, "exactly one graph input is required"));
        }
        let producers = model.producers();
        let logits_name = logits_tensor(&model)?;

        // Activation dependencies, with scatter chains collapsed.
        let mut scatter_of: HashMap<usize, (String, Vec<usize>, usize)> = HashMap::new();
        for i in 0..model.nodes.len() {
            if let Some(m) = match_scatter(&model, &producers, i) {
                scatter_of.insert(i, m);
            }
        }
        let deps = |i: usize| -> Vec<String> {
            match scatter_of.get(&i) {
                Some((src, _, _)) => vec![src.clone()],
                None => model.nodes[i]
                    .inputs
                    .iter()
                    .filter(|t| !model.initializers.contains_key(*t))
                    .cloned()
                    .collect(),
            }
        };
        let mut needed: HashSet<usize> = HashSet::new();
        let mut stack = vec![logits_name.clone()];
        while let Some(t) = stack.pop() {
            if let Some(&i) = producers.get(t.as_str()) {
                if needed.insert(i) {
                    stack.extend(deps(i));
                }
            }
        }

        let mut slot_of: HashMap<String, usize> = HashMap::new();
        slot_of.insert(model.inputs[0].name.clone(), 0);
        let mut params = ParamMap::new();
        let mut buffers = ParamMap::new();
        let mut steps = Vec::new();
        for i in model.topo_order()? {
            if !needed.contains(&i) {
                continue;
            }
            let n = &model.nodes[i];
            let kind = match (&n.op, scatter_of.get(&i)) {
                (_, Some((_, indices, channels))) => Kind::Scatter {
                    indices: indices.clone(),
                    channels: *channels,
                },
                (Op::Conv(a), _) => {
                    for p in &n.inputs[1..] {
                        params.insert(p.clone(), float_init(&model, p)?);
                    }
                    Kind::Conv {
                        weight: n.inputs[1].clone(),
                        bias: n.inputs.get(2).cloned(),
                        attrs: a.clone(),
                    }
                }
                (Op::BatchNorm { epsilon }, _) => {
                    for p in &n.inputs[1..3] {
                        params.insert(p.clone(), float_init(&model, p)?);
                    }
                    for p in &n.inputs[3..5] {
                        buffers.insert(p.clone(), float_init(&model, p)?);
                    }
                    Kind::BatchNorm {
                        scale: n.inputs[1].clone(),
                        bias: n.inputs[2].clone(),
                        mean: n.inputs[3].clone(),
                        var: n.inputs[4].clone(),
                        eps: *epsilon as f64,
                    }
                }
                (Op::Relu, _) => Kind::Relu,
                (Op::Add, _) => Kind::Add,
                (Op::Concat { .. }, _) => Kind::Concat,
                (Op::Resize { scales }, _) => Kind::Resize { scales: *scales },
                (Op::MaxPool(a), _) => Kind::MaxPool(a.clone()),
                (op, _) => {
                    return Err(unsupported(
                        &n.name,
                        format!("`{}` is only supported as part of a channel scatter chain", op.kind().onnx_name()),
                    ))
                }
            };
            let inputs = deps(i)
                .iter()
                .map(|t| slot_of.get(t).copied().ok_or_else(|| unsupported(&n.name, format!("input `{t}` is not trainable"))))
                .collect::<Result<Vec<_>>>()?;
            let out = slot_of.len();
            slot_of.insert(n.outputs[0].clone(), out);
            steps.push(Step {
                node: n.name.clone(),
                kind,
                inputs,
                out,
            });
        }
        let logits = *slot_of
            .get(&logits_name)
            .ok_or_else(|| unsupported(&logits_name, "logits are not computed from the graph input"))?;
        Ok(Self {
            template: model,
            params,
            buffers,
            steps,
            input: 0,
            logits,
            slots: slot_of.len(),
            logits_name,
        })
    }

    /// The source model with current parameters and running statistics,
    /// rounded to f32.
    pub fn to_model(&self) -> GraphModel {
        let mut m = self.template.clone();
        for (k, v) in self.params.iter().chain(&self.buffers) {
            m.initializers.insert(k.clone(), Initializer::Float(v.to_f32()));
        }
        m
    }

    pub fn template(&self) -> &GraphModel {
        &self.template
    }

    pub fn logits_name(&self) -> &str {
        &self.logits_name
    }

    pub fn in_channels(&self) -> usize {
        self.template.inputs[0].shape[1]
    }

    pub fn forward(&self, x: Tensor<f64>, mode: Mode) -> Trace {
        let mut acts: Vec<Option<Tensor<f64>>> = vec![None; self.slots];
        let mut bn: Vec<Option<BnCache>> = (0..self.steps.len()).map(|_| None).collect();
        let mut pool: Vec<Option<Vec<usize>>> = vec![None; self.steps.len()];
        acts[self.input] = Some(x);
        for (si, s) in self.steps.iter().enumerate() {
            let arg = |k: usize| acts[s.inputs[k]].as_ref().expect("topological order");
            let y = match &s.kind {
                Kind::Conv { weight, bias, attrs } => {
                    ops::conv_forward(arg(0), &self.params[weight], bias.as_ref().map(|b| &self.params[b]), attrs)
                }
                Kind::BatchNorm { scale, bias, mean, var, eps } => match mode {
                    Mode::Train => {
                        let (y, cache) = ops::bn_train_forward(arg(0), &self.params[scale], &self.params[bias], *eps);
                        bn[si] = Some(cache);
                        y
                    }
                    Mode::Eval => kernels::batch_norm(
                        arg(0),
                        &self.params[scale],
                        &self.params[bias],
                        &self.buffers[mean],
                        &self.buffers[var],
                        *eps,
                    ),
                },
                Kind::Relu => kernels::relu(arg(0)),
                Kind::Add => kernels::add(arg(0), arg(1)),
                Kind::Concat => {
                    let parts: Vec<&Tensor<f64>> = (0..s.inputs.len()).map(arg).collect();
                    kernels::concat_channels(&parts)
                }
                Kind::Resize { scales } => kernels::resize_bilinear(arg(0), *scales),
                Kind::MaxPool(a) => {
                    let (y, argmax) = ops::maxpool_forward(arg(0), a);
                    pool[si] = Some(argmax);
                    y
                }
                Kind::Scatter { indices, channels } => ops::channel_scatter(arg(0), indices, *channels),
            };
            acts[s.out] = Some(y);
        }
        Trace {
            acts,
            bn,
            pool,
            mode,
            logits: self.logits,
        }
    }

    /// Gradients of every parameter given the gradient at the logits.
    /// Parameters off the logits path get zero gradients.
    pub fn backward(&self, trace: &Trace, dlogits: Tensor<f64>) -> ParamMap {
        assert_eq!(trace.mode, Mode::Train, "backward needs a training-mode trace");
        let mut grads: ParamMap = self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        let mut d: Vec<Option<Tensor<f64>>> = vec![None; self.slots];
        d[self.logits] = Some(dlogits);
        let accumulate = |d: &mut Vec<Option<Tensor<f64>>>, slot: usize, g: Tensor<f64>| match &mut d[slot] {
            Some(acc) => ops::add_into(acc, &g),
            None => d[slot] = Some(g),
        };
        for (si, s) in self.steps.iter().enumerate().rev() {
            let Some(dy) = d[s.out].take() else { continue };
            let act = |k: usize| trace.acts[s.inputs[k]].as_ref().expect("forward trace");
            match &s.kind {
                Kind::Conv { weight, bias, attrs } => {
                    let g = ops::conv_backward(act(0), &self.params[weight], bias.is_some(), attrs, &dy);
                    ops::add_into(grads.get_mut(weight).expect("conv weight"), &g.dw);
                    if let (Some(b), Some(db)) = (bias, g.db) {
                        ops::add_into(grads.get_mut(b).expect("conv bias"), &db);
                    }
                    accumulate(&mut d, s.inputs[0], g.dx);
                }
                Kind::BatchNorm { scale, bias, .. } => {
                    let cache = trace.bn[si].as_ref().expect("training-mode BN cache");
                    let (dx, dg, db) = ops::bn_train_backward(cache, &self.params[scale], &dy);
                    ops::add_into(grads.get_mut(scale).expect("bn scale"), &dg);
                    ops::add_into(grads.get_mut(bias).expect("bn bias"), &db);
                    accumulate(&mut d, s.inputs[0], dx);
                }
                Kind::Relu => {
                    let y = trace.acts[s.out].as_ref().expect("forward trace");
                    accumulate(&mut d, s.inputs[0], ops::relu_backward(y, &dy));
                }
                Kind::Add => {
                    accumulate(&mut d, s.inputs[1], dy.clone());
                    accumulate(&mut d, s.inputs[0], dy);
                }
                Kind::Concat => {
                    let channels: Vec<usize> = (0..s.inputs.len()).map(|k| act(k).shape()[1]).collect();
                    for (k, g) in ops::concat_backward(&dy, &channels).into_iter().enumerate() {
                        accumulate(&mut d, s.inputs[k], g);
                    }
                }
                Kind::Resize { scales } => {
                    accumulate(&mut d, s.inputs[0], ops::resize_backward(&dy, act(0).shape(), *scales));
                }
                Kind::MaxPool(_) => {
                    let argmax = trace.pool[si].as_ref().expect("pool argmax");
                    accumulate(&mut d, s.inputs[0], ops::maxpool_backward(&dy, argmax, act(0).shape()));
                }
                Kind::Scatter { indices, .. } => {
                    accumulate(&mut d, s.inputs[0], ops::channel_scatter_backward(&dy, indices));
                }
            }
        }
        grads
    }

    /// Fold the batch statistics of a training-mode trace into the running
    /// statistics. Running variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        for (si, s) in self.steps.iter().enumerate() {
            let (Kind::BatchNorm { mean, var, .. }, Some(cache)) = (&s.kind, trace.bn[si].as_ref()) else {
                continue;
            };
            let m = cache.count as f64;
            let unbias = if cache.count > 1 { m / (m - 1.0) } else { 1.0 };
            let rm = self.buffers.get_mut(mean).expect("running mean");
            for (r, b) in rm.data_mut().iter_mut().zip(&cache.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = self.buffers.get_mut(var).expect("running var");
            for (r, b) in rv.data_mut().iter_mut().zip(&cache.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
            }
        }
    }

    /// Name of the first node whose output holds a non-finite value.
    pub fn first_non_finite(&self, trace: &Trace) -> Option<String> {
        self.steps
            .iter()
            .find(|s| trace.acts[s.out].as_ref().is_some_and(|t| t.data().iter().any(|v| !v.is_finite())))
            .map(|s| s.node.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use netshrink::deps::build_dependency_partition;
    use netshrink::exec::{execute, random_inputs};
    use netshrink::graph::BnInit;
    use netshrink::hrnet::{build_hrnet_lite_with, HrnetLiteSpec};
    use netshrink::shrink::shrink;
    use netshrink::synth::{corpus, random_mask};

    fn eval_matches_executor(m: &GraphModel, seed: u64) {
        let net = Net::from_model(m).unwrap();
        let x = random_inputs(m, seed);
        let want = execute(m, &x).unwrap().outputs;
        let got = net.forward(x.values().next().unwrap().to_f64(), Mode::Eval);
        let Some(reference) = want.get(net.logits_name()) else { return };
        for (a, b) in got.logits().data().iter().zip(reference.to_f64_vec()) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{}: {a} vs {b}", m.name);
        }
    }

    #[test]
    fn eval_forward_matches_executor_on_shrunk_graphs() {
        let mut scattered = 0;
        for (i, (_, m)) in corpus(40, 3).into_iter().enumerate() {
            let p = build_dependency_partition(&m).unwrap();
            let s = shrink(&m, &p, &random_mask(&p, i as u64)).unwrap();
            scattered += s.report.scatter_nodes;
            eval_matches_executor(&m, i as u64);
            eval_matches_executor(&s.model, i as u64);
        }
        assert!(scattered > 0);
        let hr = build_hrnet_lite_with(&HrnetLiteSpec { height: 16, width_px: 16, ..Default::default() }, BnInit::Random).unwrap();
        eval_matches_executor(&hr, 9);
    }

    #[test]
    fn round_trip_through_model_keeps_parameters() {
        let hr = build_hrnet_lite_with(&HrnetLiteSpec { height: 8, width_px: 8, ..Default::default() }, BnInit::Random).unwrap();
        let net = Net::from_model(&hr).unwrap();
        let back = net.to_model();
        assert!(back.structurally_eq(&hr));
        for (k, v) in &hr.initializers {
            assert!(back.initializers[k].bits_eq(v), "{k}");
        }
    }
}

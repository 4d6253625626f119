//! Reference interpreter for [`GraphModel`] in inference mode.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{infer_shapes, GraphModel, Initializer, Op};
use crate::kernels;
use crate::tensor::Tensor;

/// A runtime value: activations are float32, ArgMax results int64.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    F32(Tensor<f32>),
    I64(Tensor<i64>),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::F32(t) => t.shape(),
            Value::I64(t) => t.shape(),
        }
    }

    pub fn as_f32(&self) -> Option<&Tensor<f32>> {
        match self {
            Value::F32(t) => Some(t),
            Value::I64(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<&Tensor<i64>> {
        match self {
            Value::I64(t) => Some(t),
            Value::F32(_) => None,
        }
    }

    /// Elements widened to f64, for comparisons across dtypes.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Value::F32(t) => t.data().iter().map(|&v| v as f64).collect(),
            Value::I64(t) => t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExecutionResult {
    pub outputs: BTreeMap<String, Value>,
    pub elapsed: Duration,
}

fn float_in<'a>(vals: &'a HashMap<String, Value>, model: &'a GraphModel, name: &str) -> Result<&'a Tensor<f32>> {
    if let Some(v) = vals.get(name) {
        return v
            .as_f32()
            .ok_or_else(|| Error::InvalidGraph(format!("tensor `{name}` is not float32")));
    }
    model
        .initializers
        .get(name)
        .and_then(Initializer::as_float)
        .ok_or_else(|| Error::MissingInput(name.to_string()))
}

fn prepare(model: &GraphModel, inputs: &BTreeMap<String, Tensor<f32>>) -> Result<GraphModel> {
    for gi in &model.inputs {
        if !inputs.contains_key(&gi.name) {
            return Err(Error::MissingInput(gi.name.clone()));
        }
    }
    let same = model.inputs.iter().all(|gi| inputs[&gi.name].shape() == gi.shape.as_slice());
    let m = if same && !model.value_shapes.is_empty() {
        model.clone()
    } else if same {
        model.validated()?
    } else if model.inputs.len() == 1 {
        infer_shapes(model, inputs[&model.inputs[0].name].shape())?
    } else {
        return Err(Error::InvalidArgument("input shapes differ from the declared shapes".into()));
    };
    for node in &m.nodes {
        for p in &node.inputs {
            if let Some(Initializer::Float(t)) = m.initializers.get(p) {
                if !t.all_finite() {
                    return Err(Error::NonFinite(format!("parameter `{p}` of node `{}`", node.name)));
                }
            }
        }
    }
    Ok(m)
}

fn run(model: &GraphModel, inputs: &BTreeMap<String, Tensor<f32>>, keep_all: bool) -> Result<(HashMap<String, Value>, Duration)> {
    let start = Instant::now();
    let m = prepare(model, inputs)?;
    let order = m.topo_order()?;
    let mut uses: HashMap<&str, usize> = HashMap::new();
    for node in &m.nodes {
        for i in &node.inputs {
            *uses.entry(i.as_str()).or_default() += 1;
        }
    }
    for o in &m.outputs {
        *uses.entry(o.as_str()).or_default() += 1;
    }
    let mut vals: HashMap<String, Value> = HashMap::new();
    for gi in &m.inputs {
        vals.insert(gi.name.clone(), Value::F32(inputs[&gi.name].clone()));
    }
    for idx in order {
        let node = &m.nodes[idx];
        let x = |slot: usize| float_in(&vals, &m, &node.inputs[slot]);
        let out = match &node.op {
            Op::Conv(a) => {
                let b = if node.inputs.len() == 3 { Some(x(2)?) } else { None };
                Value::F32(kernels::conv2d(x(0)?, x(1)?, b, a))
            }
            Op::BatchNorm { epsilon } => Value::F32(kernels::batch_norm(x(0)?, x(1)?, x(2)?, x(3)?, x(4)?, *epsilon)),
            Op::Relu => Value::F32(kernels::relu(x(0)?)),
            Op::Add => Value::F32(kernels::add(x(0)?, x(1)?)),
            Op::Concat { .. } => {
                let parts = (0..node.inputs.len()).map(x).collect::<Result<Vec<_>>>()?;
                Value::F32(kernels::concat_channels(&parts))
            }
            Op::Resize { scales } => Value::F32(kernels::resize_bilinear(x(0)?, *scales)),
            Op::MaxPool(a) => Value::F32(kernels::max_pool(x(0)?, a)),
            Op::Transpose { perm } => Value::F32(kernels::transpose(x(0)?, perm)),
            Op::ConstantOfShape { value } => {
                let shape = m.shape_of(node.output())?.to_vec();
                Value::F32(Tensor::full(&shape, *value))
            }
            Op::ScatterND => {
                let idx = m
                    .initializers
                    .get(&node.inputs[1])
                    .and_then(Initializer::as_int)
                    .ok_or_else(|| Error::InvalidGraph(format!("node `{}`: indices must be int64", node.name)))?;
                Value::F32(kernels::scatter_nd(x(0)?, idx, x(2)?))
            }
            Op::Softmax { .. } => Value::F32(kernels::softmax_channels(x(0)?)),
            Op::ArgMax { keepdims, .. } => Value::I64(kernels::argmax_channels(x(0)?, *keepdims)),
        };
        if !keep_all {
            for i in &node.inputs {
                if let Some(u) = uses.get_mut(i.as_str()) {
                    *u -= 1;
                    if *u == 0 {
                        vals.remove(i);
                    }
                }
            }
        }
        vals.insert(node.outputs[0].clone(), out);
    }
    Ok((vals, start.elapsed()))
}

/// Run the model and return its graph outputs.
pub fn execute(model: &GraphModel, inputs: &BTreeMap<String, Tensor<f32>>) -> Result<ExecutionResult> {
    let (mut vals, elapsed) = run(model, inputs, false)?;
    let outputs = model
        .outputs
        .iter()
        .map(|o| {
            vals.remove(o)
                .map(|v| (o.clone(), v))
                .ok_or_else(|| Error::MissingInput(o.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(ExecutionResult { outputs, elapsed })
}

/// Run the model and return every activation, including graph inputs.
pub fn execute_all(model: &GraphModel, inputs: &BTreeMap<String, Tensor<f32>>) -> Result<BTreeMap<String, Value>> {
    Ok(run(model, inputs, true)?.0.into_iter().collect())
}

/// Convenience for single-input models.
pub fn execute_single(model: &GraphModel, input: Tensor<f32>) -> Result<ExecutionResult> {
    let name = model
        .inputs
        .first()
        .ok_or_else(|| Error::InvalidGraph("model has no inputs".into()))?
        .name
        .clone();
    execute(model, &BTreeMap::from([(name, input)]))
}

/// Standard-normal inputs for every graph input, reproducible from `seed`.
pub fn random_inputs(model: &GraphModel, seed: u64) -> BTreeMap<String, Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .inputs
        .iter()
        .map(|gi| {
            let n = gi.shape.iter().product();
            let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            (gi.name.clone(), Tensor::from_vec(&gi.shape, data).expect("declared shape"))
        })
        .collect()
}

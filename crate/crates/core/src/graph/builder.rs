use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::shape::node_output_shape;
use super::{ConvAttrs, GraphInput, GraphModel, Initializer, Node, Op, PoolAttrs, DEFAULT_BN_EPSILON, OPSET_VERSION};
use crate::error::Result;
use crate::tensor::Tensor;

/// How freshly created BatchNorm parameters are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnInit {
    /// γ = 1, β = 0, running mean 0, running variance 1.
    Identity,
    /// Random affine parameters and running statistics; useful for
    /// equivalence tests where every channel must be distinguishable.
    Random,
}

/// Incremental constructor for [`GraphModel`]s with seeded parameter init.
///
/// Tensor names are derived from node names (`<node>.out`) and parameters
/// from node names (`<node>.weight`, `<node>.scale`, ...).
pub struct GraphBuilder {
    name: String,
    input: GraphInput,
    nodes: Vec<Node>,
    initializers: BTreeMap<String, Initializer>,
    shapes: HashMap<String, Vec<usize>>,
    outputs: Vec<String>,
    counters: HashMap<&'static str, usize>,
    prefix: String,
    bn_init: BnInit,
    rng: ChaCha8Rng,
    error: Option<crate::Error>,
}

impl GraphBuilder {
    pub fn new(name: &str, input_shape: &[usize], seed: u64) -> Self {
        let input = GraphInput {
            name: "input".into(),
            shape: input_shape.to_vec(),
        };
        let mut shapes = HashMap::new();
        shapes.insert(input.name.clone(), input.shape.clone());
        Self {
            name: name.into(),
            input,
            nodes: Vec::new(),
            initializers: BTreeMap::new(),
            shapes,
            outputs: Vec::new(),
            counters: HashMap::new(),
            prefix: String::new(),
            bn_init: BnInit::Identity,
            rng: ChaCha8Rng::seed_from_u64(seed),
            error: None,
        }
    }

    pub fn with_bn_init(mut self, init: BnInit) -> Self {
        self.bn_init = init;
        self
    }

    /// Prefix applied to the names of subsequently created nodes.
    pub fn set_prefix(&mut self, prefix: &str) {
        self.prefix = prefix.to_string();
    }

    pub fn input(&self) -> String {
        self.input.name.clone()
    }

    /// Shape of an already-built tensor. Unknown tensors (after a failed
    /// node) report an empty shape.
    pub fn shape(&self, tensor: &str) -> Vec<usize> {
        self.shapes.get(tensor).cloned().unwrap_or_default()
    }

    pub fn channels(&self, tensor: &str) -> usize {
        self.shape(tensor).get(1).copied().unwrap_or(0)
    }

    fn next_name(&mut self, kind: &'static str) -> String {
        let c = self.counters.entry(kind).or_insert(0);
        let name = format!("{}{kind}{c}", self.prefix);
        *c += 1;
        name
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<String>) -> String {
        let out = format!("{name}.out");
        let node = Node::new(name, op, inputs, vec![out.clone()]);
        if self.error.is_none() {
            let lookup: HashMap<&str, &[usize]> = node
                .inputs
                .iter()
                .filter_map(|n| {
                    self.shapes
                        .get(n)
                        .map(|s| (n.as_str(), s.as_slice()))
                        .or_else(|| self.initializers.get(n).map(|i| (n.as_str(), i.shape())))
                })
                .collect();
            match node_output_shape(&node, &lookup, &self.initializers) {
                Ok(s) => {
                    self.shapes.insert(out.clone(), s);
                }
                Err(e) => self.error = Some(e),
            }
        }
        self.nodes.push(node);
        out
    }

    fn normal(&mut self, shape: &[usize], std: f32) -> Tensor<f32> {
        let dist = Normal::new(0.0f32, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::from_vec(shape, data).expect("shape matches")
    }

    /// Convolution with Kaiming-normal weights.
    pub fn conv(&mut self, x: &str, out_channels: usize, attrs: ConvAttrs, bias: bool) -> String {
        let name = self.next_name("conv");
        let cin = self.channels(x);
        let fan_in = (cin * attrs.kernel[0] * attrs.kernel[1]).max(1);
        let w = self.normal(
            &[out_channels, cin, attrs.kernel[0], attrs.kernel[1]],
            (2.0 / fan_in as f32).sqrt(),
        );
        let w_name = format!("{name}.weight");
        self.initializers.insert(w_name.clone(), Initializer::Float(w));
        let mut inputs = vec![x.to_string(), w_name];
        if bias {
            let b = match self.bn_init {
                BnInit::Identity => Tensor::zeros(&[out_channels]),
                BnInit::Random => self.normal(&[out_channels], 0.1),
            };
            let b_name = format!("{name}.bias");
            self.initializers.insert(b_name.clone(), Initializer::Float(b));
            inputs.push(b_name);
        }
        self.push(name, Op::Conv(attrs), inputs)
    }

    pub fn batch_norm(&mut self, x: &str) -> String {
        let name = self.next_name("bn");
        let c = self.channels(x);
        let (scale, bias, mean, var) = match self.bn_init {
            BnInit::Identity => (
                Tensor::full(&[c], 1.0),
                Tensor::zeros(&[c]),
                Tensor::zeros(&[c]),
                Tensor::full(&[c], 1.0),
            ),
            BnInit::Random => {
                let scale = (0..c)
                    .map(|_| {
                        let m: f32 = self.rng.random_range(0.2..1.5);
                        if self.rng.random_bool(0.5) { m } else { -m }
                    })
                    .collect();
                let var = (0..c).map(|_| self.rng.random_range(0.5f32..1.5)).collect();
                (
                    Tensor::from_vec(&[c], scale).expect("len"),
                    self.normal(&[c], 0.3),
                    self.normal(&[c], 0.3),
                    Tensor::from_vec(&[c], var).expect("len"),
                )
            }
        };
        let mut inputs = vec![x.to_string()];
        for (suffix, t) in [("scale", scale), ("bias", bias), ("mean", mean), ("var", var)] {
            let p = format!("{name}.{suffix}");
            self.initializers.insert(p.clone(), Initializer::Float(t));
            inputs.push(p);
        }
        self.push(name, Op::BatchNorm { epsilon: DEFAULT_BN_EPSILON }, inputs)
    }

    /// Conv → BatchNorm → Relu.
    pub fn conv_bn_relu(&mut self, x: &str, out_channels: usize, attrs: ConvAttrs) -> String {
        let y = self.conv(x, out_channels, attrs, false);
        let y = self.batch_norm(&y);
        self.relu(&y)
    }

    pub fn relu(&mut self, x: &str) -> String {
        let name = self.next_name("relu");
        self.push(name, Op::Relu, vec![x.into()])
    }

    pub fn add(&mut self, a: &str, b: &str) -> String {
        let name = self.next_name("add");
        self.push(name, Op::Add, vec![a.into(), b.into()])
    }

    pub fn concat(&mut self, parts: &[&str]) -> String {
        let name = self.next_name("concat");
        self.push(name, Op::Concat { axis: 1 }, parts.iter().map(|s| s.to_string()).collect())
    }

    pub fn resize(&mut self, x: &str, scale: f32) -> String {
        let name = self.next_name("resize");
        self.push(name, Op::Resize { scales: [scale, scale] }, vec![x.into()])
    }

    pub fn max_pool(&mut self, x: &str, kernel: usize, stride: usize, pad: usize) -> String {
        let name = self.next_name("maxpool");
        let attrs = PoolAttrs {
            kernel: [kernel; 2],
            stride: [stride; 2],
            pads: [pad; 4],
        };
        self.push(name, Op::MaxPool(attrs), vec![x.into()])
    }

    pub fn softmax(&mut self, x: &str) -> String {
        let name = self.next_name("softmax");
        self.push(name, Op::Softmax { axis: 1 }, vec![x.into()])
    }

    pub fn argmax(&mut self, x: &str) -> String {
        let name = self.next_name("argmax");
        self.push(name, Op::ArgMax { axis: 1, keepdims: true }, vec![x.into()])
    }

    pub fn output(&mut self, x: &str) {
        self.outputs.push(x.to_string());
    }

    /// Tensors read by at least one node built so far.
    pub fn consumed_tensors(&self) -> std::collections::HashSet<&str> {
        self.nodes.iter().flat_map(|n| n.inputs.iter().map(String::as_str)).collect()
    }

    /// Validate and shape-infer the assembled model.
    pub fn finish(self) -> Result<GraphModel> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let model = GraphModel {
            name: self.name,
            opset: OPSET_VERSION,
            inputs: vec![self.input],
            outputs: self.outputs,
            nodes: self.nodes,
            initializers: self.initializers,
            value_shapes: BTreeMap::new(),
        };
        model.validated()
    }
}

//! Human-readable JSON dump of a model.
//!
//! Layout (version 1):
//!
//! ```text
//! { "format_version": 1, "name", "opset",
//!   "inputs":  [{ "name", "shape" }],
//!   "outputs": [{ "name", "shape" }],
//!   "nodes":   [{ "name", "op", "attributes", "inputs", "outputs", "output_shapes" }],
//!   "parameters": [{ "name", "dtype", "shape", "values"? }],
//!   "partition"?: { "groups", "adds", "concats" } }
//! ```

use serde_json::{json, Map, Value};

use super::{GraphModel, Initializer};
use crate::deps::DependencyPartition;

pub const DEBUG_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default)]
pub struct DebugOptions<'a> {
    /// Embed parameter values, not just shapes.
    pub include_values: bool,
    /// Attach a channel-group table.
    pub partition: Option<&'a DependencyPartition>,
}

pub fn to_debug_json(model: &GraphModel, opts: &DebugOptions<'_>) -> String {
    let shape_of = |name: &str| -> Value {
        model
            .value_shapes
            .get(name)
            .map(|s| json!(s))
            .unwrap_or(Value::Null)
    };
    let nodes: Vec<Value> = model
        .nodes
        .iter()
        .map(|n| {
            let mut attrs = serde_json::to_value(&n.op).unwrap_or(Value::Null);
            if let Value::Object(ref mut o) = attrs {
                o.remove("op");
            }
            json!({
                "name": n.name,
                "op": n.kind().onnx_name(),
                "attributes": attrs,
                "inputs": n.inputs,
                "outputs": n.outputs,
                "output_shapes": n.outputs.iter().map(|o| shape_of(o)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let params: Vec<Value> = model
        .initializers
        .iter()
        .map(|(name, init)| {
            let mut o = Map::new();
            o.insert("name".into(), json!(name));
            o.insert("dtype".into(), json!(init.dtype()));
            o.insert("shape".into(), json!(init.shape()));
            if opts.include_values {
                let values = match init {
                    Initializer::Float(t) => json!(t.data()),
                    Initializer::Int64(t) => json!(t.data()),
                };
                o.insert("values".into(), values);
            }
            Value::Object(o)
        })
        .collect();
    let mut root = json!({
        "format_version": DEBUG_FORMAT_VERSION,
        "name": model.name,
        "opset": model.opset,
        "inputs": model.inputs.iter().map(|i| json!({"name": i.name, "shape": i.shape})).collect::<Vec<_>>(),
        "outputs": model.outputs.iter().map(|o| json!({"name": o, "shape": shape_of(o)})).collect::<Vec<_>>(),
        "nodes": nodes,
        "parameters": params,
    });
    if let Some(p) = opts.partition {
        root["partition"] = serde_json::to_value(p).unwrap_or(Value::Null);
    }
    serde_json::to_string_pretty(&root).expect("json values serialize")
}

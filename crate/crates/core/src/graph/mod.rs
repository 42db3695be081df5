//! Graph IR: typed operators over tensor edges, validation, shape inference
//! and deterministic topological ordering.

mod builder;
mod file;
pub mod fusion;
pub mod samples;
pub mod select;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DataType, LogicalShape, LogicalTensor, TensorError};

pub use builder::GraphBuilder;
pub(crate) use builder::shape_dims;
pub use file::{parse_graph, parse_graph_str, write_graph, GraphFile};
pub use fusion::{defuse, fuse, FusedExpr, FusedKernelSpec, FusionEvent, FusionPattern, FusionReport, FusionRule};
pub use select::{output_names, select_kernel, slot_names, Binding, BUILTIN_PROFILES, Capability, DeviceProfile, KernelChoice, KernelKind, OperandRole, QuantPlacement, SelectError, Stage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("parse error at line {line}, column {column} (field `{path}`): {message}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` references undefined tensor `{tensor}`")]
    DanglingEdge { node: String, tensor: String },
    #[error("tensor `{tensor}` is produced by both `{first}` and `{second}`")]
    MultipleProducers {
        tensor: String,
        first: String,
        second: String,
    },
    #[error("tensor `{0}` is consumed but never produced")]
    MissingProducer(String),
    #[error("{role} tensor `{tensor}` must not be produced by node `{node}`")]
    ProducedExternal {
        tensor: String,
        node: String,
        role: TensorRole,
    },
    #[error("graph contains a cycle through nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("node `{node}`: tensor `{tensor}` declared {declared} but inferred {inferred}")]
    ShapeMismatch {
        node: String,
        tensor: String,
        declared: String,
        inferred: String,
    },
    #[error("node `{node}`: {message}")]
    InvalidNode { node: String, message: String },
    #[error("tensor `{tensor}`: {message}")]
    InvalidTensor { tensor: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl GraphError {
    pub(crate) fn node(node: &str, message: impl Into<String>) -> Self {
        GraphError::InvalidNode {
            node: node.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Input,
    Output,
    Weight,
    Intermediate,
}

impl fmt::Display for TensorRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TensorRole::Input => "input",
            TensorRole::Output => "output",
            TensorRole::Weight => "weight",
            TensorRole::Intermediate => "intermediate",
        };
        f.write_str(s)
    }
}

/// Role of a weight-bearing node, used by quantization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightRole {
    AttentionProj,
    FeedForward,
    Embedding,
    Other,
}

/// Deterministic weight initializer stored in graph files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorInit {
    Uniform { seed: u64, scale: f32 },
    Constant { value: f32 },
}

impl TensorInit {
    pub fn materialize(&self, count: usize) -> Vec<f32> {
        match *self {
            TensorInit::Uniform { seed, scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count).map(|_| rng.gen_range(-scale..=scale)).collect()
            }
            TensorInit::Constant { value } => vec![value; count],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub id: String,
    pub dims: Vec<usize>,
    pub shape: LogicalShape,
    pub dtype: DataType,
    pub role: TensorRole,
    pub init: Option<TensorInit>,
    pub data: Option<Vec<f32>>,
}

impl TensorInfo {
    pub fn new(id: impl Into<String>, dims: Vec<usize>, dtype: DataType, role: TensorRole) -> Result<Self, GraphError> {
        let id = id.into();
        let shape = LogicalShape::from_dims(&dims).map_err(|e| GraphError::InvalidTensor {
            tensor: id.clone(),
            message: e.to_string(),
        })?;
        Ok(TensorInfo {
            id,
            dims,
            shape,
            dtype,
            role,
            init: None,
            data: None,
        })
    }

    pub fn to_tensor(&self) -> Option<LogicalTensor> {
        self.data
            .as_ref()
            .map(|d| LogicalTensor::from_parts_unchecked(self.shape, self.dtype, d.clone()))
    }
}

/// How a fully connected node handles activation quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatmulQuant {
    /// Float activations and float weights. Inputs: `x, w[, bias]`.
    #[default]
    None,
    /// Activations quantized inside the kernel. Inputs: `x, wq, w_scales[, bias]`.
    FusedActivation,
    /// Activations quantized by a preceding kernel; the node emits integer
    /// accumulators. Inputs: `xq, x_scales, wq, w_scales[, bias]`.
    PreQuantized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryOp {
    Relu,
    Gelu,
    Silu,
    Rsqrt,
    Scale(f32),
    AddConst(f32),
}

impl UnaryOp {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Gelu => {
                let k = (2.0f32 / std::f32::consts::PI).sqrt();
                0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
            }
            UnaryOp::Silu => x / (1.0 + (-x).exp()),
            UnaryOp::Rsqrt => 1.0 / x.sqrt(),
            UnaryOp::Scale(f) => x * f,
            UnaryOp::AddConst(v) => x + v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Relu => "relu",
            UnaryOp::Gelu => "gelu",
            UnaryOp::Silu => "silu",
            UnaryOp::Rsqrt => "rsqrt",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::AddConst(_) => "add_const",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    pub fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }
}

/// Operator kinds. Serialized as `{"kind": ..., "attrs": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "attrs", rename_all = "snake_case")]
pub enum OpKind {
    Conv2d {
        #[serde(default)]
        pad: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        bias: bool,
    },
    FullyConnected {
        #[serde(default)]
        bias: bool,
        #[serde(default)]
        quant: MatmulQuant,
    },
    Add,
    Sub,
    Mul,
    Relu,
    Gelu,
    Silu,
    Rsqrt,
    Scale {
        factor: f32,
    },
    AddConst {
        value: f32,
    },
    /// Merged chain of elementwise operators.
    Elementwise {
        expr: FusedExpr,
    },
    RmsNorm {
        #[serde(default = "default_eps")]
        eps: f32,
    },
    /// Rotary embedding fused with the `(B,1,S,h_q*d_h) -> (B*h_kv, S*h_q/h_kv, d_h)`
    /// layout transform. `rope = false` performs only the layout transform.
    RopeQkv {
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
        #[serde(default = "default_base")]
        base: f32,
        #[serde(default = "yes")]
        rope: bool,
        #[serde(default)]
        pos_offset: usize,
    },
    /// Inverse layout transform back to `(B,1,S,h_q*d_h)`.
    MergeHeads {
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
    },
    /// Scaled dot-product attention over transformed `q`, `k`, `v`.
    Attention {
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
    },
    /// Per-row symmetric int8 quantization: `x -> (xq, x_scales)`.
    Quantize,
    /// `(acc, x_scales, w_scales) -> acc * x_scale[row] * w_scale[o]`.
    Dequantize,
    Reshape {
        dims: Vec<usize>,
    },
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_eps() -> f32 {
    1e-6
}
fn default_base() -> f32 {
    10000.0
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::FullyConnected { .. } => "fully_connected",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Silu => "silu",
            OpKind::Rsqrt => "rsqrt",
            OpKind::Scale { .. } => "scale",
            OpKind::AddConst { .. } => "add_const",
            OpKind::Elementwise { .. } => "elementwise",
            OpKind::RmsNorm { .. } => "rms_norm",
            OpKind::RopeQkv { .. } => "rope_qkv",
            OpKind::MergeHeads { .. } => "merge_heads",
            OpKind::Attention { .. } => "attention",
            OpKind::Quantize => "quantize",
            OpKind::Dequantize => "dequantize",
            OpKind::Reshape { .. } => "reshape",
        }
    }

    pub fn unary(&self) -> Option<UnaryOp> {
        Some(match *self {
            OpKind::Relu => UnaryOp::Relu,
            OpKind::Gelu => UnaryOp::Gelu,
            OpKind::Silu => UnaryOp::Silu,
            OpKind::Rsqrt => UnaryOp::Rsqrt,
            OpKind::Scale { factor } => UnaryOp::Scale(factor),
            OpKind::AddConst { value } => UnaryOp::AddConst(value),
            _ => return None,
        })
    }

    pub fn binary(&self) -> Option<BinaryOp> {
        Some(match self {
            OpKind::Add => BinaryOp::Add,
            OpKind::Sub => BinaryOp::Sub,
            OpKind::Mul => BinaryOp::Mul,
            _ => return None,
        })
    }

    pub fn from_unary(op: UnaryOp) -> OpKind {
        match op {
            UnaryOp::Relu => OpKind::Relu,
            UnaryOp::Gelu => OpKind::Gelu,
            UnaryOp::Silu => OpKind::Silu,
            UnaryOp::Rsqrt => OpKind::Rsqrt,
            UnaryOp::Scale(factor) => OpKind::Scale { factor },
            UnaryOp::AddConst(value) => OpKind::AddConst { value },
        }
    }

    pub fn from_binary(op: BinaryOp) -> OpKind {
        match op {
            BinaryOp::Add => OpKind::Add,
            BinaryOp::Sub => OpKind::Sub,
            BinaryOp::Mul => OpKind::Mul,
        }
    }

    pub fn is_elementwise(&self) -> bool {
        self.unary().is_some() || self.binary().is_some() || matches!(self, OpKind::Elementwise { .. })
    }

    /// Ops that multiply activations by weights.
    pub fn is_matmul(&self) -> bool {
        matches!(self, OpKind::Conv2d { .. } | OpKind::FullyConnected { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NodeRepr")]
pub struct Node {
    pub id: String,
    #[serde(flatten)]
    pub kind: OpKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<WeightRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused: Option<FusedKernelSpec>,
}

/// File form of a node; `attrs` may be omitted when every attribute has a default.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRepr {
    id: String,
    kind: String,
    #[serde(default)]
    attrs: Option<serde_json::Value>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default)]
    role: Option<WeightRole>,
    #[serde(default)]
    fused: Option<FusedKernelSpec>,
}

impl TryFrom<NodeRepr> for Node {
    type Error = String;

    fn try_from(r: NodeRepr) -> Result<Self, String> {
        let mut tagged = serde_json::Map::new();
        tagged.insert("kind".into(), serde_json::Value::String(r.kind.clone()));
        if let Some(a) = r.attrs {
            tagged.insert("attrs".into(), a);
        }
        let kind = match serde_json::from_value::<OpKind>(serde_json::Value::Object(tagged.clone())) {
            Ok(k) => k,
            Err(first) if !tagged.contains_key("attrs") => {
                tagged.insert("attrs".into(), serde_json::Value::Object(Default::default()));
                serde_json::from_value(serde_json::Value::Object(tagged)).map_err(|_| first.to_string())?
            }
            Err(e) => return Err(e.to_string()),
        };
        let mut node = Node::new(r.id, kind, r.inputs, r.outputs);
        node.role = r.role;
        node.fused = r.fused;
        Ok(node)
    }
}

impl Node {
    pub fn new(id: impl Into<String>, kind: OpKind, inputs: Vec<String>, outputs: Vec<String>) -> Self {
        Node {
            id: id.into(),
            kind,
            inputs,
            outputs,
            role: None,
            fused: None,
        }
    }

    /// Every tensor the node reads, including fused operands.
    pub fn all_inputs(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(String::as_str)
    }

    /// Expression computed by an elementwise node, with tensor leaves.
    pub fn elementwise_expr(&self) -> Option<FusedExpr> {
        if let Some(op) = self.kind.unary() {
            return Some(FusedExpr::unary(op, FusedExpr::input(&self.inputs[0])));
        }
        if let Some(op) = self.kind.binary() {
            return Some(FusedExpr::binary(
                op,
                FusedExpr::input(&self.inputs[0]),
                FusedExpr::input(&self.inputs[1]),
            ));
        }
        match &self.kind {
            OpKind::Elementwise { expr } => Some(expr.clone()),
            _ => None,
        }
    }

    /// Inputs of the root operator, with fused prologues expanded.
    pub fn root_inputs(&self) -> Vec<FusedExpr> {
        match &self.fused {
            Some(spec) => spec.root_inputs.clone(),
            None => self.inputs.iter().map(FusedExpr::input).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphIR {
    pub tensors: Vec<TensorInfo>,
    pub nodes: Vec<Node>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    index: HashMap<String, usize>,
}

impl GraphIR {
    pub fn new(tensors: Vec<TensorInfo>, nodes: Vec<Node>, inputs: Vec<String>, outputs: Vec<String>) -> Self {
        let mut g = GraphIR {
            tensors,
            nodes,
            inputs,
            outputs,
            index: HashMap::new(),
        };
        g.reindex();
        g
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id.clone(), i))
            .collect();
    }

    pub fn tensor(&self, id: &str) -> Option<&TensorInfo> {
        self.index.get(id).map(|&i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, id: &str) -> Option<&mut TensorInfo> {
        self.index.get(id).map(|&i| &mut self.tensors[i])
    }

    pub(crate) fn add_tensor(&mut self, info: TensorInfo) {
        self.index.insert(info.id.clone(), self.tensors.len());
        self.tensors.push(info);
    }

    pub(crate) fn remove_tensors(&mut self, ids: &BTreeSet<String>) {
        self.tensors.retain(|t| !ids.contains(&t.id));
        self.reindex();
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn producers(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                m.insert(o.as_str(), i);
            }
        }
        m
    }

    /// Consumer node indices per tensor, in node order, one entry per node.
    pub fn consumers(&self) -> HashMap<&str, Vec<usize>> {
        let mut m: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let unique: BTreeSet<&str> = n.all_inputs().collect();
            for t in unique {
                m.entry(t).or_default().push(i);
            }
        }
        m
    }

    pub fn is_graph_output(&self, id: &str) -> bool {
        self.outputs.iter().any(|o| o == id)
    }

    /// Kahn's algorithm, always taking the lowest ready node index.
    pub fn topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let producers = self.producers();
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            let deps: BTreeSet<usize> = node
                .all_inputs()
                .filter_map(|t| producers.get(t).copied())
                .collect();
            indegree[i] = deps.len();
            for d in deps {
                users[d].push(i);
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n)
                .filter(|i| indegree[*i] > 0)
                .map(|i| self.nodes[i].id.clone())
                .collect();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Rewrites `nodes` into topological order.
    pub fn sort_nodes(&mut self) -> Result<(), GraphError> {
        let order = self.topo_order()?;
        let mut old: Vec<Option<Node>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order.into_iter().map(|i| old[i].take().unwrap()).collect();
        Ok(())
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = BTreeSet::new();
        for t in &self.tensors {
            if !seen.insert(t.id.as_str()) {
                return Err(GraphError::DuplicateId(t.id.clone()));
            }
            if t.role == TensorRole::Weight {
                match &t.data {
                    Some(d) if d.len() == t.shape.element_count() => {}
                    _ => {
                        return Err(GraphError::InvalidTensor {
                            tensor: t.id.clone(),
                            message: "weight needs values or init".into(),
                        })
                    }
                }
            }
        }
        let mut node_ids = BTreeSet::new();
        let mut produced: BTreeMap<&str, &str> = BTreeMap::new();
        for n in &self.nodes {
            if !node_ids.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
            for t in n.all_inputs().chain(n.outputs.iter().map(String::as_str)) {
                if self.tensor(t).is_none() {
                    return Err(GraphError::DanglingEdge {
                        node: n.id.clone(),
                        tensor: t.to_string(),
                    });
                }
            }
            for o in &n.outputs {
                if let Some(first) = produced.insert(o, &n.id) {
                    return Err(GraphError::MultipleProducers {
                        tensor: o.clone(),
                        first: first.to_string(),
                        second: n.id.clone(),
                    });
                }
                let role = self.tensor(o).unwrap().role;
                if matches!(role, TensorRole::Input | TensorRole::Weight) {
                    return Err(GraphError::ProducedExternal {
                        tensor: o.clone(),
                        node: n.id.clone(),
                        role,
                    });
                }
            }
        }
        for n in &self.nodes {
            for t in n.all_inputs() {
                let role = self.tensor(t).unwrap().role;
                if matches!(role, TensorRole::Intermediate | TensorRole::Output) && !produced.contains_key(t) {
                    return Err(GraphError::MissingProducer(t.to_string()));
                }
            }
        }
        for id in &self.inputs {
            match self.tensor(id) {
                Some(t) if t.role == TensorRole::Input => {}
                _ => {
                    return Err(GraphError::InvalidTensor {
                        tensor: id.clone(),
                        message: "listed as graph input but not declared with role input".into(),
                    })
                }
            }
        }
        for id in &self.outputs {
            if !produced.contains_key(id.as_str()) {
                return Err(GraphError::MissingProducer(id.clone()));
            }
        }
        self.topo_order()?;
        for n in &self.nodes {
            let inferred = infer_node(self, n)?;
            if inferred.len() != n.outputs.len() {
                return Err(GraphError::node(
                    &n.id,
                    format!("expected {} outputs, got {}", inferred.len(), n.outputs.len()),
                ));
            }
            for ((shape, dtype), out) in inferred.into_iter().zip(&n.outputs) {
                let t = self.tensor(out).unwrap();
                if t.shape != shape || t.dtype != dtype {
                    return Err(GraphError::ShapeMismatch {
                        node: n.id.clone(),
                        tensor: out.clone(),
                        declared: format!("{} {}", t.shape, t.dtype.name()),
                        inferred: format!("{} {}", shape, dtype.name()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Weight tensor ids consumed by matmul nodes, with the consuming node.
    pub fn matmul_weights(&self) -> Vec<(&Node, &str)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if !n.kind.is_matmul() {
                continue;
            }
            let idx = match n.kind {
                OpKind::FullyConnected {
                    quant: MatmulQuant::PreQuantized,
                    ..
                } => 2,
                _ => 1,
            };
            let roots = n.root_inputs();
            let Some(w) = roots.get(idx).and_then(FusedExpr::as_input) else { continue };
            if let Some(id) = n.inputs.iter().find(|i| *i == w) {
                out.push((n, id.as_str()));
            }
        }
        out
    }
}

pub(crate) type Inferred = Vec<(LogicalShape, DataType)>;

fn arity(node: &Node, got: usize, allowed: &[usize]) -> Result<(), GraphError> {
    if allowed.contains(&got) {
        Ok(())
    } else {
        Err(GraphError::node(
            &node.id,
            format!("{} expects {:?} inputs, got {got}", node.kind.name(), allowed),
        ))
    }
}

fn expr_shape(graph: &GraphIR, node: &Node, expr: &FusedExpr) -> Result<(LogicalShape, DataType), GraphError> {
    let leaves = expr.leaves();
    let first = leaves
        .first()
        .ok_or_else(|| GraphError::node(&node.id, "expression has no tensor operand"))?;
    let t = graph.tensor(first).ok_or_else(|| GraphError::DanglingEdge {
        node: node.id.clone(),
        tensor: first.to_string(),
    })?;
    for l in &leaves[1..] {
        let o = graph.tensor(l).ok_or_else(|| GraphError::DanglingEdge {
            node: node.id.clone(),
            tensor: l.to_string(),
        })?;
        if o.shape != t.shape {
            return Err(GraphError::node(
                &node.id,
                format!("elementwise operands `{first}` {} and `{l}` {} differ", t.shape, o.shape),
            ));
        }
    }
    Ok((t.shape, t.dtype))
}

/// Output shapes and dtypes of a node, including fused prologue/epilogue.
pub(crate) fn infer_node(graph: &GraphIR, node: &Node) -> Result<Inferred, GraphError> {
    let roots = node.root_inputs();
    let mut ins = Vec::with_capacity(roots.len());
    for r in &roots {
        ins.push(expr_shape(graph, node, r)?);
    }
    let mut out = infer_kind(node, &ins)?;
    if let Some(spec) = &node.fused {
        if spec.dequantize_output {
            for o in &mut out {
                o.1 = DataType::F32;
            }
        }
        if let Some(epi) = &spec.epilogue {
            for leaf in epi.leaves() {
                let t = graph.tensor(leaf).ok_or_else(|| GraphError::DanglingEdge {
                    node: node.id.clone(),
                    tensor: leaf.to_string(),
                })?;
                if t.shape != out[0].0 {
                    return Err(GraphError::node(&node.id, format!("epilogue operand `{leaf}` has shape {}", t.shape)));
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn infer_kind(node: &Node, ins: &[(LogicalShape, DataType)]) -> Result<Inferred, GraphError> {
    let err = |m: String| GraphError::node(&node.id, m);
    let shape = |dims: &[usize]| LogicalShape::from_dims(dims).map_err(|e| err(e.to_string()));
    match &node.kind {
        OpKind::Conv2d { pad, stride, bias } => {
            arity(node, ins.len(), &[2 + *bias as usize])?;
            let (x, dt) = ins[0];
            let w = ins[1].0;
            if w.c != x.c || x.d != 1 || w.d != 1 {
                return Err(err(format!("conv2d weights {w} incompatible with input {x}")));
            }
            if *stride == 0 || x.h + 2 * pad < w.h || x.w + 2 * pad < w.w {
                return Err(err("conv2d window larger than padded input".into()));
            }
            if *bias && ins[2].0.element_count() != w.b {
                return Err(err("bias length must equal output channels".into()));
            }
            let oh = (x.h + 2 * pad - w.h) / stride + 1;
            let ow = (x.w + 2 * pad - w.w) / stride + 1;
            Ok(vec![(shape(&[x.b, oh, ow, w.b])?, dt)])
        }
        OpKind::FullyConnected { bias, quant } => {
            let base = match quant {
                MatmulQuant::None => 2,
                MatmulQuant::FusedActivation => 3,
                MatmulQuant::PreQuantized => 4,
            };
            arity(node, ins.len(), &[base + *bias as usize])?;
            let x = ins[0].0;
            let widx = if *quant == MatmulQuant::PreQuantized { 2 } else { 1 };
            let w = ins[widx].0;
            if w.h * w.w * w.d != 1 || w.c != x.c {
                return Err(err(format!("fully_connected weights {w} incompatible with input {x}")));
            }
            if *quant != MatmulQuant::None && ins[widx + 1].0.element_count() != w.b {
                return Err(err("weight scales must have one entry per output channel".into()));
            }
            if *quant == MatmulQuant::PreQuantized && ins[1].0 != x.with_c(1) {
                return Err(err("activation scales must have one entry per row".into()));
            }
            if *bias && ins[ins.len() - 1].0.element_count() != w.b {
                return Err(err("bias length must equal output channels".into()));
            }
            let dt = if *quant == MatmulQuant::None { ins[0].1 } else { DataType::F32 };
            Ok(vec![(x.with_c(w.b), dt)])
        }
        k if k.unary().is_some() => {
            arity(node, ins.len(), &[1])?;
            Ok(vec![ins[0]])
        }
        k if k.binary().is_some() => {
            arity(node, ins.len(), &[2])?;
            if ins[0].0 != ins[1].0 {
                return Err(err(format!("operand shapes {} and {} differ", ins[0].0, ins[1].0)));
            }
            Ok(vec![ins[0]])
        }
        OpKind::Elementwise { expr } => {
            let n = expr.leaves().len();
            arity(node, ins.len(), &[n])?;
            if ins.iter().any(|i| i.0 != ins[0].0) {
                return Err(err("elementwise operands differ in shape".into()));
            }
            Ok(vec![ins[0]])
        }
        OpKind::RmsNorm { .. } => {
            arity(node, ins.len(), &[2])?;
            if ins[1].0.element_count() != ins[0].0.c {
                return Err(err("rms_norm gamma must have one entry per channel".into()));
            }
            Ok(vec![ins[0]])
        }
        OpKind::RopeQkv {
            heads,
            kv_heads,
            head_dim,
            ..
        } => {
            arity(node, ins.len(), &[1])?;
            let x = ins[0].0;
            if *kv_heads == 0 || heads % kv_heads != 0 {
                return Err(err(format!("kv_heads {kv_heads} must divide heads {heads}")));
            }
            if x.h != 1 || x.d != 1 || x.c != heads * head_dim {
                return Err(err(format!("expected (B,1,S,{}) input, got {x}", heads * head_dim)));
            }
            Ok(vec![(shape(&[x.b * kv_heads, x.w * heads / kv_heads, *head_dim])?, ins[0].1)])
        }
        OpKind::MergeHeads {
            heads,
            kv_heads,
            head_dim,
        } => {
            arity(node, ins.len(), &[1])?;
            let x = ins[0].0;
            if *kv_heads == 0 || heads % kv_heads != 0 {
                return Err(err(format!("kv_heads {kv_heads} must divide heads {heads}")));
            }
            let g = heads / kv_heads;
            if x.b != 1 || x.d != 1 || x.c != *head_dim || !x.h.is_multiple_of(*kv_heads) || !x.w.is_multiple_of(g) {
                return Err(err(format!("unexpected transformed layout {x}")));
            }
            Ok(vec![(shape(&[x.h / kv_heads, 1, x.w / g, heads * head_dim])?, ins[0].1)])
        }
        OpKind::Attention { head_dim, .. } => {
            arity(node, ins.len(), &[3])?;
            let (q, k, v) = (ins[0].0, ins[1].0, ins[2].0);
            if q.c != *head_dim || k.c != *head_dim || k != v || q.h != k.h || q.b != 1 || k.b != 1 {
                return Err(err(format!("attention shapes q={q} k={k} v={v} inconsistent")));
            }
            Ok(vec![ins[0]])
        }
        OpKind::Quantize => {
            arity(node, ins.len(), &[1])?;
            let x = ins[0].0;
            Ok(vec![(x, DataType::I8), (x.with_c(1), DataType::F32)])
        }
        OpKind::Dequantize => {
            arity(node, ins.len(), &[3])?;
            let acc = ins[0].0;
            if ins[1].0 != acc.with_c(1) || ins[2].0.element_count() != acc.c {
                return Err(err("dequantize scales do not match accumulator".into()));
            }
            Ok(vec![(acc, DataType::F32)])
        }
        OpKind::Reshape { dims } => {
            arity(node, ins.len(), &[1])?;
            let s = shape(dims)?;
            if s.element_count() != ins[0].0.element_count() {
                return Err(err(format!("reshape to {dims:?} changes element count")));
            }
            Ok(vec![(s, ins[0].1)])
        }
        _ => unreachable!("all kinds covered"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> GraphIR {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 2, 2, 4], DataType::F32);
        b.weight("w", &[4, 1, 1, 4], TensorInit::Uniform { seed: 1, scale: 0.5 });
        b.op("fc", OpKind::FullyConnected { bias: false, quant: MatmulQuant::None }, &["x", "w"]).unwrap();
        b.op("r", OpKind::Relu, &["fc"]).unwrap();
        b.output("r");
        b.build().unwrap()
    }

    #[test]
    fn builder_validates() {
        let g = chain();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.topo_order().unwrap(), vec![0, 1]);
        assert_eq!(g.tensor("fc").unwrap().role, TensorRole::Intermediate);
        assert_eq!(g.tensor("r").unwrap().role, TensorRole::Output);
    }

    #[test]
    fn cycle_is_detected() {
        let mut g = chain();
        g.nodes[0].inputs[0] = "r".into();
        assert!(matches!(g.topo_order(), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn dangling_edge_names_tensor() {
        let mut g = chain();
        g.nodes[1].inputs[0] = "nope".into();
        assert_eq!(
            g.validate(),
            Err(GraphError::DanglingEdge {
                node: "r".into(),
                tensor: "nope".into()
            })
        );
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = chain();
        let t = g.tensor_mut("fc").unwrap();
        t.shape = LogicalShape::bhwc(1, 2, 2, 8);
        assert!(matches!(g.validate(), Err(GraphError::ShapeMismatch { .. })));
    }

    #[test]
    fn qkv_shapes() {
        let node = Node::new(
            "q",
            OpKind::RopeQkv {
                heads: 8,
                kv_heads: 2,
                head_dim: 16,
                base: 10000.0,
                rope: true,
                pos_offset: 0,
            },
            vec!["x".into()],
            vec!["y".into()],
        );
        let out = infer_kind(&node, &[(LogicalShape::bhwc(1, 1, 4, 128), DataType::F32)]).unwrap();
        assert_eq!(out[0].0.extents(), [1, 2, 16, 1, 16]);
    }
}

//! Operator fusion.
//!
//! Elementwise operators are folded into neighbouring compute kernels as
//! prologue expressions (applied to a root input) or epilogue expressions
//! (applied to the root result), and elementwise chains collapse into single
//! elementwise nodes. An intermediate edge is only removed when it has exactly
//! one consumer and is not a graph output. Rules run to a fixed point, always
//! applying the first legal rewrite in node order.

use std::collections::{BTreeSet, HashMap};
use std::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use super::{infer_kind, BinaryOp, GraphIR, MatmulQuant, Node, OpKind, TensorInfo, TensorRole, UnaryOp};

/// Expression tree over tensors used by fused prologues and epilogues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedExpr {
    Input(String),
    /// The root operator's result (epilogues only).
    Acc,
    Unary {
        op: UnaryOp,
        arg: Box<FusedExpr>,
    },
    Binary {
        op: BinaryOp,
        lhs: Box<FusedExpr>,
        rhs: Box<FusedExpr>,
    },
}

impl FusedExpr {
    pub fn input(id: impl AsRef<str>) -> Self {
        FusedExpr::Input(id.as_ref().to_string())
    }

    pub fn unary(op: UnaryOp, arg: FusedExpr) -> Self {
        FusedExpr::Unary { op, arg: Box::new(arg) }
    }

    pub fn binary(op: BinaryOp, lhs: FusedExpr, rhs: FusedExpr) -> Self {
        FusedExpr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn as_input(&self) -> Option<&str> {
        match self {
            FusedExpr::Input(id) => Some(id),
            _ => None,
        }
    }

    /// Distinct tensor leaves in evaluation order.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            FusedExpr::Input(id) => {
                if !out.contains(&id.as_str()) {
                    out.push(id);
                }
            }
            FusedExpr::Acc => {}
            FusedExpr::Unary { arg, .. } => arg.collect_leaves(out),
            FusedExpr::Binary { lhs, rhs, .. } => {
                lhs.collect_leaves(out);
                rhs.collect_leaves(out);
            }
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.leaves().contains(&id)
    }

    /// Operator names in post-order.
    pub fn ops(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        self.collect_ops(&mut out);
        out
    }

    fn collect_ops(&self, out: &mut Vec<&'static str>) {
        match self {
            FusedExpr::Input(_) | FusedExpr::Acc => {}
            FusedExpr::Unary { op, arg } => {
                arg.collect_ops(out);
                out.push(op.name());
            }
            FusedExpr::Binary { op, lhs, rhs } => {
                lhs.collect_ops(out);
                rhs.collect_ops(out);
                out.push(op.name());
            }
        }
    }

    pub fn substitute(&self, id: &str, with: &FusedExpr) -> FusedExpr {
        match self {
            FusedExpr::Input(t) if t == id => with.clone(),
            FusedExpr::Input(_) | FusedExpr::Acc => self.clone(),
            FusedExpr::Unary { op, arg } => FusedExpr::unary(*op, arg.substitute(id, with)),
            FusedExpr::Binary { op, lhs, rhs } => {
                FusedExpr::binary(*op, lhs.substitute(id, with), rhs.substitute(id, with))
            }
        }
    }

    pub fn replace_acc(&self, with: &FusedExpr) -> FusedExpr {
        match self {
            FusedExpr::Acc => with.clone(),
            FusedExpr::Input(_) => self.clone(),
            FusedExpr::Unary { op, arg } => FusedExpr::unary(*op, arg.replace_acc(with)),
            FusedExpr::Binary { op, lhs, rhs } => FusedExpr::binary(*op, lhs.replace_acc(with), rhs.replace_acc(with)),
        }
    }
}

impl fmt::Display for FusedExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusedExpr::Input(id) => write!(f, "{id}"),
            FusedExpr::Acc => write!(f, "acc"),
            FusedExpr::Unary { op, arg } => match op {
                UnaryOp::Scale(k) => write!(f, "scale({arg}, {k})"),
                UnaryOp::AddConst(k) => write!(f, "add_const({arg}, {k})"),
                _ => write!(f, "{}({arg})", op.name()),
            },
            FusedExpr::Binary { op, lhs, rhs } => write!(f, "{}({lhs}, {rhs})", op.name()),
        }
    }
}

/// Fused kernel description attached to a root node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedKernelSpec {
    pub root: String,
    /// One expression per root input slot; plain inputs are `Input` leaves.
    pub root_inputs: Vec<FusedExpr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epilogue: Option<FusedExpr>,
    #[serde(default)]
    pub dequantize_output: bool,
    /// Tensors read only by the prologue or epilogue.
    #[serde(default)]
    pub residual_inputs: Vec<String>,
}

impl FusedKernelSpec {
    fn from_node(node: &Node) -> Self {
        FusedKernelSpec {
            root: node.kind.name().to_string(),
            root_inputs: node.inputs.iter().map(FusedExpr::input).collect(),
            epilogue: None,
            dequantize_output: false,
            residual_inputs: Vec::new(),
        }
    }

    /// `(slot, ops)` for every input slot carrying a prologue.
    pub fn prologue_ops(&self) -> Vec<(usize, Vec<&'static str>)> {
        self.root_inputs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.as_input().is_none())
            .map(|(i, e)| (i, e.ops()))
            .collect()
    }

    pub fn prologue_op_count(&self) -> usize {
        self.prologue_ops().iter().map(|(_, o)| o.len()).sum()
    }

    pub fn epilogue_ops(&self) -> Vec<&'static str> {
        self.epilogue.as_ref().map(|e| e.ops()).unwrap_or_default()
    }

    fn refresh(&mut self, node_inputs: &mut Vec<String>) {
        let mut all: Vec<String> = Vec::new();
        let mut residual = Vec::new();
        for e in &self.root_inputs {
            let plain = e.as_input().is_some();
            for l in e.leaves() {
                if !all.iter().any(|a| a == l) {
                    all.push(l.to_string());
                }
                if !plain && !residual.iter().any(|r: &String| r == l) {
                    residual.push(l.to_string());
                }
            }
        }
        if let Some(epi) = &self.epilogue {
            for l in epi.leaves() {
                if !all.iter().any(|a| a == l) {
                    all.push(l.to_string());
                }
                if !residual.iter().any(|r: &String| r == l) {
                    residual.push(l.to_string());
                }
            }
        }
        self.residual_inputs = residual;
        *node_inputs = all;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionRule {
    Prologue,
    Epilogue,
    ElementwiseMerge,
    DequantizeEpilogue,
}

impl FusionRule {
    fn name(self) -> &'static str {
        match self {
            FusionRule::Prologue => "prologue",
            FusionRule::Epilogue => "epilogue",
            FusionRule::ElementwiseMerge => "elementwise-merge",
            FusionRule::DequantizeEpilogue => "dequantize-epilogue",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionEvent {
    pub rule: FusionRule,
    pub target: String,
    pub absorbed: String,
}

/// Recognized multi-op patterns in the fused graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPattern {
    pub name: String,
    pub node: String,
    pub ops: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionReport {
    pub events: Vec<FusionEvent>,
    pub patterns: Vec<FusionPattern>,
    pub nodes_before: usize,
    pub nodes_after: usize,
}

impl FusionReport {
    pub fn has_pattern(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| p.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "fusion nodes_before={} nodes_after={} events={}", self.nodes_before, self.nodes_after, self.events.len()).unwrap();
        for e in &self.events {
            writeln!(s, "event rule={} target={} absorbed={}", e.rule.name(), e.target, e.absorbed).unwrap();
        }
        for p in &self.patterns {
            writeln!(s, "pattern name={} node={} ops={}", p.name, p.node, p.ops.join(",")).unwrap();
        }
        s
    }
}

fn accepts_prologue(node: &Node) -> bool {
    match node.kind {
        OpKind::FullyConnected { quant, .. } => quant != MatmulQuant::PreQuantized,
        OpKind::Conv2d { .. } | OpKind::RmsNorm { .. } => true,
        _ => false,
    }
}

fn accepts_epilogue(node: &Node) -> bool {
    if node.outputs.len() != 1 {
        return false;
    }
    match node.kind {
        OpKind::FullyConnected { quant, .. } => {
            quant != MatmulQuant::PreQuantized || node.fused.as_ref().is_some_and(|f| f.dequantize_output)
        }
        OpKind::Conv2d { .. } | OpKind::RmsNorm { .. } => true,
        _ => false,
    }
}

fn ensure_spec(node: &mut Node) -> &mut FusedKernelSpec {
    if node.fused.is_none() {
        node.fused = Some(FusedKernelSpec::from_node(node));
    }
    node.fused.as_mut().unwrap()
}

fn refresh(node: &mut Node) {
    if let Some(spec) = node.fused.as_mut() {
        spec.refresh(&mut node.inputs);
    }
}

/// Applies one rewrite, returning what happened and the tensor that vanished.
fn fuse_step(g: &mut GraphIR, shared: &BTreeSet<String>) -> Option<(FusionEvent, String)> {
    let producers: HashMap<String, usize> = g.producers().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let consumers: HashMap<String, Vec<usize>> = g.consumers().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let sole_consumer = |t: &str| match consumers.get(t) {
        Some(c) if c.len() == 1 => Some(c[0]),
        _ => None,
    };

    for ei in 0..g.nodes.len() {
        let e = &g.nodes[ei];
        if e.kind == OpKind::Dequantize {
            let acc = &e.inputs[0];
            let Some(&pi) = producers.get(acc) else { continue };
            let p = &g.nodes[pi];
            let pre = matches!(p.kind, OpKind::FullyConnected { quant: MatmulQuant::PreQuantized, .. });
            let done = p.fused.as_ref().is_some_and(|f| f.dequantize_output || f.epilogue.is_some());
            let roots = p.root_inputs();
            let scales_match = roots.len() >= 4
                && roots[1].as_input() == Some(e.inputs[1].as_str())
                && roots[3].as_input() == Some(e.inputs[2].as_str());
            if pre && !done && scales_match && sole_consumer(acc) == Some(ei) && !g.is_graph_output(acc) {
                let out = e.outputs[0].clone();
                let event = FusionEvent {
                    rule: FusionRule::DequantizeEpilogue,
                    target: p.id.clone(),
                    absorbed: e.id.clone(),
                };
                let acc = acc.clone();
                let p = &mut g.nodes[pi];
                ensure_spec(p).dequantize_output = true;
                p.outputs = vec![out];
                refresh(p);
                g.nodes.remove(ei);
                return Some((event, acc));
            }
            continue;
        }
        let Some(expr) = e.elementwise_expr() else { continue };
        let t = e.outputs[0].clone();
        let e_id = e.id.clone();
        let t_is_output = g.is_graph_output(&t);

        // Prologue into the sole consumer.
        if let (Some(ri), false) = (sole_consumer(&t), t_is_output) {
            let r = &g.nodes[ri];
            let roots = r.root_inputs();
            let in_epilogue = r.fused.as_ref().and_then(|f| f.epilogue.as_ref()).is_some_and(|x| x.contains(&t));
            let only_slot0 = roots[0].contains(&t) && roots[1..].iter().all(|x| !x.contains(&t));
            if accepts_prologue(r) && only_slot0 && !in_epilogue {
                let event = FusionEvent {
                    rule: FusionRule::Prologue,
                    target: r.id.clone(),
                    absorbed: e_id,
                };
                let r = &mut g.nodes[ri];
                let spec = ensure_spec(r);
                spec.root_inputs[0] = spec.root_inputs[0].substitute(&t, &expr);
                refresh(r);
                g.nodes.remove(ei);
                return Some((event, t));
            }
        }

        // Epilogue into the producer of one operand.
        for leaf in expr.leaves() {
            let Some(&pi) = producers.get(leaf) else { continue };
            let p = &g.nodes[pi];
            if !accepts_epilogue(p) || sole_consumer(leaf) != Some(ei) || g.is_graph_output(leaf) || shared.contains(leaf) {
                continue;
            }
            let event = FusionEvent {
                rule: FusionRule::Epilogue,
                target: p.id.clone(),
                absorbed: e_id.clone(),
            };
            let leaf = leaf.to_string();
            let p = &mut g.nodes[pi];
            let spec = ensure_spec(p);
            let prev = spec.epilogue.clone().unwrap_or(FusedExpr::Acc);
            spec.epilogue = Some(expr.substitute(&leaf, &prev));
            p.outputs = vec![t];
            refresh(p);
            g.nodes.remove(ei);
            return Some((event, leaf));
        }

        // Merge into an elementwise consumer.
        if let (Some(ci), false) = (sole_consumer(&t), t_is_output) {
            let c = &g.nodes[ci];
            if let Some(cexpr) = c.elementwise_expr() {
                let event = FusionEvent {
                    rule: FusionRule::ElementwiseMerge,
                    target: c.id.clone(),
                    absorbed: e_id,
                };
                let merged = cexpr.substitute(&t, &expr);
                let c = &mut g.nodes[ci];
                c.inputs = merged.leaves().into_iter().map(str::to_string).collect();
                c.kind = OpKind::Elementwise { expr: merged };
                g.nodes.remove(ei);
                return Some((event, t));
            }
        }
    }
    None
}

fn classify(g: &GraphIR) -> Vec<FusionPattern> {
    let mut out = Vec::new();
    for n in &g.nodes {
        let Some(spec) = &n.fused else { continue };
        let slot0 = &spec.root_inputs[0];
        let two_leaves = slot0.leaves().len() >= 2 && matches!(slot0, FusedExpr::Binary { .. });
        match n.kind {
            OpKind::FullyConnected { .. } if two_leaves => out.push(FusionPattern {
                name: "fc-two-branch-prologue".into(),
                node: n.id.clone(),
                ops: slot0.ops().into_iter().map(str::to_string).collect(),
            }),
            OpKind::RmsNorm { .. } if two_leaves && slot0.ops().contains(&"add") => out.push(FusionPattern {
                name: "rmsnorm-residual-prologue".into(),
                node: n.id.clone(),
                ops: slot0.ops().into_iter().map(str::to_string).collect(),
            }),
            _ => {}
        }
        if spec.epilogue.is_some() {
            out.push(FusionPattern {
                name: format!("{}-epilogue", spec.root),
                node: n.id.clone(),
                ops: spec.epilogue_ops().into_iter().map(str::to_string).collect(),
            });
        }
    }
    out
}

pub fn fuse(graph: &GraphIR) -> (GraphIR, FusionReport) {
    let mut g = graph.clone();
    let mut report = FusionReport {
        nodes_before: g.nodes.len(),
        ..Default::default()
    };
    // Edges with several consumers in the input graph stay materialized even
    // after their consumers merge.
    let shared: BTreeSet<String> = graph
        .consumers()
        .into_iter()
        .filter(|(_, c)| c.len() > 1)
        .map(|(t, _)| t.to_string())
        .collect();
    let mut dead = BTreeSet::new();
    while let Some((event, vanished)) = fuse_step(&mut g, &shared) {
        report.events.push(event);
        dead.insert(vanished);
    }
    g.remove_tensors(&dead);
    g.sort_nodes().expect("fusion keeps the graph acyclic");
    report.nodes_after = g.nodes.len();
    report.patterns = classify(&g);
    (g, report)
}

/// Expands fused nodes back into one node per operator.
pub fn defuse(graph: &GraphIR) -> GraphIR {
    let mut g = graph.clone();
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for node in std::mem::take(&mut g.nodes) {
        let mut ex = Expander {
            graph: &mut g,
            nodes: &mut nodes,
            prefix: node.id.clone(),
            counter: 0,
        };
        match (&node.kind, &node.fused) {
            (OpKind::Elementwise { expr }, _) => {
                let out = node.outputs[0].clone();
                ex.emit(expr, None, Some(out));
            }
            (_, Some(spec)) => {
                let spec = spec.clone();
                let inputs: Vec<String> = spec.root_inputs.iter().map(|e| ex.emit(e, None, None)).collect();
                let final_out = node.outputs[0].clone();
                let needs_tail = spec.dequantize_output || spec.epilogue.is_some();
                let root_out = if needs_tail { ex.fresh() } else { final_out.clone() };
                let mut root = Node::new(node.id.clone(), node.kind.clone(), inputs.clone(), vec![root_out.clone()]);
                root.role = node.role;
                ex.declare_root(&root);
                ex.nodes.push(root);
                let mut acc = root_out;
                if spec.dequantize_output {
                    let target = if spec.epilogue.is_some() { ex.fresh() } else { final_out.clone() };
                    let dq = Node::new(
                        format!("{}__dequantize", node.id),
                        OpKind::Dequantize,
                        vec![acc.clone(), inputs[1].clone(), inputs[3].clone()],
                        vec![target.clone()],
                    );
                    ex.declare_like(&target, &acc, Some(crate::tensor::DataType::F32));
                    ex.nodes.push(dq);
                    acc = target;
                }
                if let Some(epi) = &spec.epilogue {
                    ex.emit(epi, Some(&acc), Some(final_out));
                }
            }
            _ => nodes.push(node),
        }
    }
    g.nodes = nodes;
    g
}

struct Expander<'a> {
    graph: &'a mut GraphIR,
    nodes: &'a mut Vec<Node>,
    prefix: String,
    counter: usize,
}

impl Expander<'_> {
    fn fresh(&mut self) -> String {
        self.counter += 1;
        format!("{}__t{}", self.prefix, self.counter)
    }

    fn declare_like(&mut self, id: &str, like: &str, dtype: Option<crate::tensor::DataType>) {
        if self.graph.tensor(id).is_some() {
            return;
        }
        let src = self.graph.tensor(like).expect("known tensor").clone();
        self.graph.add_tensor(TensorInfo {
            id: id.to_string(),
            role: TensorRole::Intermediate,
            init: None,
            data: None,
            dtype: dtype.unwrap_or(src.dtype),
            ..src
        });
    }

    fn declare_root(&mut self, root: &Node) {
        let out = &root.outputs[0];
        if self.graph.tensor(out).is_some() {
            return;
        }
        let ins: Vec<_> = root
            .inputs
            .iter()
            .map(|i| {
                let t = self.graph.tensor(i).expect("root input declared");
                (t.shape, t.dtype)
            })
            .collect();
        let (shape, dtype) = infer_kind(root, &ins).expect("fused root was valid")[0];
        let dims = super::builder::shape_dims(&shape);
        let mut t = TensorInfo::new(out.clone(), dims, dtype, TensorRole::Intermediate).expect("valid dims");
        t.shape = shape;
        self.graph.add_tensor(t);
    }

    fn emit(&mut self, expr: &FusedExpr, acc: Option<&str>, target: Option<String>) -> String {
        match expr {
            FusedExpr::Input(id) => id.clone(),
            FusedExpr::Acc => acc.expect("accumulator available").to_string(),
            FusedExpr::Unary { op, arg } => {
                let a = self.emit(arg, acc, None);
                let out = target.unwrap_or_else(|| self.fresh());
                self.declare_like(&out, &a, None);
                let id = format!("{}__{}", self.prefix, out.rsplit("__").next().unwrap_or(&out));
                self.nodes.push(Node::new(unique_id(self.nodes, id), OpKind::from_unary(*op), vec![a], vec![out.clone()]));
                out
            }
            FusedExpr::Binary { op, lhs, rhs } => {
                let a = self.emit(lhs, acc, None);
                let b = self.emit(rhs, acc, None);
                let out = target.unwrap_or_else(|| self.fresh());
                self.declare_like(&out, &a, None);
                let id = format!("{}__{}", self.prefix, out.rsplit("__").next().unwrap_or(&out));
                self.nodes.push(Node::new(unique_id(self.nodes, id), OpKind::from_binary(*op), vec![a, b], vec![out.clone()]));
                out
            }
        }
    }
}

fn unique_id(nodes: &[Node], base: String) -> String {
    if !nodes.iter().any(|n| n.id == base) {
        return base;
    }
    (1..).map(|k| format!("{base}_{k}")).find(|c| !nodes.iter().any(|n| &n.id == c)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, TensorInit};
    use crate::tensor::DataType;

    fn fc() -> OpKind {
        OpKind::FullyConnected {
            bias: false,
            quant: MatmulQuant::None,
        }
    }

    #[test]
    fn chain_folds_into_epilogue() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 1, 3, 8], DataType::F32);
        b.weight("w", &[8, 1, 1, 8], TensorInit::Uniform { seed: 3, scale: 0.3 });
        b.op("fc", fc(), &["x", "w"]).unwrap();
        b.op("bias", OpKind::AddConst { value: 0.25 }, &["fc"]).unwrap();
        b.op("act", OpKind::Relu, &["bias"]).unwrap();
        b.output("act");
        let g = b.build().unwrap();
        let (f, report) = fuse(&g);
        f.validate().unwrap();
        assert_eq!(f.nodes.len(), 1);
        let spec = f.nodes[0].fused.as_ref().unwrap();
        assert_eq!(spec.epilogue_ops(), vec!["add_const", "relu"]);
        assert_eq!(f.nodes[0].outputs, vec!["act".to_string()]);
        assert_eq!(report.events.len(), 2);
        assert!(f.tensor("fc").is_none() && f.tensor("bias").is_none());
    }

    #[test]
    fn multi_consumer_edges_are_kept() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 1, 2, 4], DataType::F32);
        b.weight("w", &[4, 1, 1, 4], TensorInit::Uniform { seed: 3, scale: 0.3 });
        b.op("fc", fc(), &["x", "w"]).unwrap();
        b.op("a", OpKind::Relu, &["fc"]).unwrap();
        b.op("c", OpKind::Silu, &["fc"]).unwrap();
        b.op("s", OpKind::Add, &["a", "c"]).unwrap();
        b.output("s");
        let g = b.build().unwrap();
        let (f, _) = fuse(&g);
        f.validate().unwrap();
        // fc feeds two consumers, so it keeps its output; the relu/silu/add
        // chain collapses into one elementwise node.
        assert!(f.tensor("fc").is_some());
        assert_eq!(f.nodes.len(), 2);
        assert!(matches!(f.nodes[1].kind, OpKind::Elementwise { .. }));
    }

    #[test]
    fn defuse_restores_a_valid_graph() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 1, 3, 8], DataType::F32);
        b.input("y", &[1, 1, 3, 8], DataType::F32);
        b.weight("w", &[4, 1, 1, 8], TensorInit::Uniform { seed: 3, scale: 0.3 });
        b.op("g", OpKind::Gelu, &["x"]).unwrap();
        b.op("m", OpKind::Mul, &["g", "y"]).unwrap();
        b.op("fc", fc(), &["m", "w"]).unwrap();
        b.op("s", OpKind::Scale { factor: 2.0 }, &["fc"]).unwrap();
        b.output("s");
        let g = b.build().unwrap();
        let (f, report) = fuse(&g);
        assert_eq!(f.nodes.len(), 1);
        assert!(report.has_pattern("fc-two-branch-prologue"));
        let d = defuse(&f);
        d.validate().unwrap();
        assert_eq!(d.nodes.len(), 4);
    }

    #[test]
    fn expr_display_and_ops() {
        let e = FusedExpr::binary(
            BinaryOp::Mul,
            FusedExpr::unary(UnaryOp::Gelu, FusedExpr::input("a")),
            FusedExpr::input("b"),
        );
        assert_eq!(e.to_string(), "mul(gelu(a), b)");
        assert_eq!(e.ops(), vec!["gelu", "mul"]);
        assert_eq!(e.leaves(), vec!["a", "b"]);
    }
}

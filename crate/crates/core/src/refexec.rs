//! Scalar reference executor.
//!
//! Runs a graph node by node in topological order with plain loops. Every
//! summation uses a fixed order so that two graphs computing the same
//! arithmetic produce bit-identical results. In f16 mode each arithmetic
//! result is rounded to the nearest f16 value.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{defuse, FusedExpr, GraphError, GraphIR, MatmulQuant, Node, OpKind, Stage};
use crate::layout::{pack, unpack, LayoutDescriptor, LayoutError, StorageType};
use crate::llm::{kv_cache_descriptors, qkv_inverse, qkv_transform, quantize_rows, rope_table, AttentionConfig, KvCache, LlmError};
use crate::tensor::{round_f16, DataType, LogicalShape, LogicalTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("missing graph input `{0}`")]
    MissingInput(String),
    #[error("input `{tensor}` has shape {got}, graph declares {expected}")]
    ShapeMismatch {
        tensor: String,
        expected: LogicalShape,
        got: LogicalShape,
    },
    #[error("node `{node}`: {message}")]
    Node { node: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    /// Values rounded to f16 after every arithmetic operation.
    F16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    AsCompiled,
    /// Expand fused nodes back into one node per operator before running.
    ForceUnfused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionImpl {
    /// Softmax attention evaluated on the per-head layout.
    #[default]
    Direct,
    /// Keys and values written into caches stored as convolution weights.
    KvConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionMode {
    pub precision: Precision,
    pub fusion: FusionMode,
    /// Stage the graph was compiled for; recorded only, the arithmetic is
    /// fully determined by the graph's nodes.
    pub stage: Stage,
    pub attention: AttentionImpl,
    /// Round-trip every intermediate through this storage layout.
    pub storage: Option<StorageType>,
}

pub type TensorMap = BTreeMap<String, LogicalTensor>;

#[derive(Clone, Copy)]
struct Arith {
    f16: bool,
}

impl Arith {
    fn r(self, x: f32) -> f32 {
        if self.f16 {
            round_f16(x)
        } else {
            x
        }
    }
    fn add(self, a: f32, b: f32) -> f32 {
        self.r(a + b)
    }
    fn mul(self, a: f32, b: f32) -> f32 {
        self.r(a * b)
    }
    fn eval(self, expr: &FusedExpr, leaf: &dyn Fn(&str) -> f32, acc: f32) -> f32 {
        match expr {
            FusedExpr::Input(id) => leaf(id),
            FusedExpr::Acc => acc,
            FusedExpr::Unary { op, arg } => self.r(op.apply(self.eval(arg, leaf, acc))),
            FusedExpr::Binary { op, lhs, rhs } => self.r(op.apply(self.eval(lhs, leaf, acc), self.eval(rhs, leaf, acc))),
        }
    }
}

/// Largest absolute difference divided by the largest magnitude in `reference`.
pub fn max_relative_diff(actual: &[f32], reference: &[f32]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "compared tensors differ in length");
    let diff = actual
        .iter()
        .zip(reference)
        .map(|(a, b)| (*a as f64 - *b as f64).abs())
        .fold(0.0, f64::max);
    let scale = reference.iter().map(|b| (*b as f64).abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// [`max_relative_diff`] over every tensor present in both maps.
pub fn max_relative_diff_maps(actual: &TensorMap, reference: &TensorMap) -> f64 {
    reference
        .iter()
        .filter_map(|(k, r)| actual.get(k).map(|a| max_relative_diff(a.values(), r.values())))
        .fold(0.0, f64::max)
}

struct Env<'g> {
    graph: &'g GraphIR,
    values: HashMap<String, Vec<f32>>,
    ar: Arith,
}

impl Env<'_> {
    fn get(&self, id: &str) -> &[f32] {
        match self.values.get(id) {
            Some(v) => v,
            None => self.graph.tensor(id).and_then(|t| t.data.as_deref()).expect("validated graph has every value"),
        }
    }

    fn shape(&self, id: &str) -> LogicalShape {
        self.graph.tensor(id).expect("declared tensor").shape
    }

    /// Evaluates an elementwise expression over the shape of its leaves.
    fn eval_expr(&self, expr: &FusedExpr, acc: Option<&[f32]>, len: usize) -> Vec<f32> {
        if let (Some(id), None) = (expr.as_input(), acc) {
            return self.get(id).to_vec();
        }
        let leaves: Vec<(&str, &[f32])> = expr.leaves().into_iter().map(|l| (l, self.get(l))).collect();
        (0..len)
            .map(|i| {
                let leaf = |id: &str| leaves.iter().find(|(l, _)| *l == id).map(|(_, v)| v[i]).unwrap();
                self.ar.eval(expr, &leaf, acc.map_or(0.0, |a| a[i]))
            })
            .collect()
    }
}

pub fn execute(graph: &GraphIR, inputs: &TensorMap, mode: ExecutionMode) -> Result<TensorMap, ExecError> {
    let expanded;
    let graph = match mode.fusion {
        FusionMode::AsCompiled => graph,
        FusionMode::ForceUnfused => {
            expanded = defuse(graph);
            &expanded
        }
    };
    graph.validate()?;
    let ar = Arith {
        f16: mode.precision == Precision::F16,
    };
    let mut env = Env {
        graph,
        values: HashMap::new(),
        ar,
    };
    for id in &graph.inputs {
        let t = inputs.get(id).ok_or_else(|| ExecError::MissingInput(id.clone()))?;
        let expected = env.shape(id);
        if t.shape() != expected {
            return Err(ExecError::ShapeMismatch {
                tensor: id.clone(),
                expected,
                got: t.shape(),
            });
        }
        env.values.insert(id.clone(), t.values().iter().map(|&v| ar.r(v)).collect());
    }
    if ar.f16 {
        for t in &graph.tensors {
            if let (Some(d), DataType::F32 | DataType::F16) = (&t.data, t.dtype) {
                env.values.insert(t.id.clone(), d.iter().map(|&v| round_f16(v)).collect());
            }
        }
    }
    for ni in graph.topo_order()? {
        let node = &graph.nodes[ni];
        let outs = run_node(&env, node, mode)?;
        for (id, mut v) in node.outputs.iter().zip(outs) {
            if let Some(st) = mode.storage {
                let t = LogicalTensor::from_f32(env.shape(id), v)?;
                v = unpack(&pack(&t, &LayoutDescriptor::canonical(st)), &t.shape())?.into_values();
            }
            env.values.insert(id.clone(), v);
        }
    }
    let mut out = TensorMap::new();
    for id in &graph.outputs {
        out.insert(id.clone(), LogicalTensor::from_f32(env.shape(id), env.get(id).to_vec())?);
    }
    Ok(out)
}

fn node_err(node: &Node, message: impl Into<String>) -> ExecError {
    ExecError::Node {
        node: node.id.clone(),
        message: message.into(),
    }
}

fn run_node(env: &Env, node: &Node, mode: ExecutionMode) -> Result<Vec<Vec<f32>>, ExecError> {
    let ar = env.ar;
    if let Some(expr) = node.elementwise_expr() {
        let len = env.shape(&node.outputs[0]).element_count();
        return Ok(vec![env.eval_expr(&expr, None, len)]);
    }
    let roots = node.root_inputs();
    let slots: Vec<(Vec<f32>, LogicalShape)> = roots
        .iter()
        .map(|e| {
            let first = e.leaves()[0];
            let shape = env.shape(first);
            (env.eval_expr(e, None, shape.element_count()), shape)
        })
        .collect();
    let mut out = run_root(env, node, &slots, mode)?;
    if let Some(spec) = &node.fused {
        if spec.dequantize_output {
            out[0] = dequantize(ar, &out[0], &slots[1].0, &slots[3].0);
        }
        if let Some(epi) = &spec.epilogue {
            let len = out[0].len();
            out[0] = env.eval_expr(epi, Some(&out[0]), len);
        }
    }
    Ok(out)
}

fn dequantize(ar: Arith, acc: &[f32], xs: &[f32], ws: &[f32]) -> Vec<f32> {
    let o = ws.len();
    acc.iter()
        .enumerate()
        .map(|(i, &a)| ar.mul(ar.mul(a, xs[i / o]), ws[i % o]))
        .collect()
}

fn run_root(env: &Env, node: &Node, slots: &[(Vec<f32>, LogicalShape)], mode: ExecutionMode) -> Result<Vec<Vec<f32>>, ExecError> {
    let ar = env.ar;
    match &node.kind {
        OpKind::Conv2d { pad, stride, bias } => {
            let (x, xs) = (&slots[0].0, slots[0].1);
            let (w, ws) = (&slots[1].0, slots[1].1);
            let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
            let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
            let oshape = LogicalShape::bhwc(xs.b, oh, ow, ws.b);
            let mut out = vec![0.0f32; oshape.element_count()];
            for b in 0..xs.b {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..ws.b {
                            let mut acc = 0.0f32;
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    let ix = (ox * stride + kx) as isize - *pad as isize;
                                    if iy < 0 || ix < 0 || iy as usize >= xs.h || ix as usize >= xs.w {
                                        continue;
                                    }
                                    let xb = xs.offset([b, iy as usize, ix as usize, 0, 0]);
                                    let wb = ws.offset([o, ky, kx, 0, 0]);
                                    for c in 0..xs.c {
                                        acc = ar.add(acc, ar.mul(x[xb + c], w[wb + c]));
                                    }
                                }
                            }
                            if *bias {
                                acc = ar.add(acc, slots[2].0[o]);
                            }
                            out[oshape.offset([b, oy, ox, 0, o])] = acc;
                        }
                    }
                }
            }
            Ok(vec![out])
        }
        OpKind::FullyConnected { bias, quant } => {
            let (x, xshape) = (&slots[0].0, slots[0].1);
            let c = xshape.c;
            let rows = xshape.element_count() / c;
            let widx = if *quant == MatmulQuant::PreQuantized { 2 } else { 1 };
            let (w, o) = (&slots[widx].0, slots[widx].1.b);
            let bias_v = bias.then(|| &slots[slots.len() - 1].0);
            let mut out = vec![0.0f32; rows * o];
            match quant {
                MatmulQuant::None => {
                    for r in 0..rows {
                        for oc in 0..o {
                            let mut acc = 0.0f32;
                            for i in 0..c {
                                acc = ar.add(acc, ar.mul(x[r * c + i], w[oc * c + i]));
                            }
                            if let Some(bv) = bias_v {
                                acc = ar.add(acc, bv[oc]);
                            }
                            out[r * o + oc] = acc;
                        }
                    }
                }
                MatmulQuant::FusedActivation | MatmulQuant::PreQuantized => {
                    let (xq, xs): (Vec<f32>, Vec<f32>) = if *quant == MatmulQuant::FusedActivation {
                        let (q, s) = quantize_rows(x, c);
                        (q.into_iter().map(f32::from).collect(), s)
                    } else {
                        (x.clone(), slots[1].0.clone())
                    };
                    let ws = &slots[widx + 1].0;
                    for r in 0..rows {
                        for oc in 0..o {
                            let mut acc: i64 = 0;
                            for i in 0..c {
                                acc += xq[r * c + i] as i64 * w[oc * c + i] as i64;
                            }
                            let acc = i32::try_from(acc).map_err(|_| node_err(node, "int32 accumulator overflow"))? as f32;
                            out[r * o + oc] = if *quant == MatmulQuant::PreQuantized {
                                acc
                            } else {
                                let mut v = ar.mul(ar.mul(acc, xs[r]), ws[oc]);
                                if let Some(bv) = bias_v {
                                    v = ar.add(v, bv[oc]);
                                }
                                v
                            };
                        }
                    }
                }
            }
            Ok(vec![out])
        }
        OpKind::RmsNorm { eps } => {
            let (x, shape) = (&slots[0].0, slots[0].1);
            let gamma = &slots[1].0;
            let c = shape.c;
            let mut out = vec![0.0f32; x.len()];
            for (r, row) in x.chunks(c).enumerate() {
                let mut ss = 0.0f32;
                for &v in row {
                    ss = ar.add(ss, ar.mul(v, v));
                }
                let mean = ar.r(ss / c as f32);
                let inv = ar.r(1.0 / ar.add(mean, *eps).sqrt());
                for (i, &v) in row.iter().enumerate() {
                    out[r * c + i] = ar.mul(ar.mul(v, inv), gamma[i]);
                }
            }
            Ok(vec![out])
        }
        OpKind::RopeQkv {
            heads,
            kv_heads,
            head_dim,
            base,
            rope,
            pos_offset,
        } => {
            let shape = slots[0].1;
            let cfg = AttentionConfig::new(shape.b, shape.w, *heads, *kv_heads, *head_dim)?;
            let x = LogicalTensor::from_f32(shape, slots[0].0.clone())?;
            let table = if *rope {
                Some(rope_table(pos_offset + shape.w, *head_dim, *base)?)
            } else {
                None
            };
            let y = qkv_transform(&x, &cfg, *heads, table.as_ref(), *pos_offset)?;
            Ok(vec![y.into_values().into_iter().map(|v| ar.r(v)).collect()])
        }
        OpKind::MergeHeads {
            heads,
            kv_heads,
            head_dim,
        } => {
            let shape = slots[0].1;
            let g = heads / kv_heads;
            let cfg = AttentionConfig::new(shape.h / kv_heads, shape.w / g, *heads, *kv_heads, *head_dim)?;
            let y = LogicalTensor::from_f32(shape, slots[0].0.clone())?;
            Ok(vec![qkv_inverse(&y, &cfg, *heads)?.into_values()])
        }
        OpKind::Attention {
            heads,
            kv_heads,
            head_dim,
        } => {
            let (qs, ks) = (slots[0].1, slots[1].1);
            let g = heads / kv_heads;
            let q = LogicalTensor::from_f32(qs, slots[0].0.clone())?;
            let k = LogicalTensor::from_f32(ks, slots[1].0.clone())?;
            let v = LogicalTensor::from_f32(ks, slots[2].0.clone())?;
            let batch = qs.h / kv_heads;
            let cfg = AttentionConfig::new(batch, qs.w / g, *heads, *kv_heads, *head_dim)?;
            let out = match mode.attention {
                AttentionImpl::Direct => {
                    let kcfg = AttentionConfig { seq: ks.w, ..cfg };
                    let qp = qkv_inverse(&q, &cfg, *heads)?;
                    let kp = qkv_inverse(&k, &kcfg, *kv_heads)?;
                    let vp = qkv_inverse(&v, &kcfg, *kv_heads)?;
                    let o = attention_direct_with(ar, &qp, &kp, &vp, &cfg)?;
                    qkv_transform(&o, &cfg, *heads, None, 0)?
                }
                AttentionImpl::KvConv => {
                    let kcfg = AttentionConfig { seq: ks.w, ..cfg };
                    let desc = kv_cache_descriptors(&kcfg, ks.w)?;
                    let mut cache = KvCache::new(desc, batch * kv_heads)?;
                    cache.append(&k, &v)?;
                    conv_attention_with(ar, &q, &cache, &cfg)?
                }
            };
            Ok(vec![out.into_values()])
        }
        OpKind::Quantize => {
            let (x, shape) = (&slots[0].0, slots[0].1);
            let (q, s) = quantize_rows(x, shape.c);
            Ok(vec![q.into_iter().map(f32::from).collect(), s])
        }
        OpKind::Dequantize => Ok(vec![dequantize(ar, &slots[0].0, &slots[1].0, &slots[2].0)]),
        OpKind::Reshape { .. } => Ok(vec![slots[0].0.clone()]),
        k => Err(node_err(node, format!("no reference kernel for `{}`", k.name()))),
    }
}

/// Softmax over `logits` with max subtraction, then `Σ p_t · value(t, j)`.
fn softmax_weighted(ar: Arith, logits: &[f32], dh: usize, value: impl Fn(usize, usize) -> f32) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&l| ar.r((ar.r(l - m)).exp())).collect();
    let mut sum = 0.0f32;
    for &x in &e {
        sum = ar.add(sum, x);
    }
    let p: Vec<f32> = e.iter().map(|&x| ar.r(x / sum)).collect();
    (0..dh)
        .map(|j| {
            let mut acc = 0.0f32;
            for (t, &pt) in p.iter().enumerate() {
                acc = ar.add(acc, ar.mul(pt, value(t, j)));
            }
            acc
        })
        .collect()
}

/// Grouped-query attention on packed layouts.
///
/// `q` is `(B,1,S,h_q·d_h)`, `k` and `v` are `(B,1,S_k,h_kv·d_h)`; query head
/// `h` attends with kv head `h / (h_q/h_kv)`. No causal mask is applied.
pub fn attention_direct(q: &LogicalTensor, k: &LogicalTensor, v: &LogicalTensor, cfg: &AttentionConfig) -> Result<LogicalTensor, ExecError> {
    attention_direct_with(Arith { f16: false }, q, k, v, cfg)
}

fn attention_direct_with(
    ar: Arith,
    q: &LogicalTensor,
    k: &LogicalTensor,
    v: &LogicalTensor,
    cfg: &AttentionConfig,
) -> Result<LogicalTensor, ExecError> {
    cfg.check()?;
    let qs = cfg.packed_shape(cfg.heads);
    let ks = k.shape();
    if q.shape() != qs || ks != v.shape() || ks.b != cfg.batch || ks.h != 1 || ks.c != cfg.kv_heads * cfg.head_dim {
        return Err(ExecError::Llm(LlmError::Config(format!(
            "attention shapes q={} k={} v={} do not match the config",
            q.shape(),
            ks,
            v.shape()
        ))));
    }
    let (dh, g, sk) = (cfg.head_dim, cfg.group(), ks.w);
    let inv = ar.r(1.0 / (dh as f32).sqrt());
    let (qv, kv, vv) = (q.values(), k.values(), v.values());
    let mut out = vec![0.0f32; qs.element_count()];
    for b in 0..cfg.batch {
        for h in 0..cfg.heads {
            let kh = h / g;
            for s in 0..cfg.seq {
                let qb = qs.offset([b, 0, s, 0, h * dh]);
                let logits: Vec<f32> = (0..sk)
                    .map(|t| {
                        let kb = ks.offset([b, 0, t, 0, kh * dh]);
                        let mut dot = 0.0f32;
                        for j in 0..dh {
                            dot = ar.add(dot, ar.mul(qv[qb + j], kv[kb + j]));
                        }
                        ar.mul(dot, inv)
                    })
                    .collect();
                let row = softmax_weighted(ar, &logits, dh, |t, j| vv[ks.offset([b, 0, t, 0, kh * dh + j])]);
                out[qb..qb + dh].copy_from_slice(&row);
            }
        }
    }
    Ok(LogicalTensor::from_f32(qs, out)?)
}

/// Attention with keys and values read from caches stored as convolution
/// weights.
///
/// `q` is in the transformed `(B·h_kv, S·g, d_h)` layout. Logits are a 1×1
/// convolution of each query row with the K cache (output channel = cached
/// token); weighted values are a 1×1 convolution of the probabilities with
/// the V cache (output channel = head lane). Cache rows at or beyond the
/// filled count are excluded.
pub fn conv_attention(q: &LogicalTensor, cache: &KvCache, cfg: &AttentionConfig) -> Result<LogicalTensor, ExecError> {
    conv_attention_with(Arith { f16: false }, q, cache, cfg)
}

fn conv_attention_with(ar: Arith, q: &LogicalTensor, cache: &KvCache, cfg: &AttentionConfig) -> Result<LogicalTensor, ExecError> {
    cfg.check()?;
    let qs = cfg.transformed_shape(cfg.heads);
    if q.shape() != qs {
        return Err(ExecError::Llm(LlmError::Config(format!("expected transformed query {qs}, got {}", q.shape()))));
    }
    let filled = cache.filled();
    if filled < cfg.seq {
        return Err(ExecError::Llm(LlmError::Capacity {
            cache_size: filled,
            needed: cfg.seq,
        }));
    }
    if cache.groups() != cfg.batch * cfg.kv_heads || cache.descriptor.head_dim != cfg.head_dim {
        return Err(ExecError::Llm(LlmError::Config("cache geometry does not match the config".into())));
    }
    let dh = cfg.head_dim;
    let inv = ar.r(1.0 / (dh as f32).sqrt());
    let qv = q.values();
    let mut out = vec![0.0f32; qs.element_count()];
    for n in 0..cache.groups() {
        let (kset, vset) = (&cache.k[n], &cache.v[n]);
        for r in 0..qs.w {
            let qb = qs.offset([0, n, r, 0, 0]);
            let mut logits = Vec::with_capacity(filled);
            for o in 0..filled {
                let mut dot = 0.0f32;
                for i in 0..dh {
                    let w = kset.read([o, 0, 0, 0, i]).expect("cache coordinate in range");
                    dot = ar.add(dot, ar.mul(qv[qb + i], w));
                }
                logits.push(ar.mul(dot, inv));
            }
            let row = softmax_weighted(ar, &logits, dh, |t, j| vset.read([j, 0, 0, 0, t]).expect("cache coordinate in range"));
            out[qb..qb + dh].copy_from_slice(&row);
        }
    }
    Ok(LogicalTensor::from_f32(qs, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, TensorInit};
    use crate::llm::qkv_transform;

    fn map(pairs: &[(&str, LogicalTensor)]) -> TensorMap {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn identity_graph_passes_through() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 2, 2, 3], DataType::F32);
        b.op("y", OpKind::Reshape { dims: vec![1, 2, 2, 3] }, &["x"]).unwrap();
        b.output("y");
        let g = b.build().unwrap();
        let x = LogicalTensor::from_fn(LogicalShape::bhwc(1, 2, 2, 3), |c| c[2] as f32 - c[4] as f32 * 0.5);
        let out = execute(&g, &map(&[("x", x.clone())]), ExecutionMode::default()).unwrap();
        assert_eq!(out["y"].values(), x.values());
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 3, 3, 4], DataType::F32);
        let eye: Vec<f32> = (0..16).map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 }).collect();
        b.weight_values("w", &[4, 1, 1, 4], eye);
        b.op("y", OpKind::Conv2d { pad: 0, stride: 1, bias: false }, &["x", "w"]).unwrap();
        b.output("y");
        let g = b.build().unwrap();
        let x = LogicalTensor::from_fn(LogicalShape::bhwc(1, 3, 3, 4), |c| (c[1] * 7 + c[2] * 3 + c[4]) as f32 * 0.1);
        let out = execute(&g, &map(&[("x", x.clone())]), ExecutionMode::default()).unwrap();
        assert_eq!(out["y"].values(), x.values());
    }

    #[test]
    fn missing_input_is_reported() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 1, 1, 4], DataType::F32);
        b.op("y", OpKind::Relu, &["x"]).unwrap();
        b.output("y");
        let g = b.build().unwrap();
        assert_eq!(execute(&g, &TensorMap::new(), ExecutionMode::default()), Err(ExecError::MissingInput("x".into())));
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let cfg = AttentionConfig::new(1, 1, 2, 1, 4).unwrap();
        let q = LogicalTensor::from_fn(cfg.packed_shape(2), |c| c[4] as f32 * 0.3);
        let k = LogicalTensor::from_fn(cfg.packed_shape(1), |c| 1.0 - c[4] as f32);
        let v = LogicalTensor::from_fn(cfg.packed_shape(1), |c| c[4] as f32 + 0.5);
        let out = attention_direct(&q, &k, &v, &cfg).unwrap();
        assert_eq!(out.values(), &[0.5, 1.5, 2.5, 3.5, 0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn uniform_keys_average_values() {
        let cfg = AttentionConfig::new(1, 4, 1, 1, 2).unwrap();
        let q = LogicalTensor::from_fn(cfg.packed_shape(1), |c| c[2] as f32 + c[4] as f32);
        let k = LogicalTensor::from_fn(cfg.packed_shape(1), |_| 0.25);
        let v = LogicalTensor::from_fn(cfg.packed_shape(1), |c| c[2] as f32 * 2.0 + c[4] as f32);
        let out = attention_direct(&q, &k, &v, &cfg).unwrap();
        for s in 0..4 {
            assert!((out.values()[s * 2] - 3.0).abs() < 1e-6);
            assert!((out.values()[s * 2 + 1] - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unused_cache_rows_are_masked() {
        let cfg = AttentionConfig::new(1, 3, 2, 1, 4).unwrap();
        let q = LogicalTensor::from_fn(cfg.packed_shape(2), |c| (c[2] + c[4]) as f32 * 0.2 - 0.3);
        let k = LogicalTensor::from_fn(cfg.packed_shape(1), |c| (c[2] * 3 + c[4]) as f32 * 0.1);
        let v = LogicalTensor::from_fn(cfg.packed_shape(1), |c| c[2] as f32 - c[4] as f32);
        let direct = attention_direct(&q, &k, &v, &cfg).unwrap();
        let qt = qkv_transform(&q, &cfg, 2, None, 0).unwrap();
        let kt = qkv_transform(&k, &cfg, 1, None, 0).unwrap();
        let vt = qkv_transform(&v, &cfg, 1, None, 0).unwrap();
        let mut cache = KvCache::new(kv_cache_descriptors(&cfg, 16).unwrap(), 1).unwrap();
        cache.append(&kt, &vt).unwrap();
        // Garbage beyond the filled rows must not leak into the result.
        cache.k[0].write([10, 0, 0, 0, 0], 1e6).unwrap();
        let conv = conv_attention(&qt, &cache, &cfg).unwrap();
        let back = qkv_inverse(&conv, &cfg, 2).unwrap();
        assert!(max_relative_diff(back.values(), direct.values()) <= 1e-6);
    }

    #[test]
    fn relative_diff() {
        assert_eq!(max_relative_diff(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((max_relative_diff(&[1.0, 2.5], &[1.0, 2.0]) - 0.25).abs() < 1e-12);
        assert_eq!(max_relative_diff(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn f16_mode_rounds() {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 1, 1, 4], DataType::F32);
        b.weight("w", &[4, 1, 1, 4], TensorInit::Uniform { seed: 5, scale: 1.0 });
        b.op("y", OpKind::FullyConnected { bias: false, quant: MatmulQuant::None }, &["x", "w"]).unwrap();
        b.output("y");
        let g = b.build().unwrap();
        let x = LogicalTensor::from_f32(LogicalShape::bhwc(1, 1, 1, 4), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mode = ExecutionMode {
            precision: Precision::F16,
            ..Default::default()
        };
        let out = execute(&g, &map(&[("x", x)]), mode).unwrap();
        for &v in out["y"].values() {
            assert_eq!(v, round_f16(v));
        }
    }
}

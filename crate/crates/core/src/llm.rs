//! LLM-specific transforms: rotary embedding fused with the head layout
//! transform, KV caches stored as convolution weights, and per-channel
//! weight quantization.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, GraphIR, MatmulQuant, Node, OpKind, QuantPlacement, Stage, TensorInfo, TensorRole, WeightRole};
use crate::tensor::{DataType, LogicalShape, LogicalTensor, TensorError};
use crate::virtualization::{plan_weight_layout, rearrange_weights, PhysicalObjectSet, VirtError, WeightLayout, WeightShape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error("cache holds {cache_size} tokens, {needed} required")]
    Capacity { cache_size: usize, needed: usize },
    #[error("non-finite weight at flat index {index}")]
    NonFinite { index: usize },
    #[error("weight of node `{node}` has no role tag; the mixed scheme needs one")]
    UntaggedWeight { node: String },
    #[error("quantized blob: {0}")]
    Blob(String),
    #[error("node `{node}`: {message}")]
    Unsupported { node: String, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Virt(#[from] VirtError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(batch: usize, seq: usize, heads: usize, kv_heads: usize, head_dim: usize) -> Result<Self, LlmError> {
        let cfg = AttentionConfig {
            batch,
            seq,
            heads,
            kv_heads,
            head_dim,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), LlmError> {
        if [self.batch, self.seq, self.heads, self.kv_heads, self.head_dim].contains(&0) {
            return Err(LlmError::Config("all extents must be positive".into()));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(LlmError::Config(format!(
                "kv heads {} do not divide query heads {}",
                self.kv_heads, self.heads
            )));
        }
        Ok(())
    }

    /// Query heads served by each kv head.
    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }

    /// `(B, 1, S, heads * d_h)` for `heads` heads.
    pub fn packed_shape(&self, heads: usize) -> LogicalShape {
        LogicalShape::bhwc(self.batch, 1, self.seq, heads * self.head_dim)
    }

    /// `(B * h_kv, S * heads / h_kv, d_h)` as a rank-3 shape.
    pub fn transformed_shape(&self, heads: usize) -> LogicalShape {
        LogicalShape::bhwc(1, self.batch * self.kv_heads, self.seq * heads / self.kv_heads, self.head_dim)
    }
}

/// Rotary angles for positions `0..len`, half-split pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    len: usize,
    head_dim: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn identity(len: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        RopeTable {
            len,
            head_dim,
            cos: vec![1.0; len * half],
            sin: vec![0.0; len * half],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// `(cos θ, sin θ)` for position `pos` and frequency index `j`.
    pub fn get(&self, pos: usize, j: usize) -> (f32, f32) {
        let k = pos * (self.head_dim / 2) + j;
        (self.cos[k], self.sin[k])
    }

    /// Rotates `v[j]` with `v[j + d/2]` in place.
    pub fn apply(&self, pos: usize, v: &mut [f32]) {
        let half = self.head_dim / 2;
        for j in 0..half {
            let (c, s) = self.get(pos, j);
            let (a, b) = (v[j], v[j + half]);
            v[j] = a * c - b * s;
            v[j + half] = a * s + b * c;
        }
    }

    pub fn apply_inverse(&self, pos: usize, v: &mut [f32]) {
        let half = self.head_dim / 2;
        for j in 0..half {
            let (c, s) = self.get(pos, j);
            let (a, b) = (v[j], v[j + half]);
            v[j] = a * c + b * s;
            v[j + half] = b * c - a * s;
        }
    }
}

/// θ = pos · base^(−2j/d_h) for `pos < len`, `j < d_h/2`.
pub fn rope_table(len: usize, head_dim: usize, base: f32) -> Result<RopeTable, LlmError> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(LlmError::Config(format!("head dimension {head_dim} must be even")));
    }
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(len * half);
    let mut sin = Vec::with_capacity(len * half);
    for pos in 0..len {
        for j in 0..half {
            let theta = pos as f64 * (base as f64).powf(-2.0 * j as f64 / head_dim as f64);
            cos.push(theta.cos() as f32);
            sin.push(theta.sin() as f32);
        }
    }
    Ok(RopeTable {
        len,
        head_dim,
        cos,
        sin,
    })
}

/// `(B,1,S,h·d_h) → (B·h_kv, S·h/h_kv, d_h)` with optional rotary embedding.
///
/// Head `h` belongs to kv group `h / g` and lands on row `s·g + h % g` of
/// that group, so the rows of one query position stay adjacent. Position of
/// sequence index `s` is `pos_offset + s`.
pub fn qkv_transform(
    x: &LogicalTensor,
    cfg: &AttentionConfig,
    heads: usize,
    rope: Option<&RopeTable>,
    pos_offset: usize,
) -> Result<LogicalTensor, LlmError> {
    cfg.check()?;
    if !heads.is_multiple_of(cfg.kv_heads) {
        return Err(LlmError::Config(format!("kv heads {} do not divide {heads}", cfg.kv_heads)));
    }
    let expected = cfg.packed_shape(heads);
    if x.shape() != expected {
        return Err(LlmError::Config(format!("expected input {expected}, got {}", x.shape())));
    }
    if let Some(t) = rope {
        if t.head_dim() != cfg.head_dim || t.len() < pos_offset + cfg.seq {
            return Err(LlmError::Config("rotary table does not cover the sequence".into()));
        }
    }
    let g = heads / cfg.kv_heads;
    let dh = cfg.head_dim;
    let out_shape = cfg.transformed_shape(heads);
    let mut out = vec![0.0f32; out_shape.element_count()];
    let src = x.values();
    let mut row = vec![0.0f32; dh];
    for b in 0..cfg.batch {
        for s in 0..cfg.seq {
            for h in 0..heads {
                let base = expected.offset([b, 0, s, 0, h * dh]);
                row.copy_from_slice(&src[base..base + dh]);
                if let Some(t) = rope {
                    t.apply(pos_offset + s, &mut row);
                }
                let n = b * cfg.kv_heads + h / g;
                let r = s * g + h % g;
                let dst = out_shape.offset([0, n, r, 0, 0]);
                out[dst..dst + dh].copy_from_slice(&row);
            }
        }
    }
    Ok(LogicalTensor::new(out_shape, x.dtype(), out)?)
}

/// Inverse of [`qkv_transform`] without rotary embedding.
pub fn qkv_inverse(y: &LogicalTensor, cfg: &AttentionConfig, heads: usize) -> Result<LogicalTensor, LlmError> {
    cfg.check()?;
    let in_shape = cfg.transformed_shape(heads);
    if y.shape() != in_shape {
        return Err(LlmError::Config(format!("expected input {in_shape}, got {}", y.shape())));
    }
    let g = heads / cfg.kv_heads;
    let dh = cfg.head_dim;
    let out_shape = cfg.packed_shape(heads);
    let mut out = vec![0.0f32; out_shape.element_count()];
    let src = y.values();
    for b in 0..cfg.batch {
        for s in 0..cfg.seq {
            for h in 0..heads {
                let from = in_shape.offset([0, b * cfg.kv_heads + h / g, s * g + h % g, 0, 0]);
                let to = out_shape.offset([b, 0, s, 0, h * dh]);
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    Ok(LogicalTensor::new(out_shape, y.dtype(), out)?)
}

/// K and V caches expressed as convolution weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KVCacheDescriptor {
    pub cache_size: usize,
    pub head_dim: usize,
    /// `O = cache_size`, `I = d_h`.
    pub k: WeightShape,
    /// `O = d_h`, `I = cache_size`.
    pub v: WeightShape,
}

pub fn kv_cache_descriptors(cfg: &AttentionConfig, cache_size: usize) -> Result<KVCacheDescriptor, LlmError> {
    cfg.check()?;
    if cache_size < cfg.seq {
        return Err(LlmError::Capacity {
            cache_size,
            needed: cfg.seq,
        });
    }
    Ok(KVCacheDescriptor {
        cache_size,
        head_dim: cfg.head_dim,
        k: WeightShape::new(cache_size, 1, 1, 1, cfg.head_dim),
        v: WeightShape::new(cfg.head_dim, 1, 1, 1, cache_size),
    })
}

/// Physical KV cache: one K and one V weight set per `(batch, kv head)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub descriptor: KVCacheDescriptor,
    pub k: Vec<PhysicalObjectSet>,
    pub v: Vec<PhysicalObjectSet>,
    filled: usize,
}

impl KvCache {
    pub fn new(descriptor: KVCacheDescriptor, groups: usize) -> Result<Self, LlmError> {
        let layout = |s: WeightShape| plan_weight_layout(s, 1, &WeightLayout::DEFAULT_PERMUTATION);
        let (kl, vl) = (layout(descriptor.k)?, layout(descriptor.v)?);
        let mut k = Vec::with_capacity(groups);
        let mut v = Vec::with_capacity(groups);
        for _ in 0..groups {
            k.push(rearrange_weights(&LogicalTensor::zeros(descriptor.k.logical()), &kl)?);
            v.push(rearrange_weights(&LogicalTensor::zeros(descriptor.v.logical()), &vl)?);
        }
        Ok(KvCache {
            descriptor,
            k,
            v,
            filled: 0,
        })
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn groups(&self) -> usize {
        self.k.len()
    }

    /// Appends transformed keys and values, each `(groups, tokens, d_h)`.
    pub fn append(&mut self, keys: &LogicalTensor, values: &LogicalTensor) -> Result<(), LlmError> {
        let ks = keys.shape();
        if ks != values.shape() || ks.h != self.groups() || ks.c != self.descriptor.head_dim || ks.b != 1 || ks.d != 1 {
            return Err(LlmError::Config(format!(
                "keys {ks} / values {} do not match a cache of {} groups × d_h {}",
                values.shape(),
                self.groups(),
                self.descriptor.head_dim
            )));
        }
        let tokens = ks.w;
        if self.filled + tokens > self.descriptor.cache_size {
            return Err(LlmError::Capacity {
                cache_size: self.descriptor.cache_size,
                needed: self.filled + tokens,
            });
        }
        for n in 0..self.groups() {
            for t in 0..tokens {
                let pos = self.filled + t;
                for j in 0..self.descriptor.head_dim {
                    let kv = keys.values()[ks.offset([0, n, t, 0, j])];
                    let vv = values.values()[ks.offset([0, n, t, 0, j])];
                    self.k[n].write([pos, 0, 0, 0, j], kv)?;
                    self.v[n].write([j, 0, 0, 0, pos], vv)?;
                }
            }
        }
        self.filled += tokens;
        Ok(())
    }
}

/// Per-output-channel symmetric integer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: LogicalShape,
    pub bits: u8,
    /// Integer values, flat in the logical element order.
    pub data: Vec<i8>,
    /// One scale per output channel (the leading `O`/`B` axis).
    pub scales: Vec<f32>,
}

fn qmax(bits: u8) -> Result<i32, LlmError> {
    match bits {
        8 => Ok(127),
        4 => Ok(7),
        _ => Err(LlmError::Config(format!("unsupported bit width {bits}"))),
    }
}

/// Symmetric quantization of one group of values: `(ints, scale)`.
pub(crate) fn quantize_group(values: &[f32], qmax: i32) -> (Vec<i8>, f32) {
    let maxabs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if maxabs == 0.0 {
        return (vec![0; values.len()], 1.0);
    }
    let ratio = qmax as f64 / maxabs as f64;
    let q = values
        .iter()
        .map(|&v| (v as f64 * ratio).round_ties_even().clamp(-qmax as f64, qmax as f64) as i8)
        .collect();
    (q, (maxabs as f64 / qmax as f64) as f32)
}

pub fn quantize_per_channel(weights: &LogicalTensor, bits: u8) -> Result<QuantizedTensor, LlmError> {
    let q = qmax(bits)?;
    if let Some(index) = weights.values().iter().position(|v| !v.is_finite()) {
        return Err(LlmError::NonFinite { index });
    }
    let shape = weights.shape();
    let per = shape.element_count() / shape.b;
    let mut data = Vec::with_capacity(shape.element_count());
    let mut scales = Vec::with_capacity(shape.b);
    for chunk in weights.values().chunks(per) {
        let (ints, scale) = quantize_group(chunk, q);
        data.extend(ints);
        scales.push(scale);
    }
    Ok(QuantizedTensor {
        shape,
        bits,
        data,
        scales,
    })
}

const BLOB_MAGIC: &[u8; 4] = b"QWB1";

impl QuantizedTensor {
    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    pub fn dequantize(&self) -> LogicalTensor {
        let per = self.data.len() / self.channels();
        let values = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f32 * self.scales[i / per])
            .collect();
        LogicalTensor::from_f32(self.shape, values).expect("shape matches data")
    }

    pub fn dtype(&self) -> DataType {
        if self.bits == 4 {
            DataType::I4
        } else {
            DataType::I8
        }
    }

    pub fn storage_bits(&self) -> u64 {
        self.data.len() as u64 * self.bits as u64
    }

    /// Blob layout, little endian: magic `QWB1`, bits (u8), axis (u8, 0 = output
    /// channels), two zero bytes, channel count (u32), the five extents
    /// `O,H,W,D,I` (u32 each), scales (f32 per channel), then the values: one
    /// byte each for 8-bit, two per byte for 4-bit with the lower index in the
    /// low nibble.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&[self.bits, 0, 0, 0]);
        out.extend_from_slice(&(self.channels() as u32).to_le_bytes());
        for e in self.shape.extents() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for s in &self.scales {
            out.extend_from_slice(&s.to_le_bytes());
        }
        if self.bits == 8 {
            out.extend(self.data.iter().map(|&q| q as u8));
        } else {
            for pair in self.data.chunks(2) {
                let lo = (pair[0] as u8) & 0x0f;
                let hi = pair.get(1).map_or(0, |&q| (q as u8) & 0x0f);
                out.push(lo | (hi << 4));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LlmError> {
        let err = |m: &str| LlmError::Blob(m.to_string());
        let u32_at = |o: usize| -> Result<u32, LlmError> {
            bytes
                .get(o..o + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| err("truncated header"))
        };
        if bytes.get(0..4) != Some(BLOB_MAGIC.as_slice()) {
            return Err(err("bad magic"));
        }
        let bits = *bytes.get(4).ok_or_else(|| err("truncated header"))?;
        qmax(bits)?;
        let channels = u32_at(8)? as usize;
        let mut ext = [0usize; 5];
        for (k, e) in ext.iter_mut().enumerate() {
            *e = u32_at(12 + 4 * k)? as usize;
        }
        let shape = LogicalShape::new(ext[0], ext[1], ext[2], ext[3], ext[4])?;
        if channels != shape.b {
            return Err(err("channel count disagrees with shape"));
        }
        let mut off = 32;
        let mut scales = Vec::with_capacity(channels);
        for _ in 0..channels {
            let b = bytes.get(off..off + 4).ok_or_else(|| err("truncated scales"))?;
            scales.push(f32::from_le_bytes(b.try_into().unwrap()));
            off += 4;
        }
        let n = shape.element_count();
        let body = &bytes[off..];
        let data: Vec<i8> = if bits == 8 {
            if body.len() != n {
                return Err(err("value section has the wrong length"));
            }
            body.iter().map(|&b| b as i8).collect()
        } else {
            if body.len() != n.div_ceil(2) {
                return Err(err("value section has the wrong length"));
            }
            let nib = |x: u8| ((x << 4) as i8) >> 4;
            (0..n)
                .map(|i| {
                    let b = body[i / 2];
                    nib(if i % 2 == 0 { b & 0x0f } else { b >> 4 })
                })
                .collect()
        };
        Ok(QuantizedTensor {
            shape,
            bits,
            data,
            scales,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantScheme {
    /// 8-bit for every matmul weight.
    Q8,
    /// 8-bit attention projections, 4-bit feed-forward and embedding weights.
    Mixed844,
    None,
}

impl QuantScheme {
    pub fn name(self) -> &'static str {
        match self {
            QuantScheme::Q8 => "q8",
            QuantScheme::Mixed844 => "8-4-4",
            QuantScheme::None => "none",
        }
    }
}

impl FromStr for QuantScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "q8" => Ok(QuantScheme::Q8),
            "8-4-4" => Ok(QuantScheme::Mixed844),
            "none" => Ok(QuantScheme::None),
            _ => Err(format!("unknown quantization scheme `{s}` (expected q8, 8-4-4 or none)")),
        }
    }
}

/// Bit width per matmul weight tensor.
pub fn assign_quant_scheme(graph: &GraphIR, scheme: QuantScheme) -> Result<BTreeMap<String, u8>, LlmError> {
    let mut out = BTreeMap::new();
    for (node, w) in graph.matmul_weights() {
        let bits = match scheme {
            QuantScheme::None => continue,
            QuantScheme::Q8 => 8,
            QuantScheme::Mixed844 => match node.role {
                Some(WeightRole::AttentionProj) | Some(WeightRole::Other) => 8,
                Some(WeightRole::FeedForward) | Some(WeightRole::Embedding) => 4,
                None => return Err(LlmError::UntaggedWeight { node: node.id.clone() }),
            },
        };
        out.insert(w.to_string(), bits);
    }
    Ok(out)
}

pub fn total_quantized_bits(graph: &GraphIR, assignment: &BTreeMap<String, u8>) -> u64 {
    assignment
        .iter()
        .filter_map(|(id, &bits)| graph.tensor(id).map(|t| t.shape.element_count() as u64 * bits as u64))
        .sum()
}

/// Where activation quantization happens for a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationQuantSpec {
    pub stage: Stage,
    pub placement: QuantPlacement,
    /// A standalone quantize node runs before the matmul.
    pub separate_node: bool,
    /// The matmul kernel quantizes its own input.
    pub fused_in_kernel: bool,
}

pub fn activation_quant_spec(stage: Stage) -> ActivationQuantSpec {
    match stage {
        Stage::Prefill => ActivationQuantSpec {
            stage,
            placement: QuantPlacement::SeparateQuantizeKernel,
            separate_node: true,
            fused_in_kernel: false,
        },
        Stage::Decode | Stage::None => ActivationQuantSpec {
            stage,
            placement: QuantPlacement::FusedInKernel,
            separate_node: false,
            fused_in_kernel: true,
        },
    }
}

/// Per-row symmetric int8 quantization of activations with `c` channels.
pub fn quantize_rows(values: &[f32], c: usize) -> (Vec<i8>, Vec<f32>) {
    let mut q = Vec::with_capacity(values.len());
    let mut scales = Vec::with_capacity(values.len() / c);
    for row in values.chunks(c) {
        let (ints, s) = quantize_group(row, 127);
        q.extend(ints);
        scales.push(s);
    }
    (q, scales)
}

fn unique_tensor_id(graph: &GraphIR, base: String) -> String {
    if graph.tensor(&base).is_none() {
        return base;
    }
    (1..).map(|k| format!("{base}_{k}")).find(|c| graph.tensor(c).is_none()).unwrap()
}

/// Quantizes matmul weights and rewrites activation handling for `stage`.
///
/// Fully connected weights become integer tensors with a companion
/// `<weight>_scales` tensor. In prefill a quantize node feeds the matmul,
/// which emits integer accumulators consumed by a dequantize node; in decode
/// (and with no stage) the matmul quantizes its input itself. Convolution
/// weights are replaced by their dequantized values.
pub fn quantize_graph(graph: &GraphIR, scheme: QuantScheme, stage: Stage) -> Result<GraphIR, LlmError> {
    let assignment = assign_quant_scheme(graph, scheme)?;
    let mut g = graph.clone();
    let spec = activation_quant_spec(stage);
    let mut nodes = Vec::with_capacity(g.nodes.len());
    for node in std::mem::take(&mut g.nodes) {
        let OpKind::FullyConnected { bias, quant } = node.kind else {
            if let (OpKind::Conv2d { .. }, Some(&bits)) = (&node.kind, node.inputs.get(1).and_then(|w| assignment.get(w))) {
                let w = node.inputs[1].clone();
                let t = g.tensor(&w).unwrap().to_tensor().expect("weights carry data");
                let dq = quantize_per_channel(&t, bits)?.dequantize();
                let info = g.tensor_mut(&w).unwrap();
                info.data = Some(dq.into_values());
                info.init = None;
            }
            nodes.push(node);
            continue;
        };
        let Some(&bits) = node.inputs.get(1).and_then(|w| assignment.get(w)) else {
            nodes.push(node);
            continue;
        };
        if quant != MatmulQuant::None || node.fused.is_some() {
            return Err(LlmError::Unsupported {
                node: node.id.clone(),
                message: "node is already quantized or fused".into(),
            });
        }
        let w = node.inputs[1].clone();
        let info = g.tensor(&w).unwrap().clone();
        let qt = quantize_per_channel(&info.to_tensor().expect("weights carry data"), bits)?;
        let scales_id = unique_tensor_id(&g, format!("{w}_scales"));
        let mut scales = TensorInfo::new(scales_id.clone(), vec![qt.channels()], DataType::F32, TensorRole::Weight)?;
        scales.data = Some(qt.scales.clone());
        g.add_tensor(scales);
        let wt = g.tensor_mut(&w).unwrap();
        wt.dtype = qt.dtype();
        wt.data = Some(qt.data.iter().map(|&q| q as f32).collect());
        wt.init = None;

        let x = node.inputs[0].clone();
        let bias_in: Vec<String> = if bias { vec![node.inputs[2].clone()] } else { Vec::new() };
        if !spec.separate_node {
            let mut n = node.clone();
            n.kind = OpKind::FullyConnected {
                bias,
                quant: MatmulQuant::FusedActivation,
            };
            n.inputs = [vec![x, w, scales_id], bias_in].concat();
            nodes.push(n);
            continue;
        }
        if bias {
            return Err(LlmError::Unsupported {
                node: node.id.clone(),
                message: "separate activation quantization does not support a bias".into(),
            });
        }
        let xshape = g.tensor(&x).unwrap().shape;
        let out = node.outputs[0].clone();
        let q_id = format!("{}_quantize", node.id);
        let xq = unique_tensor_id(&g, format!("{q_id}_0"));
        let xs = unique_tensor_id(&g, format!("{q_id}_1"));
        let acc = unique_tensor_id(&g, format!("{}_acc", node.id));
        let dims = |s: LogicalShape| crate::graph::shape_dims(&s);
        let oshape = g.tensor(&out).unwrap().shape;
        g.add_tensor(TensorInfo::new(xq.clone(), dims(xshape), DataType::I8, TensorRole::Intermediate)?);
        g.add_tensor(TensorInfo::new(xs.clone(), dims(xshape.with_c(1)), DataType::F32, TensorRole::Intermediate)?);
        g.add_tensor(TensorInfo::new(acc.clone(), dims(oshape), DataType::F32, TensorRole::Intermediate)?);
        nodes.push(Node::new(q_id, OpKind::Quantize, vec![x], vec![xq.clone(), xs.clone()]));
        let mut fc = node.clone();
        fc.kind = OpKind::FullyConnected {
            bias: false,
            quant: MatmulQuant::PreQuantized,
        };
        fc.inputs = vec![xq, xs.clone(), w, scales_id.clone()];
        fc.outputs = vec![acc.clone()];
        nodes.push(fc);
        nodes.push(Node::new(format!("{}_dequantize", node.id), OpKind::Dequantize, vec![acc, xs, scales_id], vec![out]));
    }
    g.nodes = nodes;
    g.validate()?;
    Ok(g)
}

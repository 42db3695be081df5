//! Stage- and device-aware kernel selection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FusedExpr, GraphIR, MatmulQuant, Node, OpKind};
use crate::layout::StorageType;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("node `{node}`: op kind `{kind}` is not supported by device profile `{profile}`")]
    Unsupported { node: String, kind: String, profile: String },
    #[error("node index {0} out of range")]
    NoSuchNode(usize),
    #[error("device profile: {0}")]
    Profile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
    #[default]
    None,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
            Stage::None => "none",
        }
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "prefill" => Ok(Stage::Prefill),
            "decode" => Ok(Stage::Decode),
            "none" => Ok(Stage::None),
            _ => Err(format!("unknown stage `{s}` (expected prefill, decode or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    Int8Dot,
    CooperativeMatrix8bit,
    Fp16Storage,
    MatrixMultiplyExtension,
}

impl Capability {
    pub fn name(self) -> &'static str {
        match self {
            Capability::Int8Dot => "int8-dot",
            Capability::CooperativeMatrix8bit => "cooperative-matrix-8bit",
            Capability::Fp16Storage => "fp16-storage",
            Capability::MatrixMultiplyExtension => "matrix-multiply-extension",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Capability::Int8Dot,
            Capability::CooperativeMatrix8bit,
            Capability::Fp16Storage,
            Capability::MatrixMultiplyExtension,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    name: String,
    #[serde(default)]
    flags: Vec<String>,
    #[serde(default)]
    winograd: bool,
    #[serde(default)]
    storage: BTreeMap<String, String>,
    #[serde(default)]
    weights: BTreeMap<String, String>,
    #[serde(default)]
    unsupported_ops: Vec<String>,
}

/// Device capabilities and storage preferences.
///
/// TOML form:
///
/// ```toml
/// name = "mobile-texture"
/// flags = ["int8-dot", "fp16-storage"]
/// winograd = true
/// unsupported_ops = []
///
/// [storage]          # activation storage per op kind, plus `default`
/// default = "texture-2d"
///
/// [weights]          # weight storage per kernel kind
/// conv-based = "texture-array-2d"
/// fc-based = "buffer-1d"
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub capabilities: Vec<Capability>,
    pub winograd: bool,
    pub activation_storage: BTreeMap<String, StorageType>,
    pub weight_storage: BTreeMap<String, StorageType>,
    pub unsupported_ops: Vec<String>,
    /// Flags that were present in the source but not recognized.
    pub ignored_flags: Vec<String>,
}

pub const BUILTIN_PROFILES: [&str; 3] = ["generic", "mobile-texture", "desktop-buffer"];

impl DeviceProfile {
    pub fn generic() -> Self {
        DeviceProfile {
            name: "generic".into(),
            capabilities: Vec::new(),
            winograd: false,
            activation_storage: [("default".to_string(), StorageType::Buffer1d)].into(),
            weight_storage: default_weight_storage(),
            unsupported_ops: Vec::new(),
            ignored_flags: Vec::new(),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "generic" => return Some(Self::generic()),
            "mobile-texture" => MOBILE_TEXTURE,
            "desktop-buffer" => DESKTOP_BUFFER,
            _ => return None,
        };
        Some(Self::from_toml_str(text).expect("builtin profile parses"))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SelectError> {
        let file: ProfileFile = toml::from_str(text).map_err(|e| SelectError::Profile(e.to_string()))?;
        let mut capabilities = Vec::new();
        let mut ignored_flags = Vec::new();
        for f in &file.flags {
            match Capability::parse(f) {
                Some(c) if !capabilities.contains(&c) => capabilities.push(c),
                Some(_) => {}
                None => ignored_flags.push(f.clone()),
            }
        }
        capabilities.sort();
        let parse_map = |m: &BTreeMap<String, String>| -> Result<BTreeMap<String, StorageType>, SelectError> {
            m.iter()
                .map(|(k, v)| {
                    v.parse::<StorageType>()
                        .map(|s| (k.clone(), s))
                        .map_err(|e| SelectError::Profile(format!("`{k}`: {e}")))
                })
                .collect()
        };
        let mut activation_storage = parse_map(&file.storage)?;
        activation_storage.entry("default".into()).or_insert(StorageType::Buffer1d);
        let mut weight_storage = default_weight_storage();
        weight_storage.extend(parse_map(&file.weights)?);
        Ok(DeviceProfile {
            name: file.name,
            capabilities,
            winograd: file.winograd,
            activation_storage,
            weight_storage,
            unsupported_ops: file.unsupported_ops,
            ignored_flags,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SelectError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SelectError::Profile(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn has(&self, cap: Capability) -> bool {
        self.capabilities.contains(&cap)
    }

    pub fn activation_storage_for(&self, kind: &str) -> StorageType {
        self.activation_storage
            .get(kind)
            .or_else(|| self.activation_storage.get("default"))
            .copied()
            .unwrap_or(StorageType::Buffer1d)
    }

    pub fn weight_storage_for(&self, kernel: KernelKind) -> StorageType {
        self.weight_storage
            .get(kernel.name())
            .copied()
            .unwrap_or(StorageType::Buffer1d)
    }
}

fn default_weight_storage() -> BTreeMap<String, StorageType> {
    [
        ("conv-based".to_string(), StorageType::TextureArray2d),
        ("winograd-candidate".to_string(), StorageType::TextureArray2d),
        ("fc-based".to_string(), StorageType::Buffer1d),
        ("generic".to_string(), StorageType::Buffer1d),
    ]
    .into()
}

const MOBILE_TEXTURE: &str = r#"
name = "mobile-texture"
flags = ["int8-dot", "fp16-storage"]
winograd = true

[storage]
default = "texture-2d"
"#;

const DESKTOP_BUFFER: &str = r#"
name = "desktop-buffer"
flags = ["cooperative-matrix-8bit", "matrix-multiply-extension"]

[storage]
default = "buffer-1d"
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    ConvBased,
    FcBased,
    /// Named in reports and headers only; emitted as a direct convolution.
    WinogradCandidate,
    Generic,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::ConvBased => "conv-based",
            KernelKind::FcBased => "fc-based",
            KernelKind::WinogradCandidate => "winograd-candidate",
            KernelKind::Generic => "generic",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantPlacement {
    SeparateQuantizeKernel,
    FusedInKernel,
    None,
}

impl QuantPlacement {
    pub fn name(self) -> &'static str {
        match self {
            QuantPlacement::SeparateQuantizeKernel => "separate-quantize-kernel",
            QuantPlacement::FusedInKernel => "fused-in-kernel",
            QuantPlacement::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperandRole {
    Activation,
    Weights,
    Scales,
    Bias,
    Output,
}

/// One tensor bound to a kernel argument.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub operand: String,
    pub tensor: String,
    pub role: OperandRole,
    pub storage: StorageType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub node: String,
    pub op: String,
    pub kind: KernelKind,
    pub quant: QuantPlacement,
    pub bindings: Vec<Binding>,
    /// Template variants switched on by capability flags.
    pub variants: Vec<String>,
}

impl KernelChoice {
    pub fn binding(&self, operand: &str) -> Option<&Binding> {
        self.bindings.iter().find(|b| b.operand == operand)
    }
}

/// Operand names of a node's root input slots.
pub fn slot_names(node: &Node) -> Vec<(String, OperandRole)> {
    let act = |s: &str| (s.to_string(), OperandRole::Activation);
    let n = node.root_inputs().len();
    let mut names = match &node.kind {
        OpKind::Conv2d { .. } => vec![act("src"), ("weights".into(), OperandRole::Weights)],
        OpKind::FullyConnected { quant, .. } => match quant {
            MatmulQuant::None => vec![act("src"), ("weights".into(), OperandRole::Weights)],
            MatmulQuant::FusedActivation => vec![
                act("src"),
                ("weights".into(), OperandRole::Weights),
                ("w_scales".into(), OperandRole::Scales),
            ],
            MatmulQuant::PreQuantized => vec![
                act("src"),
                ("x_scales".into(), OperandRole::Scales),
                ("weights".into(), OperandRole::Weights),
                ("w_scales".into(), OperandRole::Scales),
            ],
        },
        OpKind::RmsNorm { .. } => vec![act("src"), ("gamma".into(), OperandRole::Scales)],
        OpKind::Attention { .. } => vec![act("q"), act("k"), act("v")],
        OpKind::Dequantize => vec![
            act("src"),
            ("x_scales".into(), OperandRole::Scales),
            ("w_scales".into(), OperandRole::Scales),
        ],
        _ if n == 1 => vec![act("src")],
        _ => (0..n).map(|i| act(&format!("src{i}"))).collect(),
    };
    if names.len() < n {
        names.push(("bias".into(), OperandRole::Bias));
    }
    names
}

pub fn output_names(node: &Node) -> Vec<String> {
    if node.outputs.len() == 1 {
        vec!["dst".into()]
    } else {
        (0..node.outputs.len()).map(|i| format!("dst{i}")).collect()
    }
}

fn is_3x3_conv(graph: &GraphIR, node: &Node) -> bool {
    node.root_inputs()
        .get(1)
        .and_then(FusedExpr::as_input)
        .and_then(|w| graph.tensor(w))
        .is_some_and(|w| w.shape.h == 3 && w.shape.w == 3)
}

pub fn select_kernel(graph: &GraphIR, node_idx: usize, profile: &DeviceProfile, stage: Stage) -> Result<KernelChoice, SelectError> {
    let node = graph.nodes.get(node_idx).ok_or(SelectError::NoSuchNode(node_idx))?;
    let op = node.kind.name();
    if profile.unsupported_ops.iter().any(|u| u == op) {
        return Err(SelectError::Unsupported {
            node: node.id.clone(),
            kind: op.to_string(),
            profile: profile.name.clone(),
        });
    }

    let quantized_fc = matches!(node.kind, OpKind::FullyConnected { quant, .. } if quant != MatmulQuant::None);
    let kind = match (&node.kind, stage) {
        (k, Stage::Prefill) if k.is_matmul() => {
            if profile.winograd && is_3x3_conv(graph, node) {
                KernelKind::WinogradCandidate
            } else {
                KernelKind::ConvBased
            }
        }
        (k, Stage::Decode) if k.is_matmul() => KernelKind::FcBased,
        (OpKind::FullyConnected { .. }, Stage::None) => KernelKind::FcBased,
        (OpKind::Conv2d { .. }, Stage::None) => {
            if profile.winograd && is_3x3_conv(graph, node) {
                KernelKind::WinogradCandidate
            } else {
                KernelKind::ConvBased
            }
        }
        (OpKind::Attention { .. }, _) => KernelKind::ConvBased,
        _ => KernelKind::Generic,
    };

    let quant = if quantized_fc {
        match stage {
            Stage::Prefill => QuantPlacement::SeparateQuantizeKernel,
            Stage::Decode => QuantPlacement::FusedInKernel,
            Stage::None => match node.kind {
                OpKind::FullyConnected {
                    quant: MatmulQuant::PreQuantized,
                    ..
                } => QuantPlacement::SeparateQuantizeKernel,
                _ => QuantPlacement::FusedInKernel,
            },
        }
    } else if node.kind == OpKind::Quantize {
        QuantPlacement::SeparateQuantizeKernel
    } else {
        QuantPlacement::None
    };

    let act_storage = profile.activation_storage_for(op);
    let mut bindings = Vec::new();
    let roots = node.root_inputs();
    for ((name, role), expr) in slot_names(node).into_iter().zip(&roots) {
        let Some(tensor) = expr.as_input() else { continue };
        let storage = match role {
            OperandRole::Weights => profile.weight_storage_for(kind),
            OperandRole::Scales | OperandRole::Bias => StorageType::Buffer1d,
            _ => act_storage,
        };
        bindings.push(Binding {
            operand: name,
            tensor: tensor.to_string(),
            role,
            storage,
        });
    }
    if let Some(spec) = &node.fused {
        for (k, t) in spec.residual_inputs.iter().enumerate() {
            bindings.push(Binding {
                operand: format!("res{k}"),
                tensor: t.clone(),
                role: OperandRole::Activation,
                storage: act_storage,
            });
        }
    }
    for (name, t) in output_names(node).into_iter().zip(&node.outputs) {
        bindings.push(Binding {
            operand: name,
            tensor: t.clone(),
            role: OperandRole::Output,
            storage: act_storage,
        });
    }

    let mut variants = Vec::new();
    if quantized_fc && profile.has(Capability::Int8Dot) {
        variants.push(Capability::Int8Dot.name().to_string());
    }
    if quantized_fc && profile.has(Capability::CooperativeMatrix8bit) {
        variants.push(Capability::CooperativeMatrix8bit.name().to_string());
    }
    if node.kind.is_matmul() && profile.has(Capability::MatrixMultiplyExtension) {
        variants.push(Capability::MatrixMultiplyExtension.name().to_string());
    }
    if profile.has(Capability::Fp16Storage) {
        variants.push(Capability::Fp16Storage.name().to_string());
    }

    Ok(KernelChoice {
        node: node.id.clone(),
        op: op.to_string(),
        kind,
        quant,
        bindings,
        variants,
    })
}

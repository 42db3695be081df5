use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::access::{check_supported, emit_operand_helpers, OperandLayout};
use super::{render, CodegenError, Dialect};
use crate::graph::{
    select_kernel, Binding, DeviceProfile, FusedExpr, GraphIR, KernelChoice, MatmulQuant, Node, OpKind, OperandRole,
    QuantPlacement, Stage, UnaryOp,
};
use crate::layout::{LayoutDescriptor, StorageType};
use crate::memory::{collect_usage, plan_greedy_by_size, MemoryPlan, UsageRecord, DEFAULT_ALIGNMENT};
use crate::tensor::{LogicalShape, LogicalTensor};
use crate::virtualization::{
    linearize_weights, plan_weight_layout, rearrange_weights, IndexRule, PhysicalObjectSet, VirtError, WeightLayout,
    WeightShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelOptions {
    pub workgroup: [u32; 3],
    /// Recorded in kernel headers.
    pub stage: Stage,
    pub alignment: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            workgroup: [8, 8, 1],
            stage: Stage::None,
            alignment: DEFAULT_ALIGNMENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelBinding {
    pub operand: String,
    pub tensor: String,
    pub role: OperandRole,
    pub storage: StorageType,
    pub layout: String,
    pub objects: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSource {
    pub entry: String,
    pub node: String,
    pub dialect: Dialect,
    pub source: String,
    pub bindings: Vec<KernelBinding>,
    pub workgroup: [u32; 3],
    pub global: [usize; 3],
}

impl KernelSource {
    pub fn file_name(&self) -> String {
        format!("{}.{}", self.entry, self.dialect.extension())
    }
}

fn role_name(role: OperandRole) -> &'static str {
    match role {
        OperandRole::Activation => "activation",
        OperandRole::Weights => "weights",
        OperandRole::Scales => "scales",
        OperandRole::Bias => "bias",
        OperandRole::Output => "output",
    }
}

fn entry_name(node_id: &str) -> String {
    let mut s: String = node_id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    if !s.starts_with(|c: char| c.is_ascii_alphabetic()) {
        s.insert_str(0, "k_");
    }
    s
}

const MATMUL: &str = "\
{{entry}}
  {{ci}} x = {{gid0}};
  {{ci}} y = {{gid1}};
  {{ci}} so = {{gid2}};
  if (x >= {{dst_w}} || y >= {{dst_h}} || so >= {{dst_s}}) {
    return;
  }
  for ({{vi}} b = 0; b < {{dst_b}}; b++) {
{{setup}}    {{vf4}} acc = {{zero4}};
    for ({{vi}} ky = 0; ky < {{kh}}; ky++) {
      for ({{vi}} kx = 0; kx < {{kw}}; kx++) {
        {{ci}} sx = x * {{stride}} + kx - {{pad}};
        {{ci}} sy = y * {{stride}} + ky - {{pad}};
        if (sx < 0 || sy < 0 || sx >= {{src_w}} || sy >= {{src_h}}) {
          continue;
        }
        for ({{vi}} si = 0; si < {{src_s}}; si++) {
          {{vf4}} v = {{src_value}};
{{quant_input}}          acc.x += {{dot}}(v, weights_read(so * 4 + 0, kx, ky, 0, si));
          acc.y += {{dot}}(v, weights_read(so * 4 + 1, kx, ky, 0, si));
          acc.z += {{dot}}(v, weights_read(so * 4 + 2, kx, ky, 0, si));
          acc.w += {{dot}}(v, weights_read(so * 4 + 3, kx, ky, 0, si));
        }
      }
    }
{{post}}    dst_write(b, x, y, 0, so, acc);
  }
}
";

const ELEMENTWISE: &str = "\
{{entry}}
  {{ci}} x = {{gid0}};
  {{ci}} y = {{gid1}};
  {{ci}} s = {{gid2}};
  if (x >= {{dst_w}} || y >= {{dst_h}} || s >= {{dst_s}}) {
    return;
  }
  for ({{vi}} b = 0; b < {{dst_b}}; b++) {
    for ({{vi}} d = 0; d < {{dst_d}}; d++) {
      {{vf4}} acc = {{value}};
{{post}}      dst_write(b, x, y, d, s, acc);
    }
  }
}
";

const RMS_NORM: &str = "\
{{entry}}
  {{ci}} x = {{gid0}};
  {{ci}} y = {{gid1}};
  {{ci}} b = {{gid2}};
  if (x >= {{dst_w}} || y >= {{dst_h}} || b >= {{dst_b}}) {
    return;
  }
  {{vf}} ss = {{zero}};
  for ({{vi}} si = 0; si < {{src_s}}; si++) {
    {{vf4}} v = {{src_value}};
    ss += dot(v, v);
  }
  {{vf}} inv = {{rsqrt}}(ss / {{src_c}} + {{eps}});
  for ({{vi}} so = 0; so < {{dst_s}}; so++) {
    {{vf4}} acc = {{src_value_out}} * inv * gamma_read(0, 0, 0, 0, so);
{{post}}    dst_write(b, x, y, 0, so, acc);
  }
}
";

const QUANTIZE: &str = "\
{{entry}}
  {{ci}} x = {{gid0}};
  {{ci}} y = {{gid1}};
  {{ci}} b = {{gid2}};
  if (x >= {{dst_w}} || y >= {{dst_h}} || b >= {{dst_b}}) {
    return;
  }
{{row_scale}}  for ({{vi}} si = 0; si < {{src_s}}; si++) {
    dst0_write(b, x, y, 0, si, clamp({{rint}}(src_read(b, x, y, 0, si) / xs), {{qmin4}}, {{qmax4}}));
  }
  dst1_write(b, x, y, 0, 0, {{f4}}(xs, {{zero}}, {{zero}}, {{zero}}));
}
";

const ROW_SCALE: &str = "\
  {{vf}} amax = {{zero}};
  for ({{vi}} si = 0; si < {{src_s}}; si++) {
    {{vf4}} a = {{abs}}({{row_value}});
    amax = max(amax, max(max(a.x, a.y), max(a.z, a.w)));
  }
  {{vf}} xs = {{scale_select}};
";

const ATTENTION: &str = "\
{{entry}}
  {{ci}} r = {{gid0}};
  {{ci}} n = {{gid1}};
  if (r >= {{rows}} || n >= {{groups}}) {
    return;
  }
  {{vf}} m = {{neg_big}};
  for ({{vi}} j = 0; j < {{keys}}; j++) {
    {{vf}} l = {{zero}};
    for ({{vi}} si = 0; si < {{dh_s}}; si++) {
      l += dot(q_read(0, r, n, 0, si), k_read(0, j, n, 0, si));
    }
    m = max(m, l * {{scale}});
  }
  {{vf}} den = {{zero}};
  for ({{vi}} j = 0; j < {{keys}}; j++) {
    {{vf}} l = {{zero}};
    for ({{vi}} si = 0; si < {{dh_s}}; si++) {
      l += dot(q_read(0, r, n, 0, si), k_read(0, j, n, 0, si));
    }
    den += exp(l * {{scale}} - m);
  }
  for ({{vi}} so = 0; so < {{dh_s}}; so++) {
    {{vf4}} acc = {{zero4}};
    for ({{vi}} j = 0; j < {{keys}}; j++) {
      {{vf}} l = {{zero}};
      for ({{vi}} si = 0; si < {{dh_s}}; si++) {
        l += dot(q_read(0, r, n, 0, si), k_read(0, j, n, 0, si));
      }
      acc += exp(l * {{scale}} - m) / den * v_read(0, j, n, 0, so);
    }
{{post}}    dst_write(0, r, n, 0, so, acc);
  }
}
";

const REMAP: &str = "\
{{entry}}
  {{ci}} x = {{gid0}};
  {{ci}} y = {{gid1}};
  {{ci}} s = {{gid2}};
  if (x >= {{dst_w}} || y >= {{dst_h}} || s >= {{dst_s}}) {
    return;
  }
  for ({{vi}} b = 0; b < {{dst_b}}; b++) {
    for ({{vi}} d = 0; d < {{dst_d}}; d++) {
      {{vf4}} acc = {{zero4}};
      for ({{vi}} k = 0; k < 4; k++) {
        {{ci}} c = s * 4 + k;
        if (c >= {{dst_c}}) {
          break;
        }
{{lane}}      }
{{post}}      dst_write(b, x, y, d, s, acc);
    }
  }
}
";

const RESHAPE_LANE: &str = "\
        {{ci}} flat = (((b * {{dst_h}} + y) * {{dst_w}} + x) * {{dst_d}} + d) * {{dst_c}} + c;
        {{ci}} sc = flat % {{src_c}};
        {{ci}} t0 = flat / {{src_c}};
        {{ci}} sd = t0 % {{src_d}};
        {{ci}} t1 = t0 / {{src_d}};
        {{ci}} sx = t1 % {{src_w}};
        {{ci}} t2 = t1 / {{src_w}};
        {{ci}} sy = t2 % {{src_h}};
        {{ci}} sb = t2 / {{src_h}};
        acc = with_lane4(acc, k, lane4(src_read(sb, sx, sy, sd, sc / 4), sc % 4));
";

const MERGE_LANE: &str = "\
        {{ci}} hh = c / {{dh}};
        {{ci}} j = c % {{dh}};
        {{ci}} n = b * {{kv}} + hh / {{g}};
        {{ci}} row = x * {{g}} + hh % {{g}};
        acc = with_lane4(acc, k, lane4(src_read(0, row, n, 0, j / 4), j % 4));
";

const QKV_LANE: &str = "\
        {{ci}} bb = y / {{kv}};
        {{ci}} hh = (y % {{kv}}) * {{g}} + x % {{g}};
        {{ci}} t = x / {{g}};
{{rotate}}";

const ROTATE: &str = "\
        {{ci}} jj = c % {{half}};
        {{ci}} c1 = hh * {{dh}} + jj;
        {{ci}} c2 = c1 + {{half}};
        {{cf}} x1 = lane4(src_read(bb, t, 0, 0, c1 / 4), c1 % 4);
        {{cf}} x2 = lane4(src_read(bb, t, 0, 0, c2 / 4), c2 % 4);
        {{cf}} theta = {{tof}}(t + {{pos}}) * pow({{base}}, {{tof}}(-2 * jj) / {{dhf}});
        {{cf}} cs = cos(theta);
        {{cf}} sn = sin(theta);
        acc = with_lane4(acc, k, {{rotated}});
";

const PLAIN_GATHER: &str = "\
        {{ci}} cc = hh * {{dh}} + c;
        acc = with_lane4(acc, k, lane4(src_read(bb, t, 0, 0, cc / 4), cc % 4));
";

fn op_helper(dialect: Dialect, name: &str) -> &'static str {
    match (dialect, name) {
        (Dialect::CStyleCompute, "gelu4") => {
            "float4 gelu4(float4 v) {\n  return 0.5f * v * (1.0f + tanh(0.7978846f * (v + 0.044715f * v * v * v)));\n}\n"
        }
        (Dialect::CStyleCompute, "silu4") => "float4 silu4(float4 v) {\n  return v / (1.0f + exp(-v));\n}\n",
        (Dialect::CStyleCompute, "lane4") => {
            "float lane4(float4 v, int k) {\n  return k == 0 ? v.x : k == 1 ? v.y : k == 2 ? v.z : v.w;\n}\n\
float4 with_lane4(float4 v, int k, float e) {\n  if (k == 0) { v.x = e; } else if (k == 1) { v.y = e; } else if (k == 2) { v.z = e; } else { v.w = e; }\n  return v;\n}\n"
        }
        (Dialect::CStyleCompute, "idot4") => {
            "float idot4(float4 a, float4 b) {\n  return (float)dot(convert_char4(a), convert_char4(b));\n}\n"
        }
        (Dialect::WgslStyle, "gelu4") => {
            "fn gelu4(v: vec4<f32>) -> vec4<f32> {\n  return 0.5 * v * (1.0 + tanh(0.7978846 * (v + 0.044715 * v * v * v)));\n}\n"
        }
        (Dialect::WgslStyle, "silu4") => "fn silu4(v: vec4<f32>) -> vec4<f32> {\n  return v / (1.0 + exp(-v));\n}\n",
        (Dialect::WgslStyle, "lane4") => {
            "fn lane4(v: vec4<f32>, k: i32) -> f32 {\n  return v[k];\n}\n\
fn with_lane4(v: vec4<f32>, k: i32, e: f32) -> vec4<f32> {\n  var r = v;\n  r[k] = e;\n  return r;\n}\n"
        }
        (Dialect::WgslStyle, "idot4") => {
            "fn idot4(a: vec4<f32>, b: vec4<f32>) -> f32 {\n  return f32(dot4I8Packed(pack4xI8(vec4<i32>(a)), pack4xI8(vec4<i32>(b))));\n}\n"
        }
        _ => unreachable!("unknown op helper {name}"),
    }
}

struct Emitter<'a> {
    dialect: Dialect,
    choice: &'a KernelChoice,
    node: &'a Node,
    layouts: BTreeMap<&'a str, &'a OperandLayout>,
    helpers: BTreeSet<&'static str>,
}

impl<'a> Emitter<'a> {
    fn base(&self) -> BTreeMap<&'static str, String> {
        let c = self.dialect == Dialect::CStyleCompute;
        let pick = |a: &str, b: &str| if c { a.to_string() } else { b.to_string() };
        let mut m = BTreeMap::new();
        m.insert("vi", pick("int", "var"));
        m.insert("ci", pick("const int", "let"));
        m.insert("vf", pick("float", "var"));
        m.insert("cf", pick("const float", "let"));
        m.insert("vf4", pick("float4", "var"));
        m.insert("f4", pick("(float4)", "vec4<f32>"));
        m.insert("zero", self.dialect.lit(0.0));
        m.insert("zero4", pick("(float4)(0.0f)", "vec4<f32>(0.0)"));
        m.insert("rsqrt", pick("rsqrt", "inverseSqrt"));
        m.insert("rint", pick("rint", "round"));
        m.insert("abs", pick("fabs", "abs"));
        m.insert("tof", pick("(float)", "f32"));
        m.insert("neg_big", self.dialect.lit(-3.0e38));
        m.insert("qmin4", self.splat(-127.0));
        m.insert("qmax4", self.splat(127.0));
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            let key = ["gid0", "gid1", "gid2"][i];
            m.insert(key, pick(&format!("(int)get_global_id({i})"), &format!("i32(gid.{axis})")));
        }
        m
    }

    fn fill(&self, template: &str, extra: &[(&'static str, String)]) -> Result<String, CodegenError> {
        let mut m = self.base();
        for (k, v) in extra {
            m.insert(k, v.clone());
        }
        render(template, &m)
    }

    fn splat(&self, v: f32) -> String {
        match self.dialect {
            Dialect::CStyleCompute => self.dialect.lit(v),
            Dialect::WgslStyle => format!("vec4<f32>({})", self.dialect.lit(v)),
        }
    }

    fn select(&self, cond: &str, a: &str, b: &str) -> String {
        match self.dialect {
            Dialect::CStyleCompute => format!("({cond} ? {a} : {b})"),
            Dialect::WgslStyle => format!("select({b}, {a}, {cond})"),
        }
    }

    fn operand_of(&self, tensor: &str) -> Result<&str, CodegenError> {
        self.choice
            .bindings
            .iter()
            .find(|b| b.tensor == tensor && b.role != OperandRole::Output)
            .map(|b| b.operand.as_str())
            .ok_or_else(|| CodegenError::Incomplete(vec![tensor.to_string()]))
    }

    fn expr(&mut self, e: &FusedExpr, coord: &str) -> Result<String, CodegenError> {
        Ok(match e {
            FusedExpr::Input(id) => format!("{}_read({coord})", self.operand_of(id)?),
            FusedExpr::Acc => "acc".into(),
            FusedExpr::Unary { op, arg } => {
                let a = self.expr(arg, coord)?;
                match op {
                    UnaryOp::Relu => format!("max({a}, {})", self.splat(0.0)),
                    UnaryOp::Gelu => {
                        self.helpers.insert("gelu4");
                        format!("gelu4({a})")
                    }
                    UnaryOp::Silu => {
                        self.helpers.insert("silu4");
                        format!("silu4({a})")
                    }
                    UnaryOp::Rsqrt => match self.dialect {
                        Dialect::CStyleCompute => format!("rsqrt({a})"),
                        Dialect::WgslStyle => format!("inverseSqrt({a})"),
                    },
                    UnaryOp::Scale(f) => format!("({a} * {})", self.dialect.lit(*f)),
                    UnaryOp::AddConst(v) => format!("({a} + {})", self.dialect.lit(*v)),
                }
            }
            FusedExpr::Binary { op, lhs, rhs } => {
                let (l, r) = (self.expr(lhs, coord)?, self.expr(rhs, coord)?);
                let sym = match op {
                    crate::graph::BinaryOp::Add => "+",
                    crate::graph::BinaryOp::Sub => "-",
                    crate::graph::BinaryOp::Mul => "*",
                };
                format!("({l} {sym} {r})")
            }
        })
    }

    fn shape_of(&self, operand: &str) -> Result<LogicalShape, CodegenError> {
        let b = self
            .choice
            .binding(operand)
            .ok_or_else(|| CodegenError::Incomplete(vec![operand.to_string()]))?;
        Ok(self.layouts[b.tensor.as_str()].shape)
    }

    /// Shape of the first slot, which may be a fused prologue rather than a
    /// plain `src` binding.
    fn input_shape(&self) -> Result<LogicalShape, CodegenError> {
        let slot0 = self.slot0();
        let leaf = slot0.leaves().first().map(|l| l.to_string()).unwrap_or_default();
        self.layouts
            .get(leaf.as_str())
            .map(|l| l.shape)
            .ok_or_else(|| CodegenError::Incomplete(vec![leaf]))
    }

    fn slot0(&self) -> FusedExpr {
        self.node.root_inputs().into_iter().next().unwrap_or(FusedExpr::Acc)
    }

    /// Bias, dequantization and epilogue statements applied to `acc`.
    fn post(&mut self, indent: &str, out_coord: &str, slice: &str) -> Result<String, CodegenError> {
        let mut out = String::new();
        if let Some(spec) = &self.node.fused {
            if spec.dequantize_output {
                out.push_str(&format!(
                    "{indent}acc = acc * x_scales_read({}).x * w_scales_read(0, 0, 0, 0, {slice}); // dequantize\n",
                    out_coord.rsplit_once(',').map(|(h, _)| format!("{h}, 0")).unwrap_or_default()
                ));
            }
        }
        if self.choice.binding("bias").is_some() {
            out.push_str(&format!("{indent}acc = acc + bias_read(0, 0, 0, 0, {slice});\n"));
        }
        if let Some(ep) = self.node.fused.as_ref().and_then(|s| s.epilogue.clone()) {
            let e = self.expr(&ep, out_coord)?;
            out.push_str(&format!("{indent}acc = {e}; // epilogue\n"));
        }
        Ok(out)
    }

    fn dims(shape: &LogicalShape, prefix: &'static str) -> Vec<(&'static str, String)> {
        let key = |k: &str| -> &'static str {
            match (prefix, k) {
                ("dst", "b") => "dst_b",
                ("dst", "h") => "dst_h",
                ("dst", "w") => "dst_w",
                ("dst", "d") => "dst_d",
                ("dst", "c") => "dst_c",
                ("dst", "s") => "dst_s",
                ("src", "b") => "src_b",
                ("src", "h") => "src_h",
                ("src", "w") => "src_w",
                ("src", "d") => "src_d",
                ("src", "c") => "src_c",
                _ => "src_s",
            }
        };
        vec![
            (key("b"), shape.b.to_string()),
            (key("h"), shape.h.to_string()),
            (key("w"), shape.w.to_string()),
            (key("d"), shape.d.to_string()),
            (key("c"), shape.c.to_string()),
            (key("s"), shape.slices().to_string()),
        ]
    }

    fn out_shape(&self) -> Result<LogicalShape, CodegenError> {
        let first = crate::graph::output_names(self.node).into_iter().next().unwrap_or_default();
        self.shape_of(&first)
    }

    fn matmul(&mut self, entry: String) -> Result<(String, [usize; 3]), CodegenError> {
        let dst = self.out_shape()?;
        let src = self.input_shape()?;
        let w = self.shape_of("weights")?;
        let (kh, kw, stride, pad) = match self.node.kind {
            OpKind::Conv2d { pad, stride, .. } => (w.h, w.w, stride, pad),
            _ => (1, 1, 1, 0),
        };
        let slot0 = self.slot0();
        let src_value = self.expr(&slot0, "b, sx, sy, 0, si")?;
        let quant = match self.node.kind {
            OpKind::FullyConnected { quant, .. } => quant,
            _ => MatmulQuant::None,
        };
        let mut setup = String::new();
        let mut quant_input = String::new();
        let mut post = String::new();
        if quant == MatmulQuant::FusedActivation {
            let row_value = self.expr(&slot0, "b, x, y, 0, si")?;
            let scale_select = self.select("amax > 0.0", "amax / 127.0", "1.0");
            setup = self.fill(
                ROW_SCALE,
                &[
                    ("src_s", src.slices().to_string()),
                    ("row_value", row_value),
                    ("scale_select", scale_select),
                ],
            )?;
            setup = setup.lines().map(|l| format!("  {l}\n")).collect();
            quant_input = self.fill("          v = clamp({{rint}}(v / xs), {{qmin4}}, {{qmax4}});\n", &[])?;
            post.push_str("    acc = acc * xs * w_scales_read(0, 0, 0, 0, so);\n");
        }
        post.push_str(&self.post("    ", "b, x, y, 0, so", "so")?);
        let dot = if quant != MatmulQuant::None && !self.choice.variants.is_empty() {
            self.helpers.insert("idot4");
            "idot4"
        } else {
            "dot"
        };
        let mut vals = Self::dims(&dst, "dst");
        vals.extend(Self::dims(&src, "src"));
        vals.extend([
            ("entry", entry),
            ("setup", setup),
            ("quant_input", quant_input),
            ("post", post),
            ("src_value", src_value),
            ("dot", dot.to_string()),
            ("kh", kh.to_string()),
            ("kw", kw.to_string()),
            ("stride", stride.to_string()),
            ("pad", pad.to_string()),
        ]);
        Ok((self.fill(MATMUL, &vals)?, [dst.w, dst.h, dst.slices()]))
    }

    fn elementwise(&mut self, entry: String) -> Result<(String, [usize; 3]), CodegenError> {
        let dst = self.out_shape()?;
        let coord = "b, x, y, d, s";
        let value = match (&self.node.kind, self.node.elementwise_expr()) {
            (OpKind::Dequantize, _) => {
                "src_read(b, x, y, d, s) * x_scales_read(b, x, y, d, 0).x * w_scales_read(0, 0, 0, 0, s)".to_string()
            }
            (_, Some(e)) => self.expr(&e, coord)?,
            (_, None) => self.expr(&self.slot0(), coord)?,
        };
        let post = self.post("      ", coord, "s")?;
        let mut vals = Self::dims(&dst, "dst");
        vals.extend([("entry", entry), ("value", value), ("post", post)]);
        Ok((self.fill(ELEMENTWISE, &vals)?, [dst.w, dst.h, dst.slices()]))
    }

    fn rms_norm(&mut self, entry: String, eps: f32) -> Result<(String, [usize; 3]), CodegenError> {
        let dst = self.out_shape()?;
        let src = self.input_shape()?;
        let slot0 = self.slot0();
        let src_value = self.expr(&slot0, "b, x, y, 0, si")?;
        let src_value_out = self.expr(&slot0, "b, x, y, 0, so")?;
        let post = self.post("    ", "b, x, y, 0, so", "so")?;
        let mut vals = Self::dims(&dst, "dst");
        vals.extend(Self::dims(&src, "src"));
        vals.retain(|(k, _)| *k != "src_c");
        vals.extend([
            ("entry", entry),
            ("src_value", src_value),
            ("src_value_out", src_value_out),
            ("post", post),
            ("src_c", self.dialect.lit(src.c as f32)),
            ("eps", self.dialect.lit(eps)),
        ]);
        Ok((self.fill(RMS_NORM, &vals)?, [dst.w, dst.h, dst.b]))
    }

    fn quantize(&mut self, entry: String) -> Result<(String, [usize; 3]), CodegenError> {
        let src = self.input_shape()?;
        let scale_select = self.select("amax > 0.0", "amax / 127.0", "1.0");
        let row_scale = self.fill(
            ROW_SCALE,
            &[
                ("src_s", src.slices().to_string()),
                ("row_value", "src_read(b, x, y, 0, si)".into()),
                ("scale_select", scale_select),
            ],
        )?;
        let mut vals = Self::dims(&src, "dst");
        vals.extend(Self::dims(&src, "src"));
        vals.extend([("entry", entry), ("row_scale", row_scale)]);
        Ok((self.fill(QUANTIZE, &vals)?, [src.w, src.h, src.b]))
    }

    fn attention(&mut self, entry: String, head_dim: usize) -> Result<(String, [usize; 3]), CodegenError> {
        let q = self.shape_of("q")?;
        let k = self.shape_of("k")?;
        let post = self.post("    ", "0, r, n, 0, so", "so")?;
        let vals = vec![
            ("entry", entry),
            ("rows", q.w.to_string()),
            ("groups", q.h.to_string()),
            ("keys", k.w.to_string()),
            ("dh_s", q.slices().to_string()),
            ("scale", self.dialect.lit(1.0 / (head_dim as f32).sqrt())),
            ("post", post),
        ];
        Ok((self.fill(ATTENTION, &vals)?, [q.w, q.h, 1]))
    }

    fn remap(&mut self, entry: String) -> Result<(String, [usize; 3]), CodegenError> {
        self.helpers.insert("lane4");
        let dst = self.out_shape()?;
        let src = self.input_shape()?;
        let mut dims = Self::dims(&dst, "dst");
        dims.extend(Self::dims(&src, "src"));
        let lane = match self.node.kind {
            OpKind::Reshape { .. } => self.fill(RESHAPE_LANE, &dims)?,
            OpKind::MergeHeads {
                heads,
                kv_heads,
                head_dim,
            } => self.fill(
                MERGE_LANE,
                &[
                    ("dh", head_dim.to_string()),
                    ("kv", kv_heads.to_string()),
                    ("g", (heads / kv_heads.max(1)).to_string()),
                ],
            )?,
            OpKind::RopeQkv {
                heads,
                kv_heads,
                head_dim,
                base,
                rope,
                pos_offset,
            } => {
                let half = head_dim / 2;
                let rotate = if rope {
                    let rotated = self.select(&format!("c < {half}"), "x1 * cs - x2 * sn", "x2 * cs + x1 * sn");
                    self.fill(
                        ROTATE,
                        &[
                            ("half", half.to_string()),
                            ("dh", head_dim.to_string()),
                            ("pos", pos_offset.to_string()),
                            ("base", self.dialect.lit(base)),
                            ("dhf", self.dialect.lit(head_dim as f32)),
                            ("rotated", rotated),
                        ],
                    )?
                } else {
                    self.fill(PLAIN_GATHER, &[("dh", head_dim.to_string())])?
                };
                self.fill(
                    QKV_LANE,
                    &[
                        ("kv", kv_heads.to_string()),
                        ("g", (heads / kv_heads.max(1)).to_string()),
                        ("rotate", rotate),
                    ],
                )?
            }
            _ => unreachable!("remap called for {}", self.node.kind.name()),
        };
        let post = self.post("      ", "b, x, y, d, s", "s")?;
        let mut vals = dims;
        vals.extend([("entry", entry), ("lane", lane), ("post", post)]);
        Ok((self.fill(REMAP, &vals)?, [dst.w, dst.h, dst.slices()]))
    }
}

fn c_param(storage: StorageType, output: bool, scalar: bool, name: &str) -> String {
    let access = if output { "__write_only" } else { "__read_only" };
    match storage {
        StorageType::Buffer1d => {
            let ty = if scalar { "float" } else { "float4" };
            let c = if output { "" } else { "const " };
            format!("__global {c}{ty}* {name}")
        }
        StorageType::ImageBuffer1d => format!("{access} image1d_buffer_t {name}"),
        StorageType::Texture2d => format!("{access} image2d_t {name}"),
        StorageType::Texture3d => format!("{access} image3d_t {name}"),
        StorageType::TextureArray2d => format!("{access} image2d_array_t {name}"),
    }
}

fn wgsl_decl(storage: StorageType, output: bool, scalar: bool, name: &str, slot: usize) -> String {
    let ty = match (storage, output) {
        (StorageType::Buffer1d, _) => {
            let elem = if scalar { "f32" } else { "vec4<f32>" };
            let access = if output { "read_write" } else { "read" };
            return format!("@group(0) @binding({slot}) var<storage, {access}> {name}: array<{elem}>;\n");
        }
        (StorageType::Texture2d, false) => "texture_2d<f32>",
        (StorageType::Texture2d, true) => "texture_storage_2d<rgba32float, write>",
        (StorageType::Texture3d, false) => "texture_3d<f32>",
        (StorageType::Texture3d, true) => "texture_storage_3d<rgba32float, write>",
        (StorageType::TextureArray2d, false) => "texture_2d_array<f32>",
        (StorageType::TextureArray2d, true) => "texture_storage_2d_array<rgba32float, write>",
        (StorageType::ImageBuffer1d, _) => unreachable!("rejected before declaration"),
    };
    format!("@group(0) @binding({slot}) var {name}: {ty};\n")
}

/// Operand names used as `<name>_read(` or `<name>_write(` in `source` that
/// are absent from `bindings`.
pub fn unbound_operands(source: &str, bindings: &[KernelBinding]) -> Vec<String> {
    let mut missing = BTreeSet::new();
    for suffix in ["_read(", "_write("] {
        let mut rest = source;
        while let Some(pos) = rest.find(suffix) {
            let before = &rest[..pos];
            let start = before
                .rfind(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
                .map(|i| i + 1)
                .unwrap_or(0);
            let name = &before[start..];
            if !name.is_empty() && !bindings.iter().any(|b| b.operand == name) {
                missing.insert(name.to_string());
            }
            rest = &rest[pos + suffix.len()..];
        }
    }
    missing.into_iter().collect()
}

fn expr_list(items: &[(usize, String)]) -> String {
    if items.is_empty() {
        return "-".into();
    }
    items.iter().map(|(slot, e)| format!("slot{slot}:{e}")).collect::<Vec<_>>().join(";")
}

/// Emits the source for one selected kernel. `layouts` is keyed by tensor id.
pub fn emit_kernel(
    choice: &KernelChoice,
    node: &Node,
    layouts: &BTreeMap<String, OperandLayout>,
    dialect: Dialect,
    options: &KernelOptions,
) -> Result<KernelSource, CodegenError> {
    let mut bound = BTreeMap::new();
    let mut bindings = Vec::new();
    for b in &choice.bindings {
        let layout = layouts.get(&b.tensor).ok_or_else(|| CodegenError::MissingDescriptor {
            operand: b.operand.clone(),
            tensor: b.tensor.clone(),
        })?;
        if layout.storage() != b.storage {
            return Err(CodegenError::StorageMismatch {
                operand: b.operand.clone(),
                binding: b.storage.name().into(),
                layout: layout.storage().name().into(),
            });
        }
        check_supported(b.storage, dialect)?;
        bound.insert(b.tensor.as_str(), layout);
        bindings.push(KernelBinding {
            operand: b.operand.clone(),
            tensor: b.tensor.clone(),
            role: b.role,
            storage: b.storage,
            layout: layout.describe(),
            objects: layout.object_count(),
        });
    }

    let entry = entry_name(&node.id);
    let mut em = Emitter {
        dialect,
        choice,
        node,
        layouts: bound,
        helpers: BTreeSet::new(),
    };
    let entry_line = match dialect {
        Dialect::CStyleCompute => {
            let mut params = Vec::new();
            for b in &choice.bindings {
                let layout = layouts[&b.tensor].clone();
                let scalar = matches!(layout.rule, IndexRule::WeightLinear { .. });
                for k in 0..layout.object_count() {
                    let name = if layout.object_count() > 1 { format!("{}_{k}", b.operand) } else { b.operand.clone() };
                    params.push(c_param(b.storage, b.role == OperandRole::Output, scalar, &name));
                }
            }
            format!("__kernel void {entry}({}) {{", params.join(", "))
        }
        Dialect::WgslStyle => {
            let [x, y, z] = options.workgroup;
            format!("@compute @workgroup_size({x}, {y}, {z})\nfn {entry}(@builtin(global_invocation_id) gid: vec3<u32>) {{")
        }
    };

    let (body, global) = match &node.kind {
        OpKind::Conv2d { .. } | OpKind::FullyConnected { .. } => em.matmul(entry_line)?,
        OpKind::RmsNorm { eps } => em.rms_norm(entry_line, *eps)?,
        OpKind::Quantize => em.quantize(entry_line)?,
        OpKind::Attention { head_dim, .. } => em.attention(entry_line, *head_dim)?,
        OpKind::Reshape { .. } | OpKind::MergeHeads { .. } | OpKind::RopeQkv { .. } => em.remap(entry_line)?,
        _ => em.elementwise(entry_line)?,
    };

    let spec = node.fused.as_ref();
    let prologue: Vec<(usize, String)> = spec
        .map(|s| {
            s.root_inputs
                .iter()
                .enumerate()
                .filter(|(_, e)| e.as_input().is_none())
                .map(|(i, e)| (i, e.to_string()))
                .collect()
        })
        .unwrap_or_default();
    let epilogue = spec.and_then(|s| s.epilogue.as_ref()).map(|e| e.to_string()).unwrap_or_else(|| "-".into());
    let [wx, wy, wz] = options.workgroup;
    let mut src = String::new();
    src.push_str(&format!("// kernel={entry}\n"));
    src.push_str(&format!(
        "// node={} op={} kind={} stage={} quant={}\n",
        node.id,
        choice.op,
        choice.kind.name(),
        options.stage.name(),
        choice.quant.name()
    ));
    let variants = if choice.variants.is_empty() { "-".to_string() } else { choice.variants.join(",") };
    src.push_str(&format!("// variants={variants}\n"));
    src.push_str(&format!(
        "// dialect={} workgroup={wx},{wy},{wz} global={},{},{}\n",
        dialect.name(),
        global[0],
        global[1],
        global[2]
    ));
    for b in &bindings {
        src.push_str(&format!(
            "// binding {}={} role={} storage={} layout={} objects={}\n",
            b.operand,
            b.tensor,
            role_name(b.role),
            b.storage.name(),
            b.layout,
            b.objects
        ));
    }
    src.push_str(&format!("// prologue={}\n// epilogue={epilogue}\n\n", expr_list(&prologue)));

    if dialect == Dialect::CStyleCompute && choice.bindings.iter().any(|b| b.storage.is_texture()) {
        src.push_str("__constant sampler_t smp = CLK_NORMALIZED_COORDS_FALSE | CLK_ADDRESS_NONE | CLK_FILTER_NEAREST;\n\n");
    }
    if dialect == Dialect::WgslStyle {
        let mut slot = 0;
        for b in &choice.bindings {
            let layout = &layouts[&b.tensor];
            let scalar = matches!(layout.rule, IndexRule::WeightLinear { .. });
            for k in 0..layout.object_count() {
                let name = if layout.object_count() > 1 { format!("{}_{k}", b.operand) } else { b.operand.clone() };
                src.push_str(&wgsl_decl(b.storage, b.role == OperandRole::Output, scalar, &name, slot));
                slot += 1;
            }
        }
        src.push('\n');
    }
    for b in &choice.bindings {
        src.push_str(&emit_operand_helpers(&b.operand, &layouts[&b.tensor], dialect, b.role == OperandRole::Output)?);
        src.push('\n');
    }
    for h in &em.helpers {
        src.push_str(op_helper(dialect, h));
        src.push('\n');
    }
    src.push_str(&body);

    let missing = unbound_operands(&src, &bindings);
    if !missing.is_empty() {
        return Err(CodegenError::Incomplete(missing));
    }
    Ok(KernelSource {
        entry,
        node: node.id.clone(),
        dialect,
        source: src,
        bindings,
        workgroup: options.workgroup,
        global,
    })
}

#[derive(Debug, Clone)]
pub struct Specialization {
    pub kernels: Vec<KernelSource>,
    pub choices: Vec<KernelChoice>,
    /// Layout of every bound tensor, keyed by tensor id.
    pub layouts: BTreeMap<String, OperandLayout>,
    /// Weights converted to their device layout.
    pub weights: BTreeMap<String, PhysicalObjectSet>,
    pub records: Vec<UsageRecord>,
    pub plan: MemoryPlan,
}

fn weight_values(graph: &GraphIR, id: &str) -> Result<LogicalTensor, CodegenError> {
    let info = graph.tensor(id).ok_or_else(|| CodegenError::MissingDescriptor {
        operand: "weights".into(),
        tensor: id.into(),
    })?;
    if let Some(t) = info.to_tensor() {
        return Ok(t);
    }
    match &info.init {
        Some(init) => Ok(LogicalTensor::from_f32(info.shape, init.materialize(info.shape.element_count())).map_err(VirtError::from)?),
        None => Ok(LogicalTensor::zeros(info.shape)),
    }
}

fn assign_layout(
    graph: &GraphIR,
    binding: &mut Binding,
    storage_of: &mut BTreeMap<String, StorageType>,
    layouts: &mut BTreeMap<String, OperandLayout>,
    weights: &mut BTreeMap<String, PhysicalObjectSet>,
) -> Result<(), CodegenError> {
    // A tensor keeps the storage picked by the first kernel that binds it.
    if let Some(&s) = storage_of.get(&binding.tensor) {
        binding.storage = s;
        return Ok(());
    }
    let info = graph.tensor(&binding.tensor).ok_or_else(|| CodegenError::MissingDescriptor {
        operand: binding.operand.clone(),
        tensor: binding.tensor.clone(),
    })?;
    if binding.role == OperandRole::Weights {
        let values = weight_values(graph, &binding.tensor)?;
        let wl: WeightLayout = plan_weight_layout(WeightShape::from_logical(&info.shape), 1, &WeightLayout::DEFAULT_PERMUTATION)?;
        let set = if binding.storage == StorageType::TextureArray2d {
            rearrange_weights(&values, &wl)?
        } else {
            binding.storage = StorageType::Buffer1d;
            linearize_weights(&values, &wl)?
        };
        layouts.insert(binding.tensor.clone(), OperandLayout::of_set(&set));
        weights.insert(binding.tensor.clone(), set);
    } else {
        layouts.insert(
            binding.tensor.clone(),
            OperandLayout::tensor(info.shape, LayoutDescriptor::canonical(binding.storage)),
        );
    }
    storage_of.insert(binding.tensor.clone(), binding.storage);
    Ok(())
}

/// Selects, converts weights for and emits every node of `graph` in
/// execution order, and attaches the memory plan for that order.
pub fn specialize(
    graph: &GraphIR,
    profile: &DeviceProfile,
    stage: Stage,
    dialect: Dialect,
    options: &KernelOptions,
) -> Result<Specialization, CodegenError> {
    let order = graph.topo_order()?;
    let options = KernelOptions { stage, ..*options };
    let mut storage_of = BTreeMap::new();
    let mut layouts = BTreeMap::new();
    let mut weights = BTreeMap::new();
    let mut choices = Vec::with_capacity(order.len());
    let mut kernels = Vec::with_capacity(order.len());
    for &ni in &order {
        let mut choice = select_kernel(graph, ni, profile, stage)?;
        for b in &mut choice.bindings {
            assign_layout(graph, b, &mut storage_of, &mut layouts, &mut weights)?;
        }
        kernels.push(emit_kernel(&choice, &graph.nodes[ni], &layouts, dialect, &options)?);
        choices.push(choice);
    }
    let records = collect_usage(graph, &order)?;
    let plan = plan_greedy_by_size(&records, options.alignment)?;
    Ok(Specialization {
        kernels,
        choices,
        layouts,
        weights,
        records,
        plan,
    })
}

impl Specialization {
    /// Kernels whose choice places activation quantization in a separate pass.
    pub fn separate_quantize_kernels(&self) -> usize {
        self.choices.iter().filter(|c| c.quant == QuantPlacement::SeparateQuantizeKernel && c.op == "quantize").count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{fuse, GraphBuilder, TensorInit};
    use crate::tensor::DataType;
    use crate::layout::StorageType;

    fn fc_relu_graph() -> GraphIR {
        let mut g = GraphBuilder::new();
        g.input("x", &[1, 2, 8], DataType::F32);
        g.weight("w", &[4, 1, 1, 8], TensorInit::Uniform { seed: 1, scale: 0.5 });
        g.op("fc", OpKind::FullyConnected { bias: false, quant: MatmulQuant::None }, &["x", "w"]).unwrap();
        g.op("act", OpKind::Relu, &["fc"]).unwrap();
        g.output("act");
        g.build().unwrap()
    }

    #[test]
    fn fused_epilogue_has_one_site() {
        let (fused, _) = fuse(&fc_relu_graph());
        for dialect in Dialect::ALL {
            let spec = specialize(&fused, &DeviceProfile::generic(), Stage::Decode, dialect, &KernelOptions::default()).unwrap();
            assert_eq!(spec.kernels.len(), 1);
            let src = &spec.kernels[0].source;
            assert_eq!(src.matches("// epilogue\n").count(), 1, "{src}");
            assert!(!src.contains("{{"));
        }
    }

    #[test]
    fn bindings_do_not_depend_on_dialect() {
        let g = fc_relu_graph();
        let a = specialize(&g, &DeviceProfile::generic(), Stage::Prefill, Dialect::CStyleCompute, &KernelOptions::default()).unwrap();
        let b = specialize(&g, &DeviceProfile::generic(), Stage::Prefill, Dialect::WgslStyle, &KernelOptions::default()).unwrap();
        for (ka, kb) in a.kernels.iter().zip(&b.kernels) {
            assert_eq!(ka.bindings, kb.bindings);
            assert_ne!(ka.source, kb.source);
        }
        assert_eq!(a.layouts["w"].storage(), StorageType::TextureArray2d);
    }

    #[test]
    fn empty_graph_yields_no_kernels() {
        let g = GraphIR::new(Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let s = specialize(&g, &DeviceProfile::generic(), Stage::None, Dialect::CStyleCompute, &KernelOptions::default()).unwrap();
        assert!(s.kernels.is_empty());
        assert_eq!(s.plan.arena_size, 0);
    }

    #[test]
    fn missing_layout_is_a_binding_error() {
        let g = fc_relu_graph();
        let choice = select_kernel(&g, 1, &DeviceProfile::generic(), Stage::None).unwrap();
        let err = emit_kernel(&choice, &g.nodes[1], &BTreeMap::new(), Dialect::CStyleCompute, &KernelOptions::default()).unwrap_err();
        assert!(matches!(err, CodegenError::MissingDescriptor { .. }));
    }

    #[test]
    fn scan_finds_unbound_names() {
        let b = vec![KernelBinding {
            operand: "src".into(),
            tensor: "x".into(),
            role: OperandRole::Activation,
            storage: StorageType::Buffer1d,
            layout: String::new(),
            objects: 1,
        }];
        assert_eq!(unbound_operands("a = src_read(0); other_write(1, v);", &b), vec!["other".to_string()]);
    }
}

//! Read/Write helper emission. Every helper body is plain integer arithmetic
//! over named constants, so the interpreter in [`super::interp`] can replay it.

use serde::{Deserialize, Serialize};

use super::{CodegenError, Dialect};
use crate::layout::{LayoutDescriptor, LayoutToken, StorageType};
use crate::tensor::{LogicalShape, LANES};
use crate::virtualization::{IndexRule, PhysicalObjectSet, WeightLayout, WeightToken};

/// Shape plus index rule of one bound operand; the layout half of a
/// [`PhysicalObjectSet`] without any texel data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperandLayout {
    pub shape: LogicalShape,
    pub rule: IndexRule,
}

impl OperandLayout {
    pub fn tensor(shape: LogicalShape, descriptor: LayoutDescriptor) -> Self {
        OperandLayout {
            shape,
            rule: IndexRule::Single { descriptor },
        }
    }

    pub fn of_set(set: &PhysicalObjectSet) -> Self {
        OperandLayout {
            shape: set.shape,
            rule: set.rule.clone(),
        }
    }

    pub fn storage(&self) -> StorageType {
        match &self.rule {
            IndexRule::Single { descriptor } | IndexRule::SliceSplit { descriptor, .. } => descriptor.storage(),
            IndexRule::WeightSlicePairs { .. } => StorageType::TextureArray2d,
            IndexRule::WeightLinear { .. } => StorageType::Buffer1d,
        }
    }

    pub fn object_count(&self) -> usize {
        match &self.rule {
            IndexRule::SliceSplit { object_shapes, .. } => object_shapes.len(),
            _ => 1,
        }
    }

    /// Short text form used in kernel headers and reports.
    pub fn describe(&self) -> String {
        match &self.rule {
            IndexRule::Single { descriptor } => descriptor.name(),
            IndexRule::SliceSplit {
                descriptor,
                slices_per_object,
                object_shapes,
            } => format!("{}/split{}x{}", descriptor.name(), object_shapes.len(), slices_per_object),
            IndexRule::WeightSlicePairs { layout } => format!("slice-pairs/{}x{}", layout.g * layout.s_o, layout.s_i),
            IndexRule::WeightLinear { layout } => format!(
                "linear/{}",
                layout.permutation.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

/// One term of a mixed-radix index: `index = index * ext + var`.
struct Term {
    var: String,
    ext: String,
    size: Option<usize>,
    skip: bool,
    uses_s: bool,
}

fn needs_parens(e: &str) -> bool {
    let mut depth = 0i32;
    for (i, ch) in e.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            '+' | '-' if depth == 0 && i > 0 => return true,
            _ => {}
        }
    }
    false
}

fn wrap(e: &str) -> String {
    if needs_parens(e) {
        format!("({e})")
    } else {
        e.to_string()
    }
}

fn mixed(terms: &[Term]) -> String {
    let mut e = String::new();
    for t in terms.iter().filter(|t| !t.skip) {
        e = if e.is_empty() {
            t.var.clone()
        } else {
            format!("{}*{} + {}", wrap(&e), t.ext, t.var)
        };
    }
    if e.is_empty() {
        "0".into()
    } else {
        e
    }
}

fn product(terms: &[Term]) -> Option<usize> {
    terms.iter().map(|t| t.size).try_fold(1usize, |acc, s| s.map(|s| acc * s))
}

/// Named integer constants available to a helper body.
struct Consts(Vec<(String, i64)>);

impl Consts {
    fn used_by(&self, exprs: &[String]) -> Vec<(String, i64)> {
        let idents: Vec<String> = exprs.iter().flat_map(|e| identifiers(e)).collect();
        self.0.iter().filter(|(n, _)| idents.contains(n)).cloned().collect()
    }
}

fn identifiers(e: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in e.chars().chain(std::iter::once(' ')) {
        if ch.is_ascii_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else {
            if cur.chars().next().is_some_and(|c| !c.is_ascii_digit()) {
                out.push(cur.clone());
            }
            cur.clear();
        }
    }
    out
}

const PARAMS: [&str; 5] = ["b", "x", "y", "d", "s"];

fn fn_header(dialect: Dialect, ret: &str, name: &str, params: &[&str]) -> String {
    match dialect {
        Dialect::CStyleCompute => {
            let ps: Vec<String> = params.iter().map(|p| format!("int {p}")).collect();
            format!("{ret} {name}({}) {{\n", ps.join(", "))
        }
        Dialect::WgslStyle => {
            let ps: Vec<String> = params.iter().map(|p| format!("{p}: i32")).collect();
            format!("fn {name}({}) -> {ret} {{\n", ps.join(", "))
        }
    }
}

fn int_fn(dialect: Dialect, name: &str, params: &[&str], consts: &Consts, result: &[String]) -> String {
    let (ret, ctor) = match (dialect, result.len()) {
        (Dialect::CStyleCompute, 1) => ("int", None),
        (Dialect::CStyleCompute, 2) => ("int2", Some("(int2)")),
        (Dialect::CStyleCompute, _) => ("int4", Some("(int4)")),
        (Dialect::WgslStyle, 1) => ("i32", None),
        (Dialect::WgslStyle, 2) => ("vec2<i32>", Some("vec2<i32>")),
        (Dialect::WgslStyle, _) => ("vec3<i32>", Some("vec3<i32>")),
    };
    let mut out = fn_header(dialect, ret, name, params);
    for (k, v) in consts.used_by(result) {
        match dialect {
            Dialect::CStyleCompute => out.push_str(&format!("  const int {k} = {v};\n")),
            Dialect::WgslStyle => out.push_str(&format!("  let {k}: i32 = {v};\n")),
        }
    }
    let value = match ctor {
        None => result[0].clone(),
        Some(c) => {
            let mut parts = result.to_vec();
            if dialect == Dialect::CStyleCompute && parts.len() == 3 {
                parts.push("0".into());
            }
            format!("{c}({})", parts.join(", "))
        }
    };
    out.push_str(&format!("  return {value};\n}}\n"));
    out
}

/// Physical coordinate components of a layout-based operand.
fn layout_coord(shape: &LogicalShape, descriptor: &LayoutDescriptor, split: Option<usize>) -> (Vec<String>, Consts) {
    let storage = descriptor.storage();
    let (s_var, s_ext) = match split {
        Some(_) => ("s % PER".to_string(), "min(PER, S - s / PER*PER)".to_string()),
        None => ("s".to_string(), "S".to_string()),
    };
    let terms: Vec<Term> = descriptor.permutation()[..5]
        .iter()
        .map(|&tok| {
            let (var, ext, size) = match tok {
                LayoutToken::B => ("b".to_string(), "B".to_string(), shape.b),
                LayoutToken::H => ("y".into(), "H".into(), shape.h),
                LayoutToken::W => ("x".into(), "W".into(), shape.w),
                LayoutToken::D => ("d".into(), "D".into(), shape.d),
                LayoutToken::S => (s_var.clone(), s_ext.clone(), shape.slices()),
                LayoutToken::C4 => unreachable!("C4 is always innermost"),
            };
            Term {
                var,
                ext,
                size: (tok != LayoutToken::S || split.is_none()).then_some(size),
                skip: tok == LayoutToken::D && shape.d == 1,
                uses_s: tok == LayoutToken::S,
            }
        })
        .collect();
    let width = shape.w * shape.b * shape.d;
    let mut consts = vec![
        ("B".to_string(), shape.b as i64),
        ("H".into(), shape.h as i64),
        ("W".into(), shape.w as i64),
        ("D".into(), shape.d as i64),
        ("S".into(), shape.slices() as i64),
    ];
    if let Some(per) = split {
        consts.push(("PER".into(), per as i64));
    }
    consts.push(("WIDTH".into(), width as i64));
    consts.push(("HEIGHT".into(), shape.h as i64));

    // A segment fits a physical axis when its extent product matches exactly
    // and it does not carry the (possibly object-dependent) slice term.
    let fits = |seg: &[Term], extent: usize| !seg.iter().any(|t| t.uses_s) && product(seg) == Some(extent);
    let n = terms.len();
    let result = match storage {
        StorageType::Buffer1d | StorageType::ImageBuffer1d => vec![mixed(&terms)],
        StorageType::Texture2d => match (0..=n).rev().find(|&k| fits(&terms[k..], width)) {
            Some(k) => vec![mixed(&terms[k..]), mixed(&terms[..k])],
            None => {
                let l = wrap(&mixed(&terms));
                vec![format!("{l} % WIDTH"), format!("{l} / WIDTH")]
            }
        },
        StorageType::Texture3d | StorageType::TextureArray2d => {
            let split = (0..=n).rev().find_map(|k1| {
                if !fits(&terms[k1..], width) {
                    return None;
                }
                (0..=k1).rev().find(|&k2| fits(&terms[k2..k1], shape.h)).map(|k2| (k1, k2))
            });
            match split {
                Some((k1, k2)) => vec![mixed(&terms[k1..]), mixed(&terms[k2..k1]), mixed(&terms[..k2])],
                None => {
                    let l = wrap(&mixed(&terms));
                    vec![
                        format!("{l} % WIDTH"),
                        format!("{l} / WIDTH % HEIGHT"),
                        format!("{l} / (WIDTH*HEIGHT)"),
                    ]
                }
            }
        }
    };
    (result, Consts(consts))
}

fn hwd_terms(shape: &LogicalShape) -> Vec<Term> {
    let t = |var: &str, ext: &str, skip: bool| Term {
        var: var.into(),
        ext: ext.into(),
        size: None,
        skip,
        uses_s: false,
    };
    vec![t("y", "H", false), t("x", "W", false), t("d", "D", shape.d == 1)]
}

fn weight_consts(shape: &LogicalShape, layout: &WeightLayout) -> Consts {
    Consts(vec![
        ("W".into(), shape.w as i64),
        ("D".into(), shape.d as i64),
        ("G".into(), layout.g as i64),
        ("S_O".into(), layout.s_o as i64),
        ("HWD".into(), layout.hwd as i64),
        ("S_I".into(), layout.s_i as i64),
    ])
}

fn linear_index_expr(shape: &LogicalShape, layout: &WeightLayout) -> String {
    let hwd = mixed(&hwd_terms(shape));
    let terms: Vec<Term> = layout
        .permutation
        .iter()
        .map(|&t| {
            let (var, ext) = match t {
                WeightToken::G => ("b / 4 / S_O".to_string(), "G"),
                WeightToken::SO => ("b / 4 % S_O".into(), "S_O"),
                WeightToken::O4 => ("b % 4".into(), "4"),
                WeightToken::HWD => (hwd.clone(), "HWD"),
                WeightToken::SI => ("c / 4".into(), "S_I"),
                WeightToken::I4 => ("c % 4".into(), "4"),
            };
            Term {
                var,
                ext: ext.into(),
                size: None,
                skip: t == WeightToken::G && layout.g == 1,
                uses_s: false,
            }
        })
        .collect();
    mixed(&terms)
}

/// Integer helpers only: `{op}_coord` plus `{op}_object` or `{op}_index`.
fn index_helpers(operand: &str, layout: &OperandLayout, dialect: Dialect) -> String {
    let shape = &layout.shape;
    match &layout.rule {
        IndexRule::Single { descriptor } => {
            let (result, consts) = layout_coord(shape, descriptor, None);
            int_fn(dialect, &format!("{operand}_coord"), &PARAMS, &consts, &result)
        }
        IndexRule::SliceSplit {
            descriptor,
            slices_per_object,
            ..
        } => {
            let per = Consts(vec![("PER".into(), *slices_per_object as i64)]);
            let mut out = int_fn(dialect, &format!("{operand}_object"), &["s"], &per, &["s / PER".to_string()]);
            let (result, consts) = layout_coord(shape, descriptor, Some(*slices_per_object));
            out.push_str(&int_fn(dialect, &format!("{operand}_coord"), &PARAMS, &consts, &result));
            out
        }
        IndexRule::WeightSlicePairs { layout: wl } => {
            let consts = weight_consts(shape, wl);
            let mut out = int_fn(
                dialect,
                &format!("{operand}_object"),
                &["s_o", "s_i"],
                &consts,
                &["s_o*S_I + s_i".to_string()],
            );
            let coord = vec![format!("b % {LANES}"), mixed(&hwd_terms(shape))];
            out.push_str(&int_fn(dialect, &format!("{operand}_coord"), &PARAMS, &consts, &coord));
            out
        }
        IndexRule::WeightLinear { layout: wl } => {
            let consts = weight_consts(shape, wl);
            let expr = linear_index_expr(shape, wl);
            int_fn(dialect, &format!("{operand}_index"), &["b", "x", "y", "d", "c"], &consts, &[expr])
        }
    }
}

fn object_name(operand: &str, layout: &OperandLayout, k: usize) -> String {
    if layout.object_count() > 1 {
        format!("{operand}_{k}")
    } else {
        operand.to_string()
    }
}

const ARGS: &str = "b, x, y, d, s";

fn c_read(storage: StorageType, obj: &str, coord: &str) -> String {
    match storage {
        StorageType::Buffer1d => format!("{obj}[{coord}]"),
        StorageType::ImageBuffer1d => format!("read_imagef({obj}, {coord})"),
        _ => format!("read_imagef({obj}, smp, {coord})"),
    }
}

fn c_write(storage: StorageType, obj: &str, coord: &str) -> String {
    match storage {
        StorageType::Buffer1d => format!("{obj}[{coord}] = (v)"),
        _ => format!("write_imagef({obj}, {coord}, (v))"),
    }
}

fn wgsl_read(storage: StorageType, obj: &str, coord: &str) -> String {
    match storage {
        StorageType::Buffer1d => format!("{obj}[{coord}]"),
        StorageType::TextureArray2d => format!("textureLoad({obj}, {coord}.xy, {coord}.z, 0)"),
        _ => format!("textureLoad({obj}, {coord}, 0)"),
    }
}

fn wgsl_write(storage: StorageType, obj: &str, coord: &str) -> String {
    match storage {
        StorageType::Buffer1d => format!("{obj}[{coord}] = v"),
        StorageType::TextureArray2d => format!("textureStore({obj}, {coord}.xy, {coord}.z, v)"),
        _ => format!("textureStore({obj}, {coord}, v)"),
    }
}

fn rw_helpers(operand: &str, layout: &OperandLayout, dialect: Dialect, read: bool, write: bool) -> String {
    let storage = layout.storage();
    let coord_call = format!("{operand}_coord({ARGS})");
    let mut out = String::new();
    match (dialect, &layout.rule) {
        (Dialect::CStyleCompute, IndexRule::WeightSlicePairs { .. }) => {
            out.push_str(&format!(
                "#define {operand}_read({ARGS}) read_imagef({operand}, smp, (int4)({coord_call}, {operand}_object((b) / 4, s), 0))\n"
            ));
        }
        (Dialect::WgslStyle, IndexRule::WeightSlicePairs { .. }) => {
            out.push_str(&format!(
                "fn {operand}_read(b: i32, x: i32, y: i32, d: i32, s: i32) -> vec4<f32> {{\n  return textureLoad({operand}, {coord_call}, {operand}_object(b / 4, s), 0);\n}}\n"
            ));
        }
        (Dialect::CStyleCompute, IndexRule::WeightLinear { .. }) => {
            let lanes: Vec<String> = (0..LANES)
                .map(|k| format!("{operand}[{operand}_index(b, x, y, d, (s)*4 + {k})]"))
                .collect();
            out.push_str(&format!("#define {operand}_read({ARGS}) (float4)({})\n", lanes.join(", ")));
        }
        (Dialect::WgslStyle, IndexRule::WeightLinear { .. }) => {
            let lanes: Vec<String> = (0..LANES)
                .map(|k| format!("{operand}[{operand}_index(b, x, y, d, s*4 + {k})]"))
                .collect();
            out.push_str(&format!(
                "fn {operand}_read(b: i32, x: i32, y: i32, d: i32, s: i32) -> vec4<f32> {{\n  return vec4<f32>({});\n}}\n",
                lanes.join(", ")
            ));
        }
        (Dialect::CStyleCompute, _) => {
            let n = layout.object_count();
            if read {
                let body = if n == 1 {
                    c_read(storage, operand, &coord_call)
                } else {
                    let mut e = c_read(storage, &object_name(operand, layout, n - 1), &coord_call);
                    for k in (0..n - 1).rev() {
                        e = format!(
                            "{operand}_object(s) == {k} ? {} : {e}",
                            c_read(storage, &object_name(operand, layout, k), &coord_call)
                        );
                    }
                    format!("({e})")
                };
                out.push_str(&format!("#define {operand}_read({ARGS}) {body}\n"));
            }
            if write {
                let body = if n == 1 {
                    c_write(storage, operand, &coord_call)
                } else {
                    let arms: Vec<String> = (0..n)
                        .map(|k| {
                            format!(
                                "if ({operand}_object(s) == {k}) {{ {}; }}",
                                c_write(storage, &object_name(operand, layout, k), &coord_call)
                            )
                        })
                        .collect();
                    format!("do {{ {} }} while (0)", arms.join(" else "))
                };
                out.push_str(&format!("#define {operand}_write({ARGS}, v) {body}\n"));
            }
        }
        (Dialect::WgslStyle, _) => {
            let n = layout.object_count();
            let sig = "b: i32, x: i32, y: i32, d: i32, s: i32";
            if read {
                out.push_str(&format!("fn {operand}_read({sig}) -> vec4<f32> {{\n  let c = {coord_call};\n"));
                for k in 0..n - 1 {
                    out.push_str(&format!(
                        "  if ({operand}_object(s) == {k}) {{\n    return {};\n  }}\n",
                        wgsl_read(storage, &object_name(operand, layout, k), "c")
                    ));
                }
                out.push_str(&format!(
                    "  return {};\n}}\n",
                    wgsl_read(storage, &object_name(operand, layout, n - 1), "c")
                ));
            }
            if write {
                out.push_str(&format!("fn {operand}_write({sig}, v: vec4<f32>) {{\n  let c = {coord_call};\n"));
                for k in 0..n {
                    let stmt = wgsl_write(storage, &object_name(operand, layout, k), "c");
                    if n == 1 {
                        out.push_str(&format!("  {stmt};\n"));
                    } else {
                        out.push_str(&format!("  if ({operand}_object(s) == {k}) {{\n    {stmt};\n  }}\n"));
                    }
                }
                out.push_str("}\n");
            }
        }
    }
    out
}

pub(crate) fn check_supported(storage: StorageType, dialect: Dialect) -> Result<(), CodegenError> {
    if dialect == Dialect::WgslStyle && storage == StorageType::ImageBuffer1d {
        return Err(CodegenError::Unsupported {
            storage: storage.name().to_string(),
            dialect: dialect.name().to_string(),
        });
    }
    Ok(())
}

/// Emits the index helpers plus a read helper for `operand`, and a write
/// helper when `writable` is set.
pub fn emit_operand_helpers(operand: &str, layout: &OperandLayout, dialect: Dialect, writable: bool) -> Result<String, CodegenError> {
    check_supported(layout.storage(), dialect)?;
    let mut out = index_helpers(operand, layout, dialect);
    out.push_str(&rw_helpers(operand, layout, dialect, !writable, writable));
    Ok(out)
}

/// Target of [`emit_access_helpers`].
#[derive(Debug, Clone, Copy)]
pub enum AccessTarget<'a> {
    Layout {
        shape: &'a LogicalShape,
        descriptor: &'a LayoutDescriptor,
    },
    Objects(&'a PhysicalObjectSet),
}

/// Source fragment with the coordinate helpers and Read/Write helpers for one operand.
pub fn emit_access_helpers(operand: &str, target: AccessTarget<'_>, dialect: Dialect) -> Result<String, CodegenError> {
    let layout = match target {
        AccessTarget::Layout { shape, descriptor } => OperandLayout::tensor(*shape, descriptor.clone()),
        AccessTarget::Objects(set) => OperandLayout::of_set(set),
    };
    check_supported(layout.storage(), dialect)?;
    let mut out = index_helpers(operand, &layout, dialect);
    let writable = !matches!(layout.rule, IndexRule::WeightSlicePairs { .. } | IndexRule::WeightLinear { .. });
    out.push_str(&rw_helpers(operand, &layout, dialect, true, writable));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codegen::interp::extract_helper;
    use crate::layout::translate_coords;

    #[test]
    fn canonical_buffer_and_texture_expressions() {
        let shape = LogicalShape::bhwc(2, 3, 4, 5);
        let buf = LayoutDescriptor::canonical(StorageType::Buffer1d);
        let src = emit_access_helpers("src", AccessTarget::Layout { shape: &shape, descriptor: &buf }, Dialect::CStyleCompute).unwrap();
        assert!(src.contains("((s*H + y)*W + x)*B + b"), "{src}");
        let tex = LayoutDescriptor::canonical(StorageType::Texture2d);
        let src = emit_access_helpers("src", AccessTarget::Layout { shape: &shape, descriptor: &tex }, Dialect::CStyleCompute).unwrap();
        assert!(src.contains("(int2)(x*B + b, y*S + s)"), "{src}");
        let t3 = LayoutDescriptor::canonical(StorageType::Texture3d);
        let src = emit_access_helpers("src", AccessTarget::Layout { shape: &shape, descriptor: &t3 }, Dialect::WgslStyle).unwrap();
        assert!(src.contains("vec3<i32>(x*B + b, y, s)"), "{src}");
    }

    #[test]
    fn texture_2d_helper_matches_translation() {
        let shape = LogicalShape::bhwc(2, 3, 4, 5);
        let desc = LayoutDescriptor::canonical(StorageType::Texture2d);
        let src = emit_access_helpers("t", AccessTarget::Layout { shape: &shape, descriptor: &desc }, Dialect::WgslStyle).unwrap();
        let h = extract_helper(&src, "t_coord", Dialect::WgslStyle).unwrap();
        for [b, y, x, _, c] in shape.coords() {
            let s = c / LANES;
            let want = translate_coords(b, x, y, s, &shape, StorageType::Texture2d).unwrap().components();
            let got = h.call(&[b as i64, x as i64, y as i64, 0, s as i64]).unwrap();
            assert_eq!(got, want.iter().map(|&v| v as i64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn image_buffer_is_rejected_for_wgsl() {
        let shape = LogicalShape::bhwc(1, 1, 1, 4);
        let desc = LayoutDescriptor::canonical(StorageType::ImageBuffer1d);
        let err = emit_access_helpers("a", AccessTarget::Layout { shape: &shape, descriptor: &desc }, Dialect::WgslStyle).unwrap_err();
        assert!(matches!(err, CodegenError::Unsupported { .. }));
        assert!(emit_access_helpers("a", AccessTarget::Layout { shape: &shape, descriptor: &desc }, Dialect::CStyleCompute).is_ok());
    }
}

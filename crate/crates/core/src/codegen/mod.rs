//! Kernel source generation for two compute dialects.
//!
//! Sources are built by filling named `{{placeholder}}` slots in fixed
//! templates. The emitted text is never compiled here; the integer helpers it
//! contains are checked by replaying them with [`interp`].

mod access;
pub mod interp;
mod kernel;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use access::{emit_access_helpers, emit_operand_helpers, AccessTarget, OperandLayout};
pub use kernel::{emit_kernel, specialize, unbound_operands, KernelBinding, KernelOptions, KernelSource, Specialization};

use crate::graph::{GraphError, SelectError};
use crate::memory::PlanError;
use crate::virtualization::VirtError;

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("storage `{storage}` cannot be expressed in dialect `{dialect}`")]
    Unsupported { storage: String, dialect: String },
    #[error("operand `{operand}` (tensor `{tensor}`) has no layout")]
    MissingDescriptor { operand: String, tensor: String },
    #[error("operand `{operand}` is bound as {binding} but its layout is {layout}")]
    StorageMismatch { operand: String, binding: String, layout: String },
    #[error("template left placeholder `{0}` unresolved")]
    Template(String),
    #[error("kernel body references unbound operands: {0:?}")]
    Incomplete(Vec<String>),
    #[error("interpreter: {0}")]
    Interp(String),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Virt(#[from] VirtError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dialect {
    /// OpenCL-like C with `__kernel` entry points and image objects.
    #[default]
    CStyleCompute,
    /// WGSL-like syntax with module-scope bindings.
    WgslStyle,
}

impl Dialect {
    pub const ALL: [Dialect; 2] = [Dialect::CStyleCompute, Dialect::WgslStyle];

    pub fn name(self) -> &'static str {
        match self {
            Dialect::CStyleCompute => "c-style-compute",
            Dialect::WgslStyle => "wgsl-style",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Dialect::CStyleCompute => "cl",
            Dialect::WgslStyle => "wgsl",
        }
    }

    /// Float literal in this dialect's spelling, parenthesized when negative.
    pub fn lit(self, v: f32) -> String {
        let mut s = format!("{v:?}");
        if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
            s.push_str(".0");
        }
        if self == Dialect::CStyleCompute {
            s.push('f');
        }
        if v.is_sign_negative() {
            format!("({s})")
        } else {
            s
        }
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dialect {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Dialect::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown dialect `{s}` (expected c-style-compute or wgsl-style)"))
    }
}

/// Replaces every `{{name}}` with its value; any slot left over is an error.
pub fn render(template: &str, values: &BTreeMap<&str, String>) -> Result<String, CodegenError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| CodegenError::Template(after.chars().take(20).collect()))?;
        let key = &after[..end];
        let value = values.get(key).ok_or_else(|| CodegenError::Template(key.to_string()))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_and_rejects() {
        let vals: BTreeMap<&str, String> = [("a", "1".to_string())].into();
        assert_eq!(render("x={{a}};", &vals).unwrap(), "x=1;");
        assert!(matches!(render("{{b}}", &vals), Err(CodegenError::Template(k)) if k == "b"));
    }

    #[test]
    fn literals() {
        assert_eq!(Dialect::CStyleCompute.lit(0.5), "0.5f");
        assert_eq!(Dialect::WgslStyle.lit(2.0), "2.0");
        assert_eq!(Dialect::WgslStyle.lit(-1.5), "(-1.5)");
        assert_eq!(Dialect::CStyleCompute.lit(1e-6), "1e-6f");
    }
}

//! Tensor value files: a JSON object keyed by tensor id.
//!
//! ```json
//! {
//!   "x": {"shape": [1, 2, 2], "values": [1.00000000e0, -2.50000000e-1, 0.00000000e0, 3.00000000e0]}
//! }
//! ```
//!
//! Values are written with nine significant digits, which round-trips every
//! finite f32 exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Deserialize;
use thiserror::Error;

use crate::refexec::TensorMap;
use crate::tensor::{LogicalShape, LogicalTensor, TensorError};

#[derive(Debug, Error)]
pub enum ValuesError {
    #[error("{line}:{column} at `{path}`: {message}")]
    Parse {
        line: usize,
        column: usize,
        path: String,
        message: String,
    },
    #[error("tensor `{tensor}`: {source}")]
    Shape { tensor: String, source: TensorError },
    #[error("tensor `{tensor}` holds a non-finite value at index {index}")]
    NonFinite { tensor: String, index: usize },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    shape: Vec<usize>,
    values: Vec<f32>,
}

pub fn parse_values(text: &str) -> Result<TensorMap, ValuesError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let entries: BTreeMap<String, Entry> = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        ValuesError::Parse {
            line: inner.line(),
            column: inner.column(),
            path,
            message: inner.to_string(),
        }
    })?;
    entries
        .into_iter()
        .map(|(id, e)| {
            let t = LogicalShape::from_dims(&e.shape)
                .and_then(|s| LogicalTensor::from_f32(s, e.values))
                .map_err(|source| ValuesError::Shape {
                    tensor: id.clone(),
                    source,
                })?;
            Ok((id, t))
        })
        .collect()
}

/// Writes `tensors` with the dimension list chosen by `dims_of`.
pub fn format_values(tensors: &TensorMap, dims_of: impl Fn(&str, &LogicalShape) -> Vec<usize>) -> Result<String, ValuesError> {
    let mut out = String::from("{\n");
    for (n, (id, t)) in tensors.iter().enumerate() {
        if let Some(index) = t.values().iter().position(|v| !v.is_finite()) {
            return Err(ValuesError::NonFinite { tensor: id.clone(), index });
        }
        let dims = dims_of(id, &t.shape());
        let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        let vals: Vec<String> = t.values().iter().map(|v| format!("{v:.8e}")).collect();
        let sep = if n + 1 == tensors.len() { "" } else { "," };
        let _ = writeln!(
            out,
            "  {}: {{\"shape\": [{}], \"values\": [{}]}}{sep}",
            serde_json::to_string(id).expect("string serializes"),
            dims.join(", "),
            vals.join(", ")
        );
    }
    out.push_str("}\n");
    Ok(out)
}

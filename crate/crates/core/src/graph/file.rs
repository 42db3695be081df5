//! JSON graph file format.
//!
//! ```json
//! {
//!   "tensors": [
//!     {"id": "x", "shape": [1, 4, 4, 8], "dtype": "f32", "role": "input"},
//!     {"id": "w", "shape": [8, 1, 1, 8], "role": "weight", "init": {"uniform": {"seed": 1, "scale": 0.5}}},
//!     {"id": "y", "shape": [1, 4, 4, 8], "role": "output"}
//!   ],
//!   "nodes": [
//!     {"id": "fc", "kind": "fully_connected", "attrs": {"bias": false}, "inputs": ["x", "w"], "outputs": ["y"]}
//!   ],
//!   "inputs": ["x"],
//!   "outputs": ["y"]
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphError, GraphIR, Node, TensorInfo, TensorInit, TensorRole};
use crate::tensor::DataType;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub tensors: Vec<TensorEntry>,
    pub nodes: Vec<Node>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub id: String,
    pub shape: Vec<usize>,
    #[serde(default)]
    pub dtype: DataType,
    pub role: TensorRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<TensorInit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f32>>,
}

pub fn parse_graph(path: impl AsRef<Path>) -> Result<GraphIR, GraphError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| GraphError::Parse {
        line: 0,
        column: 0,
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_graph_str(&text)
}

pub fn parse_graph_str(text: &str) -> Result<GraphIR, GraphError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: GraphFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        GraphError::Parse {
            line: inner.line(),
            column: inner.column(),
            path,
            message: inner.to_string(),
        }
    })?;
    file.into_graph()
}

impl GraphFile {
    pub fn into_graph(self) -> Result<GraphIR, GraphError> {
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for e in self.tensors {
            let mut t = TensorInfo::new(e.id, e.shape, e.dtype, e.role)?;
            let count = t.shape.element_count();
            t.data = match (&e.init, e.values) {
                (Some(_), Some(_)) => {
                    return Err(GraphError::InvalidTensor {
                        tensor: t.id,
                        message: "give either `init` or `values`, not both".into(),
                    })
                }
                (Some(init), None) => Some(init.materialize(count)),
                (None, Some(v)) => {
                    if v.len() != count {
                        return Err(GraphError::InvalidTensor {
                            tensor: t.id,
                            message: format!("`values` has {} entries, shape needs {count}", v.len()),
                        });
                    }
                    Some(v)
                }
                (None, None) => None,
            };
            if t.data.is_some() && t.role != TensorRole::Weight {
                return Err(GraphError::InvalidTensor {
                    tensor: t.id,
                    message: "only weights may carry values".into(),
                });
            }
            t.init = e.init;
            tensors.push(t);
        }
        let graph = GraphIR::new(tensors, self.nodes, self.inputs, self.outputs);
        graph.validate()?;
        Ok(graph)
    }

    pub fn from_graph(graph: &GraphIR) -> Self {
        let tensors = graph
            .tensors
            .iter()
            .map(|t| TensorEntry {
                id: t.id.clone(),
                shape: t.dims.clone(),
                dtype: t.dtype,
                role: t.role,
                init: t.init.clone(),
                values: if t.init.is_some() { None } else { t.data.clone() },
            })
            .collect();
        GraphFile {
            tensors,
            nodes: graph.nodes.clone(),
            inputs: graph.inputs.clone(),
            outputs: graph.outputs.clone(),
        }
    }
}

pub fn write_graph(graph: &GraphIR) -> String {
    let mut s = serde_json::to_string_pretty(&GraphFile::from_graph(graph)).expect("graph serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
      "tensors": [
        {"id": "x", "shape": [1, 2, 2, 4], "role": "input"},
        {"id": "y", "shape": [1, 2, 2, 4], "role": "output"}
      ],
      "nodes": [{"id": "r", "kind": "relu", "inputs": ["x"], "outputs": ["y"]}],
      "inputs": ["x"],
      "outputs": ["y"]
    }"#;

    #[test]
    fn minimal_file() {
        let g = parse_graph_str(MINIMAL).unwrap();
        assert_eq!(g.nodes.len(), 1);
        let again = parse_graph_str(&write_graph(&g)).unwrap();
        assert_eq!(again, g);
    }

    #[test]
    fn undefined_tensor_is_named() {
        let text = MINIMAL.replace(r#""inputs": ["x"], "outputs": ["y"]}"#, r#""inputs": ["ghost"], "outputs": ["y"]}"#);
        match parse_graph_str(&text) {
            Err(GraphError::DanglingEdge { tensor, .. }) => assert_eq!(tensor, "ghost"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_field_reports_path() {
        let text = MINIMAL.replace(r#""shape": [1, 2, 2, 4], "role": "input""#, r#""shape": "wide", "role": "input""#);
        match parse_graph_str(&text) {
            Err(GraphError::Parse { path, line, .. }) => {
                assert_eq!(path, "tensors[0].shape");
                assert!(line > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn weights_need_data() {
        let text = r#"{
          "tensors": [
            {"id": "x", "shape": [1, 1, 1, 4], "role": "input"},
            {"id": "w", "shape": [4, 1, 1, 4], "role": "weight"},
            {"id": "y", "shape": [1, 1, 1, 4], "role": "output"}
          ],
          "nodes": [{"id": "fc", "kind": "fully_connected", "inputs": ["x", "w"], "outputs": ["y"]}],
          "inputs": ["x"], "outputs": ["y"]
        }"#;
        let r = parse_graph_str(text);
        assert!(matches!(r, Err(GraphError::InvalidTensor { .. })), "{r:?}");
    }
}

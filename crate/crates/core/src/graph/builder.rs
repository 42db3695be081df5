use super::{infer_node, GraphError, GraphIR, Node, OpKind, TensorInfo, TensorInit, TensorRole, WeightRole};
use crate::tensor::DataType;

/// Incremental graph construction with shape inference.
///
/// Single-output nodes name their output after the node id; multi-output
/// nodes use `<id>_0`, `<id>_1`, ...
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: GraphIR,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, id: &str, dims: &[usize], dtype: DataType) -> String {
        let t = TensorInfo::new(id, dims.to_vec(), dtype, TensorRole::Input).expect("valid input dims");
        self.graph.add_tensor(t);
        self.graph.inputs.push(id.to_string());
        id.to_string()
    }

    pub fn weight(&mut self, id: &str, dims: &[usize], init: TensorInit) -> String {
        let mut t = TensorInfo::new(id, dims.to_vec(), DataType::F32, TensorRole::Weight).expect("valid weight dims");
        t.data = Some(init.materialize(t.shape.element_count()));
        t.init = Some(init);
        self.graph.add_tensor(t);
        id.to_string()
    }

    pub fn weight_values(&mut self, id: &str, dims: &[usize], values: Vec<f32>) -> String {
        let mut t = TensorInfo::new(id, dims.to_vec(), DataType::F32, TensorRole::Weight).expect("valid weight dims");
        assert_eq!(values.len(), t.shape.element_count(), "weight `{id}` value count");
        t.data = Some(values);
        self.graph.add_tensor(t);
        id.to_string()
    }

    pub fn op(&mut self, id: &str, kind: OpKind, inputs: &[&str]) -> Result<Vec<String>, GraphError> {
        self.op_with_role(id, kind, inputs, None)
    }

    pub fn op_with_role(
        &mut self,
        id: &str,
        kind: OpKind,
        inputs: &[&str],
        role: Option<WeightRole>,
    ) -> Result<Vec<String>, GraphError> {
        let mut node = Node::new(id, kind, inputs.iter().map(|s| s.to_string()).collect(), Vec::new());
        node.role = role;
        let inferred = infer_node(&self.graph, &node)?;
        let names: Vec<String> = if inferred.len() == 1 {
            vec![id.to_string()]
        } else {
            (0..inferred.len()).map(|k| format!("{id}_{k}")).collect()
        };
        for (name, (shape, dtype)) in names.iter().zip(inferred) {
            let dims = shape_dims(&shape);
            let mut t = TensorInfo::new(name.clone(), dims, dtype, TensorRole::Intermediate)?;
            t.shape = shape;
            self.graph.add_tensor(t);
        }
        node.outputs = names.clone();
        self.graph.nodes.push(node);
        Ok(names)
    }

    /// Marks a produced tensor as a graph output.
    pub fn output(&mut self, id: &str) {
        if let Some(t) = self.graph.tensor_mut(id) {
            t.role = TensorRole::Output;
        }
        self.graph.outputs.push(id.to_string());
    }

    pub fn build(self) -> Result<GraphIR, GraphError> {
        self.graph.validate()?;
        Ok(self.graph)
    }
}

/// Shortest dimension list that reproduces `shape` under the rank semantics.
pub(crate) fn shape_dims(shape: &crate::tensor::LogicalShape) -> Vec<usize> {
    if shape.d != 1 {
        vec![shape.b, shape.h, shape.w, shape.d, shape.c]
    } else if shape.b != 1 {
        vec![shape.b, shape.h, shape.w, shape.c]
    } else {
        vec![shape.h, shape.w, shape.c]
    }
}

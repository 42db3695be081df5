//! Regenerates `fixtures/`: graph files, input values, device profiles and
//! the LLM block manifest.
//!
//! cargo run --example gen_fixtures

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorvirt::graph::{samples, write_graph, GraphIR};
use tensorvirt::refexec::TensorMap;
use tensorvirt::tensor::LogicalTensor;
use tensorvirt::values::format_values;

const DEVICES: [(&str, &str); 2] = [
    (
        "phone_gpu.toml",
        r#"name = "phone-gpu"
flags = ["int8-dot", "fp16-storage"]
winograd = true

[storage]
default = "texture-2d"
rms_norm = "buffer-1d"

[weights]
conv-based = "texture-array-2d"
fc-based = "buffer-1d"
"#,
    ),
    (
        "future_gpu.toml",
        r#"name = "future-gpu"
flags = ["int8-dot", "ray-tracing"]

[storage]
default = "texture-3d"
"#,
    ),
];

fn random_inputs(graph: &GraphIR, seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .inputs
        .iter()
        .map(|id| {
            let shape = graph.tensor(id).unwrap().shape;
            let t = LogicalTensor::from_fn(shape, |_| (rng.gen_range(-1000..=1000) as f32) / 500.0);
            (id.clone(), t)
        })
        .collect()
}

fn manifest(graph: &GraphIR) -> String {
    let edges: usize = graph.nodes.iter().map(|n| n.inputs.len() + n.outputs.len()).sum();
    let weights = graph.tensors.iter().filter(|t| t.data.is_some()).count();
    let v = serde_json::json!({
        "nodes": graph.nodes.len(),
        "tensors": graph.tensors.len(),
        "edges": edges,
        "weights": weights,
        "inputs": graph.inputs,
        "outputs": graph.outputs,
    });
    serde_json::to_string_pretty(&v).unwrap() + "\n"
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(root.join("inputs"))?;
    fs::create_dir_all(root.join("devices"))?;
    for (k, (name, graph)) in samples::fixtures()?.into_iter().enumerate() {
        fs::write(root.join(format!("{name}.json")), write_graph(&graph))?;
        let inputs = random_inputs(&graph, 1000 + k as u64);
        let text = format_values(&inputs, |id, _| graph.tensor(id).unwrap().dims.clone())?;
        fs::write(root.join("inputs").join(format!("{name}.json")), text)?;
        if name == "llm_block" {
            fs::write(root.join("llm_block.manifest.json"), manifest(&graph))?;
        }
    }
    for (file, text) in DEVICES {
        fs::write(root.join("devices").join(file), text)?;
    }
    println!("wrote {}", root.display());
    Ok(())
}

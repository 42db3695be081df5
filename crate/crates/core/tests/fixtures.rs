use std::collections::BTreeMap;
use std::path::PathBuf;

use tensorvirt::graph::{parse_graph, samples, write_graph, GraphIR, TensorRole};
use tensorvirt::memory::{collect_usage, naive_footprint, plan_greedy_by_size, savings_ratio, UsageRecord};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn load(name: &str) -> GraphIR {
    parse_graph(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn shipped_fixtures_match_their_builders() {
    for (name, graph) in samples::fixtures().unwrap() {
        let on_disk = std::fs::read_to_string(fixture(&format!("{name}.json"))).unwrap();
        assert_eq!(on_disk, write_graph(&graph), "{name}.json is stale; rerun `cargo run --example gen_fixtures`");
        let parsed = load(&format!("{name}.json"));
        assert_eq!(write_graph(&parsed), on_disk, "{name}.json does not round-trip");
    }
}

#[test]
fn llm_block_matches_manifest() {
    let g = load("llm_block.json");
    let text = std::fs::read_to_string(fixture("llm_block.manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    let edges: usize = g.nodes.iter().map(|n| n.inputs.len() + n.outputs.len()).sum();
    assert_eq!(m["nodes"], g.nodes.len());
    assert_eq!(m["tensors"], g.tensors.len());
    assert_eq!(m["edges"], edges);
    assert_eq!(m["weights"], g.tensors.iter().filter(|t| t.role == TensorRole::Weight).count());
    assert_eq!(m["inputs"], serde_json::json!(g.inputs));
    assert_eq!(m["outputs"], serde_json::json!(g.outputs));
}

/// Liveness by scanning every node for every tensor, independent of the
/// single-pass bookkeeping in `collect_usage`.
fn liveness_sweep(g: &GraphIR, order: &[usize]) -> BTreeMap<String, (usize, usize, usize)> {
    let mut out = BTreeMap::new();
    for t in g.tensors.iter().filter(|t| t.role == TensorRole::Intermediate) {
        let steps_with = |pred: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..order.len()).filter(|&s| pred(order[s])).collect() };
        let produced = steps_with(&|n| g.nodes[n].outputs.contains(&t.id));
        let consumed = steps_with(&|n| g.nodes[n].inputs.contains(&t.id));
        let first = produced[0];
        let last = consumed.iter().copied().max().unwrap_or(first);
        out.insert(t.id.clone(), (t.shape.element_count() * 4, first, last));
    }
    out
}

#[test]
fn diffusion_records_match_liveness_sweep() {
    let g = load("diffusion_like.json");
    assert_eq!(g.nodes.len(), 120);
    let order = g.topo_order().unwrap();
    let records = collect_usage(&g, &order).unwrap();
    let got: BTreeMap<String, (usize, usize, usize)> =
        records.iter().map(|r| (r.id.clone(), (r.size, r.first_use, r.last_use))).collect();
    assert_eq!(got, liveness_sweep(&g, &order));

    // block k occupies steps 4k..4k+3: conv, silu, residual add, scale
    let bytes = 8 * 8 * 8 * 4;
    assert_eq!(records.len(), 119);
    for k in 0..30 {
        let s = 4 * k;
        assert_eq!(got[&format!("conv{k}")], (bytes, s, s + 1));
        assert_eq!(got[&format!("silu{k}")], (bytes, s + 1, s + 2));
        assert_eq!(got[&format!("res{k}")], (bytes, s + 2, s + 3));
        if k < 29 {
            // read by the next block's conv and its residual add
            assert_eq!(got[&format!("scale{k}")], (bytes, s + 3, s + 6));
        }
    }
}

#[test]
fn sequential_fixtures_reuse_memory() {
    for name in ["unet_like", "text_encoder_like", "vae_like", "diffusion_like"] {
        let g = load(&format!("{name}.json"));
        let records: Vec<UsageRecord> = collect_usage(&g, &g.topo_order().unwrap()).unwrap();
        let plan = plan_greedy_by_size(&records, 64).unwrap();
        let s = savings_ratio(plan.arena_size, naive_footprint(&records, 64));
        assert!(s >= 0.80, "{name}: savings {s:.3}");
    }
}

#[test]
fn shipped_inputs_cover_graph_inputs() {
    for (name, graph) in samples::fixtures().unwrap() {
        let text = std::fs::read_to_string(fixture(&format!("inputs/{name}.json"))).unwrap();
        let values = tensorvirt::values::parse_values(&text).unwrap();
        for id in &graph.inputs {
            assert_eq!(values[id].shape(), graph.tensor(id).unwrap().shape, "{name}: {id}");
        }
    }
}

use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tensorvirt::codegen::{specialize, unbound_operands, Dialect, KernelOptions};
use tensorvirt::graph::{fuse, samples, select_kernel, DeviceProfile, GraphBuilder, GraphIR, MatmulQuant, OpKind, Stage, TensorInit, WeightRole, BUILTIN_PROFILES};
use tensorvirt::layout::{physical_extent, LayoutDescriptor, StorageType};
use tensorvirt::llm::{assign_quant_scheme, qkv_inverse, qkv_transform, quantize_graph, quantize_per_channel, total_quantized_bits, AttentionConfig, QuantScheme};
use tensorvirt::memory::{lower_bound, naive_footprint, plan_greedy_by_size, validate_plan, MemoryPlan, UsageRecord};
use tensorvirt::refexec::{execute, max_relative_diff_maps, ExecutionMode, Precision, TensorMap};
use tensorvirt::tensor::{slice_count, DataType, LogicalShape, LogicalTensor, LANES};
use tensorvirt::virtualization::{linearize_weights, plan_weight_layout, rearrange_weights, resolve, virtualize, WeightLayout, WeightShape};

fn shape_strategy(max: usize) -> impl Strategy<Value = LogicalShape> {
    prop::collection::vec(1..=max, 1..=5).prop_map(|d| LogicalShape::from_dims(&d).unwrap())
}

fn records_strategy(max: usize) -> impl Strategy<Value = Vec<UsageRecord>> {
    prop::collection::vec((1usize..200, 0usize..10, 0usize..5), 0..=max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(k, (size, first, len))| UsageRecord::new(format!("r{k}"), size, first, first + len))
            .collect()
    })
}

fn inputs_for(graph: &GraphIR, seed: u64, lo: f32, hi: f32) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph
        .inputs
        .iter()
        .map(|id| (id.clone(), LogicalTensor::from_fn(graph.tensor(id).unwrap().shape, |_| rng.gen_range(lo..hi))))
        .collect()
}

/// Smallest arena over every placement order, each order packed first-fit.
/// Some optimal packing is reproduced by first-fit in increasing offset order,
/// so the minimum over all orders is optimal.
fn optimal_plan(records: &[UsageRecord]) -> MemoryPlan {
    fn permute(idx: &mut Vec<usize>, k: usize, records: &[UsageRecord], best: &mut Option<MemoryPlan>) {
        if k == idx.len() {
            let mut offsets: BTreeMap<String, usize> = BTreeMap::new();
            let mut placed: Vec<(usize, usize)> = Vec::new();
            let mut arena = 0;
            for &i in idx.iter() {
                let r = &records[i];
                let mut off = 0;
                loop {
                    let clash = placed.iter().find(|&&(j, o)| {
                        let q = &records[j];
                        r.overlaps_in_time(q) && off < o + q.size && o < off + r.size
                    });
                    match clash {
                        Some(&(j, o)) => off = o + records[j].size,
                        None => break,
                    }
                }
                placed.push((i, off));
                offsets.insert(r.id.clone(), off);
                arena = arena.max(off + r.size);
            }
            if best.as_ref().is_none_or(|b| arena < b.arena_size) {
                *best = Some(MemoryPlan { offsets, arena_size: arena, alignment: 1 });
            }
            return;
        }
        for j in k..idx.len() {
            idx.swap(k, j);
            permute(idx, k + 1, records, best);
            idx.swap(k, j);
        }
    }
    let mut best = None;
    permute(&mut (0..records.len()).collect(), 0, records, &mut best);
    best.unwrap_or(MemoryPlan { offsets: BTreeMap::new(), arena_size: 0, alignment: 1 })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn slice_padding_is_at_most_three(c in 1i64..=64) {
        let s = slice_count(c).unwrap() as i64;
        prop_assert!((0..=3).contains(&(4 * s - c)));
    }

    #[test]
    fn greedy_plans_are_safe_bounded_and_deterministic(records in records_strategy(30), align_pow in 0u32..8) {
        let align = 1usize << align_pow;
        let plan = plan_greedy_by_size(&records, align).unwrap();
        prop_assert!(validate_plan(&plan, &records).is_empty());
        prop_assert!(lower_bound(&records, align) <= plan.arena_size);
        prop_assert!(plan.arena_size <= naive_footprint(&records, align));
        prop_assert_eq!(plan_greedy_by_size(&records, align).unwrap(), plan);
    }

    #[test]
    fn greedy_never_beats_the_exhaustive_optimum(records in records_strategy(6)) {
        let best = optimal_plan(&records);
        prop_assert!(validate_plan(&best, &records).is_empty());
        prop_assert!(lower_bound(&records, 1) <= best.arena_size);
        let greedy = plan_greedy_by_size(&records, 1).unwrap();
        prop_assert!(greedy.arena_size >= best.arena_size);
    }

    #[test]
    fn translation_is_injective_and_extents_tight(shape in shape_strategy(6)) {
        for storage in StorageType::ALL {
            let desc = LayoutDescriptor::canonical(storage);
            let extent = physical_extent(&shape, storage);
            let mut seen = HashSet::new();
            for [b, h, w, d, c] in shape.with_c(shape.slices()).coords() {
                let coord = desc.translate(&shape, b, w, h, d, c).unwrap();
                prop_assert!(extent.linear(coord) < extent.texels());
                prop_assert!(seen.insert(coord), "{storage}: duplicate {coord:?}");
            }
            prop_assert_eq!(seen.len(), extent.texels());
            prop_assert_eq!(extent.texels() * LANES, shape.padded_element_count());
        }
    }

    #[test]
    fn split_sets_resolve_totally_and_preserve_content(shape in shape_strategy(5), objects in 1usize..5, st in 0usize..5) {
        let storage = StorageType::ALL[st];
        let t = LogicalTensor::from_fn(shape, |c| shape.offset(c) as f32 + 1.0);
        let Ok(set) = virtualize(&t, storage, objects) else { return Ok(()) };
        let mut seen = HashSet::new();
        for coord in shape.coords() {
            let loc = resolve(coord, &set).unwrap();
            prop_assert!(seen.insert(loc));
            prop_assert_eq!(set.read(coord).unwrap(), t.get(coord).unwrap());
        }
        let mut stored: Vec<f32> = set.objects.iter().flat_map(|o| o.data.iter().flatten().copied()).filter(|&v| v != 0.0).collect();
        let mut want = t.values().to_vec();
        stored.sort_by(f32::total_cmp);
        want.sort_by(f32::total_cmp);
        prop_assert_eq!(stored, want);
    }

    #[test]
    fn weight_layouts_round_trip(o in 1usize..10, h in 1usize..3, w in 1usize..3, i in 1usize..10, g_pow in 0u32..2, perm_seed in 0u64..1000) {
        let ws = WeightShape::new(o, h, w, 1, i);
        let t = LogicalTensor::from_fn(ws.logical(), |c| ws.logical().offset(c) as f32 - 7.5);
        let pairs = rearrange_weights(&t, &plan_weight_layout(ws, 1, &WeightLayout::DEFAULT_PERMUTATION).unwrap()).unwrap();
        prop_assert_eq!(pairs.to_logical(), t.clone());
        let mut perm = WeightLayout::DEFAULT_PERMUTATION.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for k in (1..5).rev() {
            perm.swap(k, rng.gen_range(0..=k));
        }
        let g = 1 << g_pow;
        if let Ok(layout) = plan_weight_layout(ws, g, &perm) {
            let set = linearize_weights(&t, &layout).unwrap();
            let mut seen = HashSet::new();
            for coord in ws.logical().coords() {
                prop_assert!(seen.insert(resolve(coord, &set).unwrap()));
            }
            prop_assert_eq!(set.to_logical(), t);
        }
    }

    #[test]
    fn execution_is_layout_independent(seed in 0u64..500, st in 0usize..5) {
        let g = samples::random_graph(seed).unwrap();
        let inputs = inputs_for(&g, seed, -2.0, 2.0);
        let plain = execute(&g, &inputs, ExecutionMode::default()).unwrap();
        let mode = ExecutionMode { storage: Some(StorageType::ALL[st]), ..Default::default() };
        prop_assert_eq!(execute(&g, &inputs, mode).unwrap(), plain);
    }

    #[test]
    fn fusion_only_removes_tensors_private_to_one_kernel(seed in 0u64..2000) {
        let g = samples::random_graph(seed).unwrap();
        let (f, report) = fuse(&g);
        prop_assert!(f.nodes.len() <= g.nodes.len());
        let absorbed_by: BTreeMap<&str, &str> = report.events.iter().map(|e| (e.absorbed.as_str(), e.target.as_str())).collect();
        let owner = |n: &str| {
            let mut n = n.to_string();
            while let Some(&t) = absorbed_by.get(n.as_str()) {
                n = t.to_string();
            }
            n
        };
        let producers = g.producers();
        for (id, users) in g.consumers() {
            let Some(&p) = producers.get(id) else { continue };
            if f.tensor(id).is_some() {
                continue;
            }
            let home = owner(&g.nodes[p].id);
            for &u in &users {
                prop_assert_eq!(owner(&g.nodes[u].id), home.clone(), "tensor {} crosses kernels", id);
            }
        }
        for id in &g.outputs {
            prop_assert!(f.tensor(id).is_some());
        }
    }

    #[test]
    fn selection_is_pure_and_stages_differ(seed in 0u64..500) {
        let g = samples::random_graph(seed).unwrap();
        for name in BUILTIN_PROFILES {
            let p = DeviceProfile::builtin(name).unwrap();
            for (i, n) in g.nodes.iter().enumerate() {
                let pre = select_kernel(&g, i, &p, Stage::Prefill).unwrap();
                prop_assert_eq!(&pre, &select_kernel(&g, i, &p, Stage::Prefill).unwrap());
                let dec = select_kernel(&g, i, &p, Stage::Decode).unwrap();
                if matches!(n.kind, OpKind::FullyConnected { .. }) {
                    prop_assert_ne!(pre.kind, dec.kind);
                }
            }
        }
    }

    #[test]
    fn f16_error_grows_at_most_linearly(len in 1usize..=32, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 2, 3, 6], DataType::F32);
        let mut cur = "x".to_string();
        // keep magnitudes inside the normal f16 range
        let mut mag = 8.0f32;
        for k in 0..len {
            let id = format!("op{k}");
            let kind = if rng.gen_bool(0.3) {
                OpKind::Relu
            } else {
                let f: f32 = if mag > 64.0 { rng.gen_range(0.5..0.9) } else if mag < 1.0 { rng.gen_range(1.1..2.0) } else { rng.gen_range(0.5..2.0) };
                mag *= f;
                OpKind::Scale { factor: if rng.gen_bool(0.5) { f } else { -f } }
            };
            b.op(&id, kind, &[&cur]).unwrap();
            cur = id;
        }
        b.output(&cur);
        let g = b.build().unwrap();
        let inputs = inputs_for(&g, seed, -8.0, 8.0);
        let full = execute(&g, &inputs, ExecutionMode::default()).unwrap();
        let half = execute(&g, &inputs, ExecutionMode { precision: Precision::F16, ..Default::default() }).unwrap();
        let (a, h) = (full[&cur].values(), half[&cur].values());
        for (x, y) in a.iter().zip(h) {
            let bound = len as f32 * 2f32.powi(-10) * x.abs().max(1e-3);
            prop_assert!((x - y).abs() <= bound, "{x} vs {y} over {len} ops");
        }
    }

    #[test]
    fn qkv_transform_is_a_permutation(batch in 1usize..3, seq in 1usize..5, kv in 1usize..3, group in 1usize..4, dh in 1usize..6) {
        let heads = kv * group;
        let cfg = AttentionConfig::new(batch, seq, heads, kv, dh).unwrap();
        let x = LogicalTensor::from_fn(cfg.packed_shape(heads), |c| cfg.packed_shape(heads).offset(c) as f32);
        let y = qkv_transform(&x, &cfg, heads, None, 0).unwrap();
        let mut seen: Vec<u32> = y.values().iter().map(|&v| v as u32).collect();
        seen.sort_unstable();
        prop_assert!(seen.iter().copied().eq(0..x.values().len() as u32));
        prop_assert_eq!(qkv_inverse(&y, &cfg, heads).unwrap(), x);
    }

    #[test]
    fn quantization_error_is_half_a_step(o in 1usize..6, i in 1usize..20, bits in prop::sample::select(vec![4u8, 8]), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = LogicalShape::from_dims(&[o, 1, 1, i]).unwrap();
        let w = LogicalTensor::from_fn(shape, |_| rng.gen_range(-3.0..3.0));
        let q = quantize_per_channel(&w, bits).unwrap();
        let qmax = (1i32 << (bits - 1)) - 1;
        let back = q.dequantize();
        for (k, (a, b)) in w.values().iter().zip(back.values()).enumerate() {
            let row = &w.values()[(k / i) * i..(k / i + 1) * i];
            let step = row.iter().fold(0f32, |m, v| m.max(v.abs())) / qmax as f32;
            prop_assert!((a - b).abs() <= step / 2.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn mixed_scheme_stores_fewer_bits(ffn in 1usize..5, attn in 0usize..4, width in 1usize..12) {
        let mut b = GraphBuilder::new();
        b.input("x", &[1, 1, 2, width], DataType::F32);
        let mut cur = "x".to_string();
        for (k, role) in std::iter::repeat_n(WeightRole::FeedForward, ffn).chain(std::iter::repeat_n(WeightRole::AttentionProj, attn)).enumerate() {
            let w = format!("w{k}");
            b.weight(&w, &[width, 1, 1, width], TensorInit::Uniform { seed: k as u64, scale: 1.0 });
            let id = format!("fc{k}");
            b.op_with_role(&id, OpKind::FullyConnected { bias: false, quant: MatmulQuant::None }, &[&cur, &w], Some(role)).unwrap();
            cur = id;
        }
        b.output(&cur);
        let g = b.build().unwrap();
        let mixed = assign_quant_scheme(&g, QuantScheme::Mixed844).unwrap();
        let q8 = assign_quant_scheme(&g, QuantScheme::Q8).unwrap();
        prop_assert!(total_quantized_bits(&g, &mixed) < total_quantized_bits(&g, &q8));
    }
}

#[test]
fn emitted_kernels_bind_every_operand() {
    let profiles: Vec<DeviceProfile> = BUILTIN_PROFILES.iter().map(|n| DeviceProfile::builtin(n).unwrap()).collect();
    for (name, graph) in samples::fixtures().unwrap() {
        for stage in [Stage::None, Stage::Prefill, Stage::Decode] {
            let schemes: &[QuantScheme] = if name == "llm_block" { &[QuantScheme::None, QuantScheme::Q8, QuantScheme::Mixed844] } else { &[QuantScheme::None] };
            for &scheme in schemes {
                let g = if scheme == QuantScheme::None { graph.clone() } else { quantize_graph(&graph, scheme, stage).unwrap() };
                let fused = fuse(&g).0;
                for p in &profiles {
                    for dialect in Dialect::ALL {
                        let opts = KernelOptions { stage, ..Default::default() };
                        let spec = specialize(&fused, p, stage, dialect, &opts).unwrap_or_else(|e| panic!("{name} {stage:?} {scheme:?} {} {dialect}: {e}", p.name));
                        assert_eq!(spec.kernels.len(), fused.nodes.len());
                        for k in &spec.kernels {
                            assert!(unbound_operands(&k.source, &k.bindings).is_empty(), "{name}/{}", k.entry);
                        }
                        let again = specialize(&fused, p, stage, dialect, &opts).unwrap();
                        assert!(spec.kernels.iter().zip(&again.kernels).all(|(a, b)| a.source == b.source));
                    }
                }
            }
        }
    }
}

#[test]
fn quantized_stage_paths_agree_on_random_inputs() {
    let g = samples::llm_block().unwrap();
    for seed in 0..5 {
        let inputs = inputs_for(&g, seed, -3.0, 3.0);
        for scheme in [QuantScheme::Q8, QuantScheme::Mixed844] {
            let pre = quantize_graph(&g, scheme, Stage::Prefill).unwrap();
            let dec = quantize_graph(&g, scheme, Stage::Decode).unwrap();
            let a = execute(&fuse(&pre).0, &inputs, ExecutionMode::default()).unwrap();
            let b = execute(&fuse(&dec).0, &inputs, ExecutionMode::default()).unwrap();
            assert!(max_relative_diff_maps(&a, &b) <= 1e-6);
        }
    }
}

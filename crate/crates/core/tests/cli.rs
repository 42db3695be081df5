use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tensorvirt::values::parse_values;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name).display().to_string()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tensorvirt")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Value following `key=` on the first line that contains it.
fn field(text: &str, key: &str) -> String {
    let pat = format!("{key}=");
    let line = text.lines().find(|l| l.contains(&pat)).unwrap_or_else(|| panic!("no `{key}` in:\n{text}"));
    let rest = &line[line.find(&pat).unwrap() + pat.len()..];
    rest.split_whitespace().next().unwrap().to_string()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn plan_reports_savings() {
    let dir = TempDir::new().unwrap();
    let o = run(&["plan", "--graph", &fixture("unet_like.json"), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let savings: f64 = field(&stdout(&o), "savings").trim_end_matches('%').parse().unwrap();
    assert!(savings >= 80.0, "{}", stdout(&o));
    assert!(dir.path().join("plan.json").is_file());

    let o = run(&["check-plan", "--graph", &fixture("unet_like.json"), "--plan", dir.path().join("plan.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    let o = run(&["plan", "--graph", &fixture("single_op.json")]);
    assert_eq!(stdout(&o).trim(), "arena=0 naive=0 savings=0.0%");
}

#[test]
fn corrupted_plan_is_rejected() {
    let dir = TempDir::new().unwrap();
    let graph = fixture("diffusion_like.json");
    assert!(run(&["plan", "--graph", &graph, "--out", dir.path().to_str().unwrap()]).status.success());
    let path = dir.path().join("plan.json");
    let mut plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for t in plan["tensors"].as_array_mut().unwrap() {
        t["offset"] = 0.into();
    }
    fs::write(&path, serde_json::to_string(&plan).unwrap()).unwrap();
    let o = run(&["check-plan", "--graph", &graph, "--plan", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("overlap"), "{}", stderr(&o));
}

#[test]
fn malformed_graph_names_the_field() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"tensors": [{"id": "x", "shape": [4], "role": "input", "dtyp": "f32"}], "nodes": [], "inputs": ["x"], "outputs": []}"#).unwrap();
    let o = run(&["plan", "--graph", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dtyp"), "{}", stderr(&o));

    let o = run(&["plan", "--graph", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["plan"]).status.code(), Some(1));
    assert_eq!(run(&["compile", "--graph", "g.json", "--stage", "warmup"]).status.code(), Some(1));
    assert_eq!(run(&["compile", "--graph", "g.json", "--quant", "q3"]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn compile_prefill_and_decode_choices() {
    for (stage, kind, placement) in [("prefill", "conv-based", "separate-quantize-kernel"), ("decode", "fc-based", "fused-in-kernel")] {
        let dir = TempDir::new().unwrap();
        let o = run(&[
            "compile",
            "--graph",
            &fixture("llm_block.json"),
            "--device",
            "mobile-texture",
            "--stage",
            stage,
            "--quant",
            "8-4-4",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert_eq!(report, stdout(&o));
        let fc: Vec<&str> = report.lines().filter(|l| l.starts_with("kernel ") && l.contains("op=fully_connected")).collect();
        assert_eq!(fc.len(), 8, "{report}");
        for l in &fc {
            assert!(l.contains(&format!("kind={kind}")) && l.contains(&format!("quant={placement}")), "{l}");
        }
        let quantize_kernels = report.lines().filter(|l| l.contains("op=quantize")).count();
        assert_eq!(quantize_kernels > 0, stage == "prefill", "{report}");
        let kernels = fs::read_dir(dir.path().join("kernels")).unwrap().count();
        assert_eq!(kernels.to_string(), field(&report, "kernels"));
        assert_eq!(fs::read_dir(dir.path().join("weights")).unwrap().count(), 8);
        assert!(report.contains("weights w_up bits=4") && report.contains("weights w_q bits=8"), "{report}");
    }
}

#[test]
fn compile_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dialect in ["c-style-compute", "wgsl-style"] {
        for dir in [&a, &b] {
            let o = run(&[
                "compile",
                "--graph",
                &fixture("llm_block.json"),
                "--device",
                &fixture("devices/phone_gpu.toml"),
                "--stage",
                "prefill",
                "--quant",
                "q8",
                "--dialect",
                dialect,
                "--out",
                dir.path().to_str().unwrap(),
            ]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        assert_eq!(tree(a.path()), tree(b.path()));
    }
}

#[test]
fn unknown_device_falls_back_with_warning() {
    let dir = TempDir::new().unwrap();
    let o = run(&["compile", "--graph", &fixture("single_op.json"), "--device", "no-such-gpu", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: unknown device `no-such-gpu`"), "{}", stderr(&o));
    assert_eq!(field(&stdout(&o), "device"), "generic");

    let o = run(&["compile", "--graph", &fixture("single_op.json"), "--device", &fixture("devices/future_gpu.toml"), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("ray-tracing"), "{}", stderr(&o));
}

#[test]
fn unsupported_storage_for_dialect_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let dev = dir.path().join("dev.toml");
    fs::write(&dev, "name = \"imagebuf\"\n[storage]\ndefault = \"image-buffer-1d\"\n").unwrap();
    let args = |d| ["compile", "--graph", &fixture("minimal.json"), "--device", dev.to_str().unwrap(), "--dialect", d, "--out", dir.path().to_str().unwrap()].map(String::from);
    let o = Command::new(env!("CARGO_BIN_EXE_tensorvirt")).args(args("wgsl-style")).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_tensorvirt")).args(args("c-style-compute")).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn run_identity_reproduces_input() {
    let o = run(&["run", "--graph", &fixture("identity.json"), "--inputs", &fixture("inputs/identity.json")]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = parse_values(&stdout(&o)).unwrap();
    let inp = parse_values(&fs::read_to_string(fixture("inputs/identity.json")).unwrap()).unwrap();
    assert_eq!(out["y"].values(), inp["x"].values());
    assert_eq!(out["y"].shape(), inp["x"].shape());
}

#[test]
fn run_comparisons_stay_within_tolerance() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o.json");
    let o = run(&["run", "--graph", &fixture("attention.json"), "--inputs", &fixture("inputs/attention.json"), "--kv-conv", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let d: f64 = field(&stdout(&o), "max_rel_diff").parse().unwrap();
    assert!(d <= 1e-6, "{d}");
    assert!(parse_values(&fs::read_to_string(&out).unwrap()).unwrap().contains_key("attn"));

    for (graph, extra) in [("random_fusion", &[][..]), ("llm_block", &["--stage", "prefill", "--quant", "8-4-4"][..])] {
        let mut args = vec!["run", "--graph", &fixture(&format!("{graph}.json")), "--inputs", &fixture(&format!("inputs/{graph}.json")), "--compare-unfused", "--out", out.to_str().unwrap()]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        args.extend(extra.iter().map(|s| s.to_string()));
        let o = Command::new(env!("CARGO_BIN_EXE_tensorvirt")).args(&args).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let d: f64 = field(&stdout(&o), "max_rel_diff").parse().unwrap();
        assert!(d <= 1e-6, "{graph}: {d}");
    }
}

#[test]
fn run_with_missing_input_fails() {
    let o = run(&["run", "--graph", &fixture("llm_block.json"), "--inputs", &fixture("inputs/identity.json")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tokens"), "{}", stderr(&o));
}

#[test]
fn fuse_reports_patterns() {
    let o = run(&["fuse", "--graph", &fixture("gated_fc.json")]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("pattern name=fc-two-branch-prologue"), "{}", stdout(&o));
    let o = run(&["fuse", "--graph", &fixture("residual_norm.json")]);
    assert!(stdout(&o).contains("pattern name=rmsnorm-residual-prologue"), "{}", stdout(&o));
}

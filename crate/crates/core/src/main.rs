use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tensorvirt::codegen::{specialize, CodegenError, Dialect, KernelOptions};
use tensorvirt::graph::{fuse, parse_graph, write_graph, DeviceProfile, GraphIR, Stage};
use tensorvirt::llm::{assign_quant_scheme, quantize_graph, quantize_per_channel, QuantScheme};
use tensorvirt::memory::{collect_usage, plan_greedy_by_size, validate_plan, PlanFile, DEFAULT_ALIGNMENT};
use tensorvirt::refexec::{execute, max_relative_diff_maps, AttentionImpl, ExecutionMode, FusionMode, Precision};
use tensorvirt::values::{format_values, parse_values};

#[derive(Parser)]
#[command(name = "tensorvirt", version, about = "Plan, fuse, compile and run tensor graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan the intermediate-tensor arena and print its footprint.
    Plan(PlanArgs),
    /// Re-validate a plan file against its graph.
    CheckPlan(CheckPlanArgs),
    /// Apply operator fusion and print the fusion report.
    Fuse(FuseArgs),
    /// Select kernels, convert weights and emit kernel sources.
    Compile(CompileArgs),
    /// Execute a graph on the CPU reference executor.
    Run(RunArgs),
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALIGNMENT)]
    alignment: usize,
    /// Directory receiving plan.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckPlanArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    plan: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    graph: PathBuf,
    /// File receiving the fused graph.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompileArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Built-in profile name or path to a TOML profile.
    #[arg(long, default_value = "generic")]
    device: String,
    #[arg(long, default_value = "none")]
    stage: Stage,
    #[arg(long, default_value = "c-style-compute")]
    dialect: Dialect,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "none")]
    quant: QuantScheme,
    #[arg(long, default_value_t = DEFAULT_ALIGNMENT)]
    alignment: usize,
    /// Workgroup size as X,Y,Z.
    #[arg(long, default_value = "8,8,1", value_parser = parse_workgroup)]
    workgroup: [u32; 3],
    #[arg(long)]
    no_fuse: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    inputs: PathBuf,
    /// File receiving output values; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "none")]
    stage: Stage,
    #[arg(long, default_value = "none")]
    quant: QuantScheme,
    #[arg(long, default_value = "f32", value_parser = parse_precision)]
    precision: Precision,
    /// Also run every fused node expanded and print the largest relative difference.
    #[arg(long)]
    compare_unfused: bool,
    /// Evaluate attention through key/value caches stored as convolution weights.
    #[arg(long)]
    kv_conv: bool,
    #[arg(long)]
    no_fuse: bool,
}

fn parse_workgroup(s: &str) -> Result<[u32; 3], String> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err("expected three positive integers X,Y,Z".into()),
    }
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f16" => Ok(Precision::F16),
        _ => Err(format!("unknown precision `{s}` (expected f32 or f16)")),
    }
}

/// Exit code 2: bad input. Exit code 3: an internal check failed.
enum Failure {
    Validation(String),
    Invariant(String),
}

impl From<tensorvirt::Error> for Failure {
    fn from(e: tensorvirt::Error) -> Self {
        match &e {
            tensorvirt::Error::Codegen(CodegenError::Incomplete(_) | CodegenError::Template(_) | CodegenError::Interp(_)) => {
                Failure::Invariant(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

macro_rules! impl_validation {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::from(tensorvirt::Error::from(e))
            }
        }
    )*};
}
impl_validation!(
    tensorvirt::graph::GraphError,
    tensorvirt::graph::SelectError,
    tensorvirt::memory::PlanError,
    tensorvirt::llm::LlmError,
    tensorvirt::refexec::ExecError,
    tensorvirt::codegen::CodegenError,
    tensorvirt::values::ValuesError
);

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Validation(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<GraphIR, Failure> {
    parse_graph(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn resolve_device(arg: &str) -> Result<DeviceProfile, Failure> {
    let profile = if let Some(p) = DeviceProfile::builtin(arg) {
        p
    } else if Path::new(arg).is_file() {
        DeviceProfile::load(arg)?
    } else {
        eprintln!("warning: unknown device `{arg}`, using the generic profile");
        DeviceProfile::generic()
    };
    for flag in &profile.ignored_flags {
        eprintln!("warning: device `{}` declares unknown capability `{flag}`, ignored", profile.name);
    }
    Ok(profile)
}

fn plan_file(graph: &GraphIR, alignment: usize) -> Result<PlanFile, Failure> {
    let order = graph.topo_order()?;
    let records = collect_usage(graph, &order)?;
    let plan = plan_greedy_by_size(&records, alignment)?;
    let violations = validate_plan(&plan, &records);
    if let Some(v) = violations.first() {
        return Err(Failure::Invariant(format!("planner produced an invalid plan: {v}")));
    }
    Ok(PlanFile::new(&plan, &records))
}

fn plan_json(plan: &PlanFile) -> String {
    let mut s = serde_json::to_string_pretty(plan).expect("plan serializes");
    s.push('\n');
    s
}

fn cmd_plan(a: PlanArgs) -> Result<(), Failure> {
    let graph = load_graph(&a.graph)?;
    let plan = plan_file(&graph, a.alignment)?;
    if let Some(dir) = &a.out {
        write(&dir.join("plan.json"), plan_json(&plan))?;
    }
    println!("{}", plan.summary());
    Ok(())
}

fn cmd_check_plan(a: CheckPlanArgs) -> Result<(), Failure> {
    let graph = load_graph(&a.graph)?;
    let text = read(&a.plan)?;
    let file: PlanFile = serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("{}: {e}", a.plan.display())))?;
    let (plan, records) = file.to_parts();
    let expected = collect_usage(&graph, &graph.topo_order()?)?;
    for r in &expected {
        if !records.iter().any(|p| p.id == r.id && p.size >= r.size && p.first_use <= r.first_use && p.last_use >= r.last_use) {
            return Err(Failure::Validation(format!("plan does not cover tensor `{}` of the graph", r.id)));
        }
    }
    let violations = validate_plan(&plan, &records);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(Failure::Validation(format!("plan is invalid: {}", msgs.join("; "))));
    }
    println!("ok {}", file.summary());
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> Result<(), Failure> {
    let graph = load_graph(&a.graph)?;
    let (fused, report) = fuse(&graph);
    print!("{}", report.to_text());
    if let Some(path) = &a.out {
        write(path, write_graph(&fused))?;
    }
    Ok(())
}

fn cmd_compile(a: CompileArgs) -> Result<(), Failure> {
    let mut graph = load_graph(&a.graph)?;
    let profile = resolve_device(&a.device)?;
    let mut blobs = Vec::new();
    if a.quant != QuantScheme::None {
        for (w, bits) in assign_quant_scheme(&graph, a.quant)? {
            let t = graph
                .tensor(&w)
                .and_then(|t| t.to_tensor())
                .ok_or_else(|| Failure::Validation(format!("weight `{w}` has no values")))?;
            blobs.push((w, quantize_per_channel(&t, bits)?));
        }
        graph = quantize_graph(&graph, a.quant, a.stage)?;
    }
    let mut fusion_text = String::new();
    if !a.no_fuse {
        let (fused, report) = fuse(&graph);
        graph = fused;
        fusion_text = report.to_text();
    }
    let options = KernelOptions {
        workgroup: a.workgroup,
        stage: a.stage,
        alignment: a.alignment,
    };
    let spec = specialize(&graph, &profile, a.stage, a.dialect, &options)?;
    let violations = validate_plan(&spec.plan, &spec.records);
    if let Some(v) = violations.first() {
        return Err(Failure::Invariant(format!("planner produced an invalid plan: {v}")));
    }
    let plan = PlanFile::new(&spec.plan, &spec.records);

    let mut report = format!(
        "compile graph={} device={} stage={} dialect={} quant={} kernels={}\n",
        a.graph.display(),
        profile.name,
        a.stage.name(),
        a.dialect.name(),
        a.quant.name(),
        spec.kernels.len()
    );
    for (k, c) in spec.kernels.iter().zip(&spec.choices) {
        let variants = if c.variants.is_empty() { "-".to_string() } else { c.variants.join(",") };
        report.push_str(&format!(
            "kernel {} node={} op={} kind={} quant={} variants={}\n",
            k.entry,
            c.node,
            c.op,
            c.kind.name(),
            c.quant.name(),
            variants
        ));
        write(&a.out.join("kernels").join(k.file_name()), &k.source)?;
    }
    for (w, q) in &blobs {
        report.push_str(&format!("weights {w} bits={} channels={}\n", q.bits, q.channels()));
        write(&a.out.join("weights").join(format!("{w}.qwb")), q.to_bytes())?;
    }
    report.push_str(&fusion_text);
    report.push_str(&format!("plan {}\n", plan.summary()));
    write(&a.out.join("plan.json"), plan_json(&plan))?;
    write(&a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut graph = load_graph(&a.graph)?;
    if a.quant != QuantScheme::None {
        graph = quantize_graph(&graph, a.quant, a.stage)?;
    }
    if !a.no_fuse {
        graph = fuse(&graph).0;
    }
    let inputs = parse_values(&read(&a.inputs)?).map_err(|e| Failure::Validation(format!("{}: {e}", a.inputs.display())))?;
    let mode = ExecutionMode {
        precision: a.precision,
        stage: a.stage,
        attention: if a.kv_conv { AttentionImpl::KvConv } else { AttentionImpl::Direct },
        ..ExecutionMode::default()
    };
    let outputs = execute(&graph, &inputs, mode)?;
    let text = format_values(&outputs, |id, shape| {
        graph.tensor(id).map(|t| t.dims.clone()).unwrap_or_else(|| shape.extents().to_vec())
    })?;
    match &a.out {
        Some(path) => write(path, &text)?,
        None => print!("{text}"),
    }
    if a.compare_unfused {
        let reference = execute(&graph, &inputs, ExecutionMode { fusion: FusionMode::ForceUnfused, ..mode })?;
        println!("compare-unfused max_rel_diff={:.3e}", max_relative_diff_maps(&outputs, &reference));
    }
    if a.kv_conv {
        let direct = execute(&graph, &inputs, ExecutionMode { attention: AttentionImpl::Direct, ..mode })?;
        println!("kv-conv-vs-direct max_rel_diff={:.3e}", max_relative_diff_maps(&outputs, &direct));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::CheckPlan(a) => cmd_check_plan(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Compile(a) => cmd_compile(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(3)
        }
    }
}

//! Python bindings. Graphs and tensor values cross the boundary as the same
//! JSON text the command-line tool reads and writes.

use std::collections::BTreeMap;
use std::fmt::Display;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tv::codegen::{specialize, Dialect, KernelOptions};
use tv::graph::{fuse as fuse_graph, parse_graph_str, write_graph, DeviceProfile, GraphIR, Stage};
use tv::layout::{LayoutDescriptor, StorageType};
use tv::memory::{collect_usage, naive_footprint, plan_greedy_by_size, savings_ratio};
use tv::refexec::{execute, ExecutionMode, Precision};
use tv::tensor::LogicalShape;
use tv::values::{format_values, parse_values};

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn graph(text: &str) -> PyResult<GraphIR> {
    parse_graph_str(text).map_err(err)
}

/// Number of four-channel slices needed for `c` channels.
#[pyfunction]
fn slice_count(c: i64) -> PyResult<usize> {
    tv::tensor::slice_count(c).map_err(err)
}

/// Physical texel coordinate of logical `(b, h, w, d, c)` under the canonical
/// layout of `storage`, plus the lane inside the texel.
#[pyfunction]
fn translate(dims: Vec<usize>, storage: &str, coord: [usize; 5]) -> PyResult<(Vec<usize>, usize)> {
    let shape = LogicalShape::from_dims(&dims).map_err(err)?;
    let storage: StorageType = storage.parse().map_err(err)?;
    let [b, h, w, d, c] = coord;
    let texel = LayoutDescriptor::canonical(storage).translate(&shape, b, w, h, d, c / 4).map_err(err)?;
    Ok((texel.components(), c % 4))
}

/// Memory plan for the intermediates of a graph: arena size, naive footprint,
/// savings ratio and per-tensor offsets.
#[pyfunction]
#[pyo3(signature = (graph_json, alignment = 64))]
fn plan(py: Python<'_>, graph_json: &str, alignment: usize) -> PyResult<Py<PyAny>> {
    let g = graph(graph_json)?;
    let records = collect_usage(&g, &g.topo_order().map_err(err)?).map_err(err)?;
    let p = plan_greedy_by_size(&records, alignment).map_err(err)?;
    let naive = naive_footprint(&records, alignment);
    let d = pyo3::types::PyDict::new(py);
    d.set_item("arena", p.arena_size)?;
    d.set_item("naive", naive)?;
    d.set_item("savings", savings_ratio(p.arena_size, naive))?;
    d.set_item("offsets", p.offsets)?;
    Ok(d.into_any().unbind())
}

/// Fused graph JSON and the fusion report.
#[pyfunction]
fn fuse(graph_json: &str) -> PyResult<(String, String)> {
    let (f, report) = fuse_graph(&graph(graph_json)?);
    Ok((write_graph(&f), report.to_text()))
}

/// Kernel sources keyed by file name.
#[pyfunction]
#[pyo3(signature = (graph_json, device = "generic", stage = "none", dialect = "c-style-compute"))]
fn compile(graph_json: &str, device: &str, stage: &str, dialect: &str) -> PyResult<BTreeMap<String, String>> {
    let g = fuse_graph(&graph(graph_json)?).0;
    let profile = DeviceProfile::builtin(device).ok_or_else(|| err(format!("unknown device `{device}`")))?;
    let stage: Stage = stage.parse().map_err(err)?;
    let dialect: Dialect = dialect.parse().map_err(err)?;
    let spec = specialize(&g, &profile, stage, dialect, &KernelOptions::default()).map_err(err)?;
    Ok(spec.kernels.into_iter().map(|k| (k.file_name(), k.source)).collect())
}

/// Runs a graph on the CPU reference executor; values in and out as JSON.
#[pyfunction]
#[pyo3(signature = (graph_json, inputs_json, precision = "f32"))]
fn run(graph_json: &str, inputs_json: &str, precision: &str) -> PyResult<String> {
    let g = fuse_graph(&graph(graph_json)?).0;
    let precision = match precision {
        "f32" => Precision::F32,
        "f16" => Precision::F16,
        other => return Err(err(format!("unknown precision `{other}`"))),
    };
    let inputs = parse_values(inputs_json).map_err(err)?;
    let outputs = execute(&g, &inputs, ExecutionMode { precision, ..Default::default() }).map_err(err)?;
    format_values(&outputs, |id, shape| g.tensor(id).map(|t| t.dims.clone()).unwrap_or_else(|| shape.extents().to_vec()))
        .map_err(err)
}

#[pymodule]
fn tensorvirt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(slice_count, m)?)?;
    m.add_function(wrap_pyfunction!(translate, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(compile, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

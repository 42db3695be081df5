//! Tensor virtualization and GPU kernel compilation, with a CPU reference
//! executor for checking the result.
//!
//! A logical tensor is stored as one or more physical objects (buffers or
//! textures) holding four-channel texels. [`layout`] maps logical coordinates
//! to texel coordinates, [`virtualization`] splits tensors and weights across
//! several objects, [`memory`] packs intermediate tensors into one arena,
//! [`graph`] fuses operators and selects kernels, [`llm`] adds the
//! transformer-specific pieces, [`codegen`] emits kernel source and
//! [`refexec`] runs graphs on the CPU.

pub mod codegen;
pub mod graph;
pub mod layout;
pub mod llm;
pub mod memory;
pub mod refexec;
pub mod tensor;
pub mod values;
pub mod virtualization;

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Layout(#[from] layout::LayoutError),
    #[error(transparent)]
    Virt(#[from] virtualization::VirtError),
    #[error(transparent)]
    Plan(#[from] memory::PlanError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Select(#[from] graph::SelectError),
    #[error(transparent)]
    Llm(#[from] llm::LlmError),
    #[error(transparent)]
    Exec(#[from] refexec::ExecError),
    #[error(transparent)]
    Codegen(#[from] codegen::CodegenError),
    #[error(transparent)]
    Values(#[from] values::ValuesError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Compiler and cycle-approximate simulator for a reconfigurable multi-RPU
//! accelerator running mixed dense/sparse transformer and graph workloads.

pub mod cli;
pub mod config;
pub mod error;
pub mod kernel_ir;
pub mod mode_policy;
pub mod models;
pub mod model_spec;
pub mod program;
pub mod report;
pub mod runtime;
pub mod scalar;
pub mod sim;

pub use config::HardwareConfig;
pub use error::{CompileError, LowerError, ModelError, RuntimeError, SimError};

/// Quantized tensor at the default scale precision.
pub type QTensor = sim::QTensor<f64>;
/// Accumulator tensor at the default scale precision.
pub type AccTensor = sim::AccTensor<f64>;

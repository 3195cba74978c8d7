//! Functional and cycle model of one RPU: systolic, sparse, top-k and
//! nonlinear units.

pub mod cycles;
pub mod nonlinear;
pub mod sparse;
pub mod systolic;
pub mod tensor;
pub mod timing;
pub mod topk;
pub mod wavefront;

pub use cycles::CycleReport;
pub use sparse::{build_sparse_queue, exec_radt, exec_simd_row, QueueSource, SparseOp, SparseQueue};
pub use systolic::{exec_systolic, SystolicVariant, Tiling};
pub use tensor::{requantize, AccTensor, QTensor};
pub use topk::{exec_topk, TopkResult};

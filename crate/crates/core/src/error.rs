use thiserror::Error;

/// Errors raised while parsing or validating a model description.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown layer kind `{0}`")]
    UnknownKind(String),
    #[error("duplicate layer id `{0}`")]
    DuplicateLayer(String),
    #[error("edge references undeclared layer `{0}`")]
    DanglingEdge(String),
    #[error("graph contains a cycle through layer `{0}`")]
    Cycle(String),
    #[error("layer `{layer}`: dimension `{dim}` must be a positive extent, got {value}")]
    BadExtent {
        layer: String,
        dim: String,
        value: i64,
    },
    #[error("layer `{layer}`: fuzzy dimension `{dim}` is not declared")]
    UndeclaredFuzzy { layer: String, dim: String },
    #[error("layer `{layer}`: pruning is only allowed on Attention and TokenPrune layers")]
    PruneNotAllowed { layer: String },
    #[error("layer `{layer}`: invalid pruning request: {reason}")]
    BadPrune { layer: String, reason: String },
    #[error("layer `{0}` has no predecessor and is not a graph input")]
    Orphan(String),
    #[error("graph input `{0}` must not have predecessors")]
    InputWithPredecessor(String),
    #[error("boundary tensor `{0}` does not name a layer")]
    UnknownBoundary(String),
    #[error("no layers")]
    Empty,
}

/// Errors raised while lowering layers to kernels.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowerError {
    #[error("layer `{layer}`: shape mismatch: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("layer `{layer}`: missing dimension `{dim}`")]
    MissingDim { layer: String, dim: String },
    #[error("layer `{layer}`: expected {expected} input(s), found {found}")]
    Arity {
        layer: String,
        expected: String,
        found: usize,
    },
    #[error("layer `{layer}`: dimension `{dim}` cannot be fuzzy for this layer kind")]
    UnsupportedFuzzy { layer: String, dim: String },
    #[error("kernel `{0}` is dense; sparsity profiles apply to SDDMM/SpMM only")]
    DenseKernel(String),
}

/// Errors raised by the compiler back end (tiling, placement, DAG checks).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error("block `{block}`: no legal tiling fits the {buffer} byte local buffer")]
    NoLegalTiling { block: String, buffer: u64 },
    #[error("block `{block}` requires the {capability} capability but no RPU provides it")]
    MissingCapability { block: String, capability: String },
    #[error("invalid program: {0}")]
    InvalidDag(String),
    #[error("invalid hardware configuration: {0}")]
    Hardware(String),
}

/// Errors raised by the functional/cycle engine of one RPU.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tile {tile_n}x{tile_m} exceeds the {rows}x{cols} array")]
    TileTooLarge {
        tile_n: usize,
        tile_m: usize,
        rows: usize,
        cols: usize,
    },
    #[error("sparse queue index ({row}, {col}) outside {rows}x{cols}")]
    QueueIndex {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("duplicate sparse queue entry ({0}, {1})")]
    QueueDuplicate(usize, usize),
    #[error("top-k: k={k} outside [1, {limit}]")]
    TopKRange { k: usize, limit: usize },
    #[error("top-k: batch width {0} is not a power of two")]
    TopKWidth(usize),
    #[error("row of {len} elements exceeds the {capacity} element nonlinear buffer")]
    RowTooLong { len: usize, capacity: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}

/// Errors raised while running a compiled program.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("no binding for symbolic extent `{0}`")]
    MissingBinding(String),
    #[error("block `{block}`: bound extent violates buffer constraints: {detail}")]
    BindingViolation { block: String, detail: String },
    #[error("missing graph input `{0}`")]
    MissingInput(String),
    #[error("buffer `{0}` read before it was written")]
    MissingBuffer(String),
    #[error("block `{block}`: {source}")]
    Engine {
        block: String,
        #[source]
        source: SimError,
    },
    #[error("pruning: {0}")]
    Pruning(String),
    #[error("scheduler deadlock with {0} blocks left")]
    Deadlock(usize),
    #[error(transparent)]
    Compile(#[from] CompileError),
}

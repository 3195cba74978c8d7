//! Unified kernel IR.
//!
//! Every layer lowers to a short list of kernels drawn from one vocabulary:
//! dense-dense products (DDMM), sampled dense-dense products (SDDMM), sparse
//! times dense products (SpMM), element-wise ops, nonlinear units and top-k
//! selection. Extents that are only known at run time are [`Extent`]s with a
//! symbol and a compile-time estimate.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::LowerError;
use crate::model_spec::{DataflowHint, LayerKind, LayerSpec, ModelGraph, PruneRequest};

/// A kernel extent: a concrete size, or a run-time symbol with an estimate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Extent {
    pub est: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sym: Option<String>,
}

impl Extent {
    pub fn fixed(n: usize) -> Self {
        Extent { est: n, sym: None }
    }

    pub fn symbolic(name: impl Into<String>, estimate: usize) -> Self {
        Extent {
            est: estimate,
            sym: Some(name.into()),
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.sym.is_none()
    }

    /// Concrete value under `bind`; fixed extents ignore it.
    pub fn resolve(&self, bind: &impl Fn(&str) -> Option<usize>) -> Option<usize> {
        match &self.sym {
            None => Some(self.est),
            Some(s) => bind(s),
        }
    }

    /// Substitutes a binding, producing a fixed extent when the symbol is bound.
    pub fn bound(&self, bind: &impl Fn(&str) -> Option<usize>) -> Extent {
        match self.resolve(bind) {
            Some(v) => Extent::fixed(v),
            None => self.clone(),
        }
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.sym {
            None => write!(f, "{}", self.est),
            Some(s) => write!(f, "{s}~{}", self.est),
        }
    }
}

/// Product shape `C[n x m] = A[n x k] * B[k x m]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelShape {
    pub n: Extent,
    pub m: Extent,
    pub k: Extent,
}

impl KernelShape {
    pub fn fixed(n: usize, m: usize, k: usize) -> Self {
        KernelShape {
            n: Extent::fixed(n),
            m: Extent::fixed(m),
            k: Extent::fixed(k),
        }
    }

    pub fn is_fixed(&self) -> bool {
        self.n.is_fixed() && self.m.is_fixed() && self.k.is_fixed()
    }

    /// Estimated `(n, m, k)`.
    pub fn est(&self) -> (usize, usize, usize) {
        (self.n.est, self.m.est, self.k.est)
    }

    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = [&self.n, &self.m, &self.k]
            .iter()
            .filter_map(|e| e.sym.clone())
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

impl fmt::Display for KernelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.n, self.m, self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparsitySource {
    Static,
    PruneDerived,
    RuntimeObserved,
}

/// Expected activity of a sampled or sparse kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    /// Fraction of inactive positions in a row, in `[0, 1)`.
    pub p: f64,
    /// Expected active operands per row.
    pub per_row_activity: f64,
    /// Coefficient of variation of per-row activity.
    pub skew: f64,
    pub source: SparsitySource,
    /// Positions a row could hold before sparsification.
    pub row_len: usize,
}

impl SparsityProfile {
    pub fn from_row_counts(counts: &[usize], row_len: usize, source: SparsitySource) -> Self {
        let (mean, cv) = mean_and_cv(counts);
        let p = if row_len == 0 {
            0.0
        } else {
            (1.0 - mean / row_len as f64).clamp(0.0, 1.0)
        };
        SparsityProfile {
            p,
            per_row_activity: mean,
            skew: cv,
            source,
            row_len,
        }
    }
}

/// Mean and coefficient of variation (population stddev / mean).
pub fn mean_and_cv(values: &[usize]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return (0.0, 0.0);
    }
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt() / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NonlinearKind {
    Softmax,
    Gelu,
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    Ddmm,
    Sddmm,
    Spmm,
    Elementwise,
    Nonlinear(NonlinearKind),
    TopK,
}

impl KernelKind {
    pub fn is_sparse(self) -> bool {
        matches!(self, KernelKind::Sddmm | KernelKind::Spmm)
    }

    /// Runs on the mode-switchable PE array (as opposed to the side units).
    pub fn uses_mse(self) -> bool {
        matches!(
            self,
            KernelKind::Ddmm | KernelKind::Sddmm | KernelKind::Spmm | KernelKind::Elementwise
        )
    }
}

/// How a heads-loop kernel splits an activation operand per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSplit {
    /// Head `h` reads columns `h*dim .. (h+1)*dim`.
    Cols,
    /// Head `h` reads the `h`-th of `count` equal row blocks.
    Rows,
}

/// Convolution geometry for lazy im2col.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let span_h = (h + 2 * pad).checked_sub(kernel)?;
        let span_w = (w + 2 * pad).checked_sub(kernel)?;
        Some(ConvGeom {
            c_in,
            h,
            w,
            kernel,
            stride,
            pad,
            h_out: span_h / stride + 1,
            w_out: span_w / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    /// Activation buffer(s); several buffers are concatenated column-wise.
    Act {
        bufs: Vec<String>,
        #[serde(default)]
        transpose: bool,
        /// Static column window `(start, len)`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cols: Option<(usize, usize)>,
        /// Rows gathered through a kept-index stream.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gather: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        head_split: Option<HeadSplit>,
    },
    /// Weight matrix delivered at simulation time.
    Weight { id: String, rows: usize, cols: usize },
    /// Patches of a feature map `[H*W x C_in]`, materialized by the simulator.
    Im2col { buf: String, geom: ConvGeom },
    /// Graph adjacency `[V x V]` with `edges` nonzeros.
    Adjacency {
        id: String,
        nodes: usize,
        edges: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        degrees: Option<Vec<usize>>,
    },
}

impl Operand {
    pub fn act(buf: impl Into<String>) -> Self {
        Operand::Act {
            bufs: vec![buf.into()],
            transpose: false,
            cols: None,
            gather: None,
            head_split: None,
        }
    }

    /// Buffers this operand reads.
    pub fn reads(&self) -> Vec<String> {
        match self {
            Operand::Act { bufs, gather, .. } => {
                let mut r = bufs.clone();
                r.extend(gather.iter().cloned());
                r
            }
            Operand::Im2col { buf, .. } => vec![buf.clone()],
            Operand::Weight { .. } | Operand::Adjacency { .. } => Vec::new(),
        }
    }
}

/// Where a top-k kernel takes its per-token scores from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    /// `score_t = q_0 . k_t`, the class token's attention to token `t`.
    ClsAttention,
    /// `score_t = sum_j x[t, j]`.
    RowSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkParams {
    /// Kept-token count (a runtime symbol).
    pub keep: Extent,
    /// Scored stream length.
    pub stream: Extent,
    /// First-stage batch width, a power of two no larger than the array width.
    pub width: usize,
    pub prune: PruneRequest,
    pub score: ScoreSource,
    /// Also emit the gathered input rows (token-pruning layers).
    pub gather_input: bool,
}

/// Heads handled as a loop bound inside one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLoop {
    pub count: usize,
    pub dim: usize,
    /// How per-head results are assembled.
    pub output: HeadSplit,
}

/// Active-position structure of a sparse kernel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSource {
    /// Rows and columns restricted to a kept-index stream (pruned scores).
    KeptSquare(String),
    /// Every entry of the (already compacted) left operand is active.
    DenseLeft,
    /// Nonzeros of the adjacency operand.
    Adjacency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub id: String,
    pub kind: KernelKind,
    pub shape: KernelShape,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityProfile>,
    pub inputs: Vec<Operand>,
    pub output: String,
    pub out_rows: Extent,
    pub out_cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<TopkParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<HeadLoop>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSource>,
    /// Unpruned row length of a pruned sparse kernel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream_len: Option<Extent>,
    /// Pruning request that shapes this kernel's mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneRequest>,
    /// Extra real-valued factor folded into the output scale (e.g. 1/sqrt(d)).
    pub scale_mul: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<DataflowHint>,
    pub origin_layer: String,
}

impl Kernel {
    fn new(id: String, kind: KernelKind, shape: KernelShape, origin: &str) -> Self {
        let out_rows = shape.n.clone();
        let out_cols = shape.m.est;
        Kernel {
            id,
            kind,
            shape,
            sparsity: None,
            inputs: Vec::new(),
            output: String::new(),
            out_rows,
            out_cols,
            topk: None,
            heads: None,
            mask: None,
            stream_len: None,
            prune: None,
            scale_mul: 1.0,
            hint: None,
            origin_layer: origin.to_string(),
        }
    }

    pub fn reads(&self) -> Vec<String> {
        let mut r: Vec<String> = self.inputs.iter().flat_map(Operand::reads).collect();
        if let Some(MaskSource::KeptSquare(b)) = &self.mask {
            r.push(b.clone());
        }
        r.sort();
        r.dedup();
        r
    }

    pub fn head_count(&self) -> usize {
        self.heads.map_or(1, |h| h.count)
    }

    /// Every symbol mentioned by shape, output or top-k parameters.
    pub fn symbols(&self) -> Vec<String> {
        let mut s = self.shape.symbols();
        s.extend(self.out_rows.sym.clone());
        if let Some(t) = &self.topk {
            s.extend(t.keep.sym.clone());
            s.extend(t.stream.sym.clone());
        }
        if let Some(e) = &self.stream_len {
            s.extend(e.sym.clone());
        }
        s.sort();
        s.dedup();
        s
    }

    /// Multiply-accumulate count at estimated extents.
    pub fn macs_est(&self) -> u64 {
        let (n, m, k) = self.shape.est();
        let act = self.sparsity.as_ref().map(|s| s.per_row_activity);
        kernel_macs(self.kind, n, m, k, act) * self.head_count() as u64
    }
}

/// MACs of one (single-head) kernel instance.
pub fn kernel_macs(kind: KernelKind, n: usize, m: usize, k: usize, activity: Option<f64>) -> u64 {
    let (n, m, k) = (n as u64, m as u64, k as u64);
    match kind {
        KernelKind::Ddmm => n * m * k,
        KernelKind::Sddmm => {
            let a = activity.map_or(m as f64, |a| a.min(m as f64));
            (n as f64 * a * k as f64).round() as u64
        }
        KernelKind::Spmm => {
            let a = activity.map_or(k as f64, |a| a.min(k as f64));
            (n as f64 * a * m as f64).round() as u64
        }
        KernelKind::TopK => m * k,
        KernelKind::Elementwise | KernelKind::Nonlinear(_) => 0,
    }
}

/// A tensor handed to a layer: buffer name plus `[rows x cols]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRef {
    pub buf: String,
    pub rows: Extent,
    pub cols: usize,
}

/// How a runtime symbol gets its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SymbolDef {
    /// A fuzzy extent declared on a graph input layer.
    Input { layer: String, dim: String, estimate: usize },
    /// The kept-token count of a pruning top-k over `stream`.
    Kept {
        layer: String,
        stream: Extent,
        prune: PruneRequest,
    },
}

impl SymbolDef {
    pub fn estimate(&self) -> usize {
        match self {
            SymbolDef::Input { estimate, .. } => *estimate,
            SymbolDef::Kept { stream, prune, .. } => prune.kept(stream.est),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerOptions {
    pub head_fanout_cap: usize,
    /// Array width; bounds the top-k batch width.
    pub array_width: usize,
    pub default_graph_skew: f64,
}

impl Default for LowerOptions {
    fn default() -> Self {
        LowerOptions {
            head_fanout_cap: 4,
            array_width: 32,
            default_graph_skew: 0.0,
        }
    }
}

/// Result of lowering one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Lowered {
    pub kernels: Vec<Kernel>,
    pub output: TensorRef,
    pub symbols: Vec<(String, SymbolDef)>,
}

fn need(layer: &LayerSpec, dim: &str) -> Result<usize, LowerError> {
    layer.get(dim).ok_or_else(|| LowerError::MissingDim {
        layer: layer.id.clone(),
        dim: dim.to_string(),
    })
}

fn mismatch(layer: &LayerSpec, detail: String) -> LowerError {
    LowerError::ShapeMismatch {
        layer: layer.id.clone(),
        detail,
    }
}

fn arity(layer: &LayerSpec, expected: &str, found: usize) -> LowerError {
    LowerError::Arity {
        layer: layer.id.clone(),
        expected: expected.to_string(),
        found,
    }
}

/// The external tensor a graph-input layer consumes.
pub fn graph_input(layer: &LayerSpec) -> Result<(TensorRef, Vec<(String, SymbolDef)>), LowerError> {
    let buf = format!("{}.in", layer.id);
    for dim in &layer.fuzzy {
        let allowed = dim == "T" && !matches!(layer.kind, LayerKind::Conv2d | LayerKind::GnnAggregate);
        if !allowed {
            return Err(LowerError::UnsupportedFuzzy {
                layer: layer.id.clone(),
                dim: dim.clone(),
            });
        }
    }
    let mut symbols = Vec::new();
    let tokens = |layer: &LayerSpec, symbols: &mut Vec<(String, SymbolDef)>| -> Result<Extent, LowerError> {
        let t = need(layer, "T")?;
        if layer.fuzzy.contains("T") {
            let name = format!("{}.T", layer.id);
            symbols.push((
                name.clone(),
                SymbolDef::Input {
                    layer: layer.id.clone(),
                    dim: "T".into(),
                    estimate: t,
                },
            ));
            Ok(Extent::symbolic(name, t))
        } else {
            Ok(Extent::fixed(t))
        }
    };
    let (rows, cols) = match layer.kind {
        LayerKind::Embed => {
            let d = need(layer, "D")?;
            (tokens(layer, &mut symbols)?, layer.get("F").unwrap_or(d))
        }
        LayerKind::Conv2d => (
            Extent::fixed(need(layer, "H")? * need(layer, "W")?),
            need(layer, "C_in")?,
        ),
        LayerKind::GnnAggregate => (Extent::fixed(need(layer, "V")?), need(layer, "D")?),
        LayerKind::Linear | LayerKind::MatMul | LayerKind::Attention => {
            (tokens(layer, &mut symbols)?, need(layer, "D")?)
        }
        _ => (tokens(layer, &mut symbols)?, need(layer, "D")?),
    };
    Ok((TensorRef { buf, rows, cols }, symbols))
}

fn check_rows(layer: &LayerSpec, input: &TensorRef) -> Result<(), LowerError> {
    if let Some(t) = layer.get("T") {
        if input.rows.is_fixed() && input.rows.est != t && !layer.fuzzy.contains("T") {
            return Err(mismatch(
                layer,
                format!("declared T={t} but input has {} rows", input.rows.est),
            ));
        }
    }
    Ok(())
}

fn check_cols(layer: &LayerSpec, input: &TensorRef, dim: &str) -> Result<usize, LowerError> {
    let d = need(layer, dim)?;
    if input.cols != d {
        return Err(mismatch(
            layer,
            format!("{dim}={d} but input has {} columns", input.cols),
        ));
    }
    Ok(d)
}

fn ddmm(id: String, layer: &LayerSpec, n: Extent, m: usize, k: usize) -> Kernel {
    let mut kern = Kernel::new(
        id,
        KernelKind::Ddmm,
        KernelShape {
            n,
            m: Extent::fixed(m),
            k: Extent::fixed(k),
        },
        &layer.id,
    );
    kern.hint = layer.hint;
    kern
}

/// Lowers one layer given the tensors its predecessors produce (or, for a
/// graph input, the external tensor from [`graph_input`]).
pub fn lower_layer(
    layer: &LayerSpec,
    incoming: &[TensorRef],
    opts: &LowerOptions,
) -> Result<Lowered, LowerError> {
    let id = &layer.id;
    let out_buf = format!("{id}.out");
    let mut symbols = Vec::new();
    let one = |incoming: &[TensorRef]| -> Result<TensorRef, LowerError> {
        match incoming {
            [x] => Ok(x.clone()),
            _ => Err(arity(layer, "1", incoming.len())),
        }
    };
    let kernels = match layer.kind {
        LayerKind::Embed => {
            let x = one(incoming)?;
            check_rows(layer, &x)?;
            let d = need(layer, "D")?;
            let f = layer.get("F").unwrap_or(d);
            if x.cols != f {
                return Err(mismatch(layer, format!("F={f} but input has {} columns", x.cols)));
            }
            let mut k = ddmm(format!("{id}.proj"), layer, x.rows.clone(), d, f);
            k.inputs = vec![
                Operand::act(&x.buf),
                Operand::Weight {
                    id: format!("{id}.w"),
                    rows: f,
                    cols: d,
                },
            ];
            k.output = out_buf.clone();
            vec![k]
        }
        LayerKind::Linear => {
            let x = one(incoming)?;
            check_rows(layer, &x)?;
            let d = check_cols(layer, &x, "D")?;
            let d_out = need(layer, "D_out")?;
            let mut k = ddmm(format!("{id}.fc"), layer, x.rows.clone(), d_out, d);
            k.inputs = vec![
                Operand::act(&x.buf),
                Operand::Weight {
                    id: format!("{id}.w"),
                    rows: d,
                    cols: d_out,
                },
            ];
            k.output = out_buf.clone();
            vec![k]
        }
        LayerKind::MatMul => match incoming {
            [x] => {
                check_rows(layer, x)?;
                let d = check_cols(layer, x, "D")?;
                let d_out = need(layer, "D_out")?;
                let mut k = ddmm(format!("{id}.mm"), layer, x.rows.clone(), d_out, d);
                k.inputs = vec![
                    Operand::act(&x.buf),
                    Operand::Weight {
                        id: format!("{id}.w"),
                        rows: d,
                        cols: d_out,
                    },
                ];
                k.output = out_buf.clone();
                vec![k]
            }
            [a, b] => {
                if a.cols != b.cols {
                    return Err(mismatch(
                        layer,
                        format!("operand widths differ: {} vs {}", a.cols, b.cols),
                    ));
                }
                let mut k = Kernel::new(
                    format!("{id}.mm"),
                    KernelKind::Ddmm,
                    KernelShape {
                        n: a.rows.clone(),
                        m: b.rows.clone(),
                        k: Extent::fixed(a.cols),
                    },
                    id,
                );
                k.hint = layer.hint;
                k.inputs = vec![
                    Operand::act(&a.buf),
                    Operand::Act {
                        bufs: vec![b.buf.clone()],
                        transpose: true,
                        cols: None,
                        gather: None,
                        head_split: None,
                    },
                ];
                k.output = out_buf.clone();
                vec![k]
            }
            _ => return Err(arity(layer, "1 or 2", incoming.len())),
        },
        LayerKind::Conv2d => {
            let x = one(incoming)?;
            if let Some(dim) = layer.fuzzy.iter().next() {
                return Err(LowerError::UnsupportedFuzzy {
                    layer: id.clone(),
                    dim: dim.clone(),
                });
            }
            let c_in = check_cols(layer, &x, "C_in")?;
            let (h, w) = (need(layer, "H")?, need(layer, "W")?);
            if !x.rows.is_fixed() || x.rows.est != h * w {
                return Err(mismatch(
                    layer,
                    format!("input has {} rows, expected H*W={}", x.rows, h * w),
                ));
            }
            let kernel = need(layer, "kernel")?;
            let stride = layer.get("stride").unwrap_or(1);
            let pad = layer.get("pad").unwrap_or(kernel / 2);
            let geom = ConvGeom::new(c_in, h, w, kernel, stride, pad)
                .ok_or_else(|| mismatch(layer, "kernel larger than padded input".into()))?;
            let c_out = need(layer, "C_out")?;
            let mut k = ddmm(
                format!("{id}.conv"),
                layer,
                Extent::fixed(geom.positions()),
                c_out,
                geom.patch_len(),
            );
            k.inputs = vec![
                Operand::Im2col {
                    buf: x.buf.clone(),
                    geom,
                },
                Operand::Weight {
                    id: format!("{id}.w"),
                    rows: geom.patch_len(),
                    cols: c_out,
                },
            ];
            k.output = out_buf.clone();
            vec![k]
        }
        LayerKind::Gelu | LayerKind::Softmax | LayerKind::LayerNorm => {
            let x = one(incoming)?;
            let nk = match layer.kind {
                LayerKind::Gelu => NonlinearKind::Gelu,
                LayerKind::Softmax => NonlinearKind::Softmax,
                _ => NonlinearKind::LayerNorm,
            };
            let mut k = Kernel::new(
                format!("{id}.nl"),
                KernelKind::Nonlinear(nk),
                KernelShape {
                    n: x.rows.clone(),
                    m: Extent::fixed(x.cols),
                    k: Extent::fixed(1),
                },
                id,
            );
            k.inputs = vec![Operand::act(&x.buf)];
            k.output = out_buf.clone();
            vec![k]
        }
        LayerKind::ElementwiseAdd => {
            let (a, b) = match incoming {
                [a, b] => (a, b),
                _ => return Err(arity(layer, "2", incoming.len())),
            };
            if a.cols != b.cols {
                return Err(mismatch(
                    layer,
                    format!("operand widths differ: {} vs {}", a.cols, b.cols),
                ));
            }
            if a.rows.is_fixed() && b.rows.is_fixed() && a.rows.est != b.rows.est {
                return Err(mismatch(
                    layer,
                    format!("row counts differ: {} vs {}", a.rows.est, b.rows.est),
                ));
            }
            // Differing symbolic rows: the pruned operand sets the extent and
            // the runtime gathers the other through its kept-index stream.
            let rows = if b.rows.est < a.rows.est { b.rows.clone() } else { a.rows.clone() };
            let mut k = Kernel::new(
                format!("{id}.add"),
                KernelKind::Elementwise,
                KernelShape {
                    n: rows,
                    m: Extent::fixed(a.cols),
                    k: Extent::fixed(1),
                },
                id,
            );
            k.inputs = vec![Operand::act(&a.buf), Operand::act(&b.buf)];
            k.output = out_buf.clone();
            vec![k]
        }
        LayerKind::TokenPrune => {
            let x = one(incoming)?;
            let prune = layer.prune.unwrap_or(PruneRequest::Rate { rate: 0.0 });
            let (keep, sym) = kept_symbol(id, &x.rows, prune);
            symbols.push(sym);
            let mut k = Kernel::new(
                format!("{id}.topk"),
                KernelKind::TopK,
                KernelShape {
                    n: Extent::fixed(1),
                    m: x.rows.clone(),
                    k: Extent::fixed(x.cols),
                },
                id,
            );
            k.topk = Some(TopkParams {
                keep: keep.clone(),
                stream: x.rows.clone(),
                width: topk_width(opts.array_width),
                prune,
                score: ScoreSource::RowSum,
                gather_input: true,
            });
            k.inputs = vec![Operand::act(&x.buf)];
            k.output = out_buf.clone();
            k.out_rows = keep;
            k.out_cols = x.cols;
            vec![k]
        }
        LayerKind::GnnAggregate => {
            let x = one(incoming)?;
            if let Some(dim) = layer.fuzzy.iter().next() {
                return Err(LowerError::UnsupportedFuzzy {
                    layer: id.clone(),
                    dim: dim.clone(),
                });
            }
            let v = need(layer, "V")?;
            let e = need(layer, "E")?;
            let d = check_cols(layer, &x, "D")?;
            if !x.rows.is_fixed() || x.rows.est != v {
                return Err(mismatch(layer, format!("input has {} rows, expected V={v}", x.rows)));
            }
            if let Some(deg) = &layer.degrees {
                if deg.len() != v || deg.iter().sum::<usize>() != e || deg.iter().any(|&x| x > v) {
                    return Err(mismatch(
                        layer,
                        "degree list must have V entries, each at most V, summing to E".into(),
                    ));
                }
            }
            if e > v * v {
                return Err(mismatch(layer, format!("E={e} exceeds V^2")));
            }
            let mut k = Kernel::new(
                format!("{id}.agg"),
                KernelKind::Spmm,
                KernelShape::fixed(v, d, v),
                id,
            );
            k.inputs = vec![
                Operand::Adjacency {
                    id: format!("{id}.adj"),
                    nodes: v,
                    edges: e,
                    degrees: layer.degrees.clone(),
                },
                Operand::act(&x.buf),
            ];
            k.mask = Some(MaskSource::Adjacency);
            k.output = out_buf.clone();
            k.sparsity = Some(adjacency_profile(v, e, layer.degrees.as_deref(), opts.default_graph_skew));
            vec![k]
        }
        LayerKind::Attention => {
            let x = one(incoming)?;
            check_rows(layer, &x)?;
            let lowered = lower_attention(layer, &x, opts)?;
            symbols.extend(lowered.1);
            lowered.0
        }
    };
    let last = kernels.last().expect("every layer lowers to at least one kernel");
    let output = TensorRef {
        buf: last.output.clone(),
        rows: last.out_rows.clone(),
        cols: last.out_cols,
    };
    Ok(Lowered {
        kernels,
        output,
        symbols,
    })
}

fn topk_width(array_width: usize) -> usize {
    // largest power of two not above the array width
    let mut w = 1;
    while w * 2 <= array_width {
        w *= 2;
    }
    w
}

fn kept_symbol(layer: &str, stream: &Extent, prune: PruneRequest) -> (Extent, (String, SymbolDef)) {
    let name = format!("{layer}.kept");
    let est = prune.kept(stream.est);
    (
        Extent::symbolic(name.clone(), est),
        (
            name,
            SymbolDef::Kept {
                layer: layer.to_string(),
                stream: stream.clone(),
                prune,
            },
        ),
    )
}

/// Degree list of a generated adjacency: the declared list, or `E` spread
/// as evenly as possible over `V` rows.
pub fn adjacency_degrees(nodes: usize, edges: usize, declared: Option<&[usize]>) -> Vec<usize> {
    match declared {
        Some(d) => d.to_vec(),
        None => (0..nodes)
            .map(|r| edges / nodes + usize::from(r < edges % nodes))
            .collect(),
    }
}

fn adjacency_profile(nodes: usize, edges: usize, degrees: Option<&[usize]>, default_skew: f64) -> SparsityProfile {
    match degrees {
        Some(d) => SparsityProfile::from_row_counts(d, nodes, SparsitySource::Static),
        None => {
            let mean = edges as f64 / nodes as f64;
            SparsityProfile {
                p: 1.0 - mean / nodes as f64,
                per_row_activity: mean,
                skew: default_skew,
                source: SparsitySource::Static,
                row_len: nodes,
            }
        }
    }
}

fn lower_attention(
    layer: &LayerSpec,
    x: &TensorRef,
    opts: &LowerOptions,
) -> Result<(Vec<Kernel>, Vec<(String, SymbolDef)>), LowerError> {
    let id = &layer.id;
    let d = check_cols(layer, x, "D")?;
    let heads = need(layer, "H")?;
    if d % heads != 0 {
        return Err(mismatch(layer, format!("D={d} not divisible by H={heads}")));
    }
    let dh = d / heads;
    let t = x.rows.clone();
    let mut symbols = Vec::new();
    let mut out = Vec::new();

    let (q, k, v) = (format!("{id}.q"), format!("{id}.k"), format!("{id}.v"));
    for (name, buf) in [("q", &q), ("k", &k), ("v", &v)] {
        let mut kern = ddmm(format!("{id}.{name}_proj"), layer, t.clone(), d, d);
        kern.inputs = vec![
            Operand::act(&x.buf),
            Operand::Weight {
                id: format!("{id}.w{name}"),
                rows: d,
                cols: d,
            },
        ];
        kern.output = buf.clone();
        out.push(kern);
    }

    let score_scale = 1.0 / (dh as f64).sqrt();
    let pruned = layer.prune.map(|prune| {
        let (keep, sym) = kept_symbol(id, &t, prune);
        symbols.push(sym);
        (keep, prune)
    });
    let kept_buf = format!("{id}.kept");
    if let Some((keep, prune)) = &pruned {
        let mut kern = Kernel::new(
            format!("{id}.topk"),
            KernelKind::TopK,
            KernelShape {
                n: Extent::fixed(1),
                m: t.clone(),
                k: Extent::fixed(d),
            },
            id,
        );
        kern.topk = Some(TopkParams {
            keep: keep.clone(),
            stream: t.clone(),
            width: topk_width(opts.array_width),
            prune: *prune,
            score: ScoreSource::ClsAttention,
            gather_input: false,
        });
        kern.inputs = vec![Operand::act(&q), Operand::act(&k)];
        kern.output = kept_buf.clone();
        kern.out_rows = keep.clone();
        kern.out_cols = 4; // 32-bit indices
        out.push(kern);
    }
    // token extent after the score stage
    let rows = pruned.as_ref().map_or(t.clone(), |(keep, _)| keep.clone());
    let sparse_profile = |prune: PruneRequest, keep: &Extent| SparsityProfile {
        p: match prune {
            PruneRequest::Rate { rate } => rate,
            PruneRequest::Keep { .. } => 1.0 - keep.est as f64 / t.est as f64,
        },
        per_row_activity: keep.est as f64,
        skew: 0.0,
        source: SparsitySource::PruneDerived,
        row_len: t.est,
    };

    let looped = heads > opts.head_fanout_cap;
    let head_ids: Vec<Option<usize>> = if looped {
        vec![None]
    } else {
        (0..heads).map(Some).collect()
    };
    let col_window = |h: Option<usize>| h.map(|h| (h * dh, dh));
    let split = if looped { Some(HeadSplit::Cols) } else { None };
    let mut head_outputs = Vec::new();
    for h in head_ids {
        let tag = h.map_or("all".to_string(), |h| format!("h{h}"));
        let s_buf = format!("{id}.s.{tag}");
        let p_buf = format!("{id}.p.{tag}");
        let o_buf = format!("{id}.o.{tag}");
        let heads_loop = |output| {
            looped.then_some(HeadLoop {
                count: heads,
                dim: dh,
                output,
            })
        };

        // scores
        let mut sc = Kernel::new(
            format!("{id}.scores.{tag}"),
            if pruned.is_some() { KernelKind::Sddmm } else { KernelKind::Ddmm },
            KernelShape {
                n: rows.clone(),
                m: rows.clone(),
                k: Extent::fixed(dh),
            },
            id,
        );
        sc.inputs = vec![
            Operand::Act {
                bufs: vec![q.clone()],
                transpose: false,
                cols: col_window(h),
                gather: None,
                head_split: split,
            },
            Operand::Act {
                bufs: vec![k.clone()],
                transpose: true,
                cols: col_window(h),
                gather: None,
                head_split: split,
            },
        ];
        sc.heads = heads_loop(HeadSplit::Rows);
        sc.scale_mul = score_scale;
        sc.output = s_buf.clone();
        if looped {
            sc.out_rows = scaled_rows(&rows, heads);
        }
        if let Some((keep, prune)) = &pruned {
            sc.mask = Some(MaskSource::KeptSquare(kept_buf.clone()));
            sc.stream_len = Some(t.clone());
            sc.prune = Some(*prune);
            sc.sparsity = Some(sparse_profile(*prune, keep));
        }
        sc.hint = layer.hint;
        let sc_rows = sc.out_rows.clone();
        out.push(sc);

        // softmax over the kept set
        let mut sm = Kernel::new(
            format!("{id}.softmax.{tag}"),
            KernelKind::Nonlinear(NonlinearKind::Softmax),
            KernelShape {
                n: sc_rows,
                m: rows.clone(),
                k: Extent::fixed(1),
            },
            id,
        );
        sm.out_cols = rows.est;
        sm.inputs = vec![Operand::act(&s_buf)];
        sm.output = p_buf.clone();
        out.push(sm);

        // weighted sum
        let mut ws = Kernel::new(
            format!("{id}.context.{tag}"),
            if pruned.is_some() { KernelKind::Spmm } else { KernelKind::Ddmm },
            KernelShape {
                n: rows.clone(),
                m: Extent::fixed(dh),
                k: rows.clone(),
            },
            id,
        );
        ws.inputs = vec![
            Operand::Act {
                bufs: vec![p_buf.clone()],
                transpose: false,
                cols: None,
                gather: None,
                head_split: looped.then_some(HeadSplit::Rows),
            },
            Operand::Act {
                bufs: vec![v.clone()],
                transpose: false,
                cols: col_window(h),
                gather: pruned.as_ref().map(|_| kept_buf.clone()),
                head_split: split,
            },
        ];
        ws.heads = heads_loop(HeadSplit::Cols);
        if looped {
            ws.out_cols = d;
        }
        ws.output = o_buf.clone();
        if let Some((keep, prune)) = &pruned {
            ws.mask = Some(MaskSource::DenseLeft);
            ws.stream_len = Some(t.clone());
            ws.prune = Some(*prune);
            ws.sparsity = Some(sparse_profile(*prune, keep));
        }
        ws.hint = layer.hint;
        out.push(ws);
        head_outputs.push(o_buf);
    }

    let mut proj = ddmm(format!("{id}.out_proj"), layer, rows, d, d);
    proj.inputs = vec![
        Operand::Act {
            bufs: head_outputs,
            transpose: false,
            cols: None,
            gather: None,
            head_split: None,
        },
        Operand::Weight {
            id: format!("{id}.wo"),
            rows: d,
            cols: d,
        },
    ];
    proj.output = format!("{id}.out");
    out.push(proj);
    Ok((out, symbols))
}

fn scaled_rows(rows: &Extent, factor: usize) -> Extent {
    Extent {
        est: rows.est * factor,
        sym: rows.sym.as_ref().map(|s| format!("{factor}*{s}")),
    }
}

/// Sparsity profile for a sampled/sparse kernel.
///
/// Prune-derived masks get `p` from the request and zero skew. Graph
/// adjacencies use `E/V` activity and the degree-list CV when one exists.
pub fn estimate_sparsity(
    kern: &Kernel,
    prune: Option<PruneRequest>,
    default_graph_skew: f64,
) -> Result<SparsityProfile, LowerError> {
    if !kern.kind.is_sparse() {
        return Err(LowerError::DenseKernel(kern.id.clone()));
    }
    if let Some(prune) = prune {
        let row_len = kern
            .stream_len
            .as_ref()
            .map_or(kern.shape.k.est, |e| e.est);
        let kept = prune.kept(row_len);
        let p = match prune {
            PruneRequest::Rate { rate } => rate,
            PruneRequest::Keep { .. } => 1.0 - kept as f64 / row_len as f64,
        };
        return Ok(SparsityProfile {
            p,
            per_row_activity: kept as f64,
            skew: 0.0,
            source: SparsitySource::PruneDerived,
            row_len,
        });
    }
    for op in &kern.inputs {
        if let Operand::Adjacency {
            nodes,
            edges,
            degrees,
            ..
        } = op
        {
            return Ok(adjacency_profile(*nodes, *edges, degrees.as_deref(), default_graph_skew));
        }
    }
    kern.sparsity
        .clone()
        .ok_or_else(|| LowerError::DenseKernel(kern.id.clone()))
}

/// Whole-graph lowering result.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredGraph {
    pub kernels: Vec<Kernel>,
    pub symbols: BTreeMap<String, SymbolDef>,
    pub inputs: Vec<TensorRef>,
    pub outputs: Vec<TensorRef>,
}

/// Lowers every layer in topological order.
pub fn lower_graph(g: &ModelGraph, opts: &LowerOptions) -> Result<LoweredGraph, LowerError> {
    let order = g
        .topo_order()
        .map_err(|e| mismatch(&g.layers[0], e.to_string()))?;
    let mut produced: BTreeMap<String, TensorRef> = BTreeMap::new();
    let mut kernels = Vec::new();
    let mut symbols = BTreeMap::new();
    let mut inputs = Vec::new();
    for i in order {
        let layer = &g.layers[i];
        let incoming: Vec<TensorRef> = if g.is_input(&layer.id) {
            let (t, syms) = graph_input(layer)?;
            symbols.extend(syms);
            inputs.push(t.clone());
            vec![t]
        } else {
            g.predecessors(&layer.id)
                .iter()
                .map(|p| produced[*p].clone())
                .collect()
        };
        let lowered = lower_layer(layer, &incoming, opts)?;
        symbols.extend(lowered.symbols);
        kernels.extend(lowered.kernels);
        produced.insert(layer.id.clone(), lowered.output);
    }
    let outputs = g.outputs.iter().map(|o| produced[o].clone()).collect();
    Ok(LoweredGraph {
        kernels,
        symbols,
        inputs,
        outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attn(t: usize, d: usize, h: usize, prune: Option<f64>) -> (LayerSpec, TensorRef) {
        let mut l = LayerSpec::new("a", LayerKind::Attention).dim("D", d).dim("H", h);
        if let Some(p) = prune {
            l = l.with_prune(PruneRequest::Rate { rate: p });
        }
        let x = TensorRef {
            buf: "x".into(),
            rows: Extent::fixed(t),
            cols: d,
        };
        (l, x)
    }

    #[test]
    fn pruned_attention_shapes() {
        let (l, x) = attn(197, 192, 3, Some(0.3));
        let low = lower_layer(&l, &[x], &LowerOptions::default()).unwrap();
        let kinds: Vec<_> = low.kernels.iter().map(|k| (k.kind, k.shape.est())).collect();
        assert_eq!(kinds[0], (KernelKind::Ddmm, (197, 192, 192)));
        assert_eq!(kinds[1], (KernelKind::Ddmm, (197, 192, 192)));
        assert_eq!(kinds[2], (KernelKind::Ddmm, (197, 192, 192)));
        let topk = &low.kernels[3];
        assert_eq!(topk.kind, KernelKind::TopK);
        assert_eq!(topk.topk.as_ref().unwrap().keep.est, 138);
        let sddmm: Vec<_> = low.kernels.iter().filter(|k| k.kind == KernelKind::Sddmm).collect();
        assert_eq!(sddmm.len(), 3);
        assert!(sddmm.iter().all(|k| k.shape.est() == (138, 138, 64)));
        let spmm: Vec<_> = low.kernels.iter().filter(|k| k.kind == KernelKind::Spmm).collect();
        assert!(spmm.iter().all(|k| k.shape.est() == (138, 64, 138)));
        let softmax = low
            .kernels
            .iter()
            .filter(|k| k.kind == KernelKind::Nonlinear(NonlinearKind::Softmax))
            .count();
        assert_eq!(softmax, 3);
        assert_eq!(low.kernels.last().unwrap().shape.est(), (138, 192, 192));
        assert_eq!(low.output.rows.est, 138);
        assert_eq!(low.output.rows.sym.as_deref(), Some("a.kept"));
    }

    #[test]
    fn conv_im2col_shape() {
        let l = LayerSpec::new("c", LayerKind::Conv2d)
            .dim("C_in", 3)
            .dim("C_out", 64)
            .dim("kernel", 7)
            .dim("stride", 2)
            .dim("pad", 3)
            .dim("H", 224)
            .dim("W", 224);
        let x = TensorRef {
            buf: "img".into(),
            rows: Extent::fixed(224 * 224),
            cols: 3,
        };
        let low = lower_layer(&l, &[x], &LowerOptions::default()).unwrap();
        assert_eq!(low.kernels[0].shape.est(), (112 * 112, 64, 147));
    }

    #[test]
    fn gnn_aggregate_profile() {
        let l = LayerSpec::new("g", LayerKind::GnnAggregate)
            .dim("V", 104)
            .dim("E", 832)
            .dim("D", 64);
        let x = TensorRef {
            buf: "nodes".into(),
            rows: Extent::fixed(104),
            cols: 64,
        };
        let low = lower_layer(&l, &[x], &LowerOptions::default()).unwrap();
        let k = &low.kernels[0];
        assert_eq!(k.kind, KernelKind::Spmm);
        assert_eq!(k.shape.est(), (104, 64, 104));
        let s = k.sparsity.as_ref().unwrap();
        assert!((s.per_row_activity - 8.0).abs() < 1e-12);
        assert_eq!(s.skew, 0.0);
    }

    #[test]
    fn star_graph_skew() {
        let mut deg = vec![1usize; 104];
        deg[0] = 103;
        let kern = Kernel {
            inputs: vec![Operand::Adjacency {
                id: "adj".into(),
                nodes: 104,
                edges: 206,
                degrees: Some(deg.clone()),
            }],
            ..Kernel::new("s".into(), KernelKind::Spmm, KernelShape::fixed(104, 8, 104), "g")
        };
        let prof = estimate_sparsity(&kern, None, 0.0).unwrap();
        // direct statistics over the degree list
        let mean = 206.0 / 104.0;
        let var = deg.iter().map(|&d| (d as f64 - mean).powi(2)).sum::<f64>() / 104.0;
        assert!((prof.skew - var.sqrt() / mean).abs() < 1e-12);
        assert!((prof.per_row_activity - mean).abs() < 1e-12);
    }

    #[test]
    fn uniform_degrees_have_zero_skew() {
        let kern = Kernel {
            inputs: vec![Operand::Adjacency {
                id: "adj".into(),
                nodes: 10,
                edges: 30,
                degrees: Some(vec![3; 10]),
            }],
            ..Kernel::new("s".into(), KernelKind::Spmm, KernelShape::fixed(10, 8, 10), "g")
        };
        let prof = estimate_sparsity(&kern, None, 0.7).unwrap();
        assert_eq!(prof.skew, 0.0);
        assert_eq!(prof.per_row_activity, 3.0);
    }

    #[test]
    fn prune_derived_profile() {
        let (l, x) = attn(197, 192, 3, Some(0.3));
        let low = lower_layer(&l, &[x], &LowerOptions::default()).unwrap();
        let sd = low.kernels.iter().find(|k| k.kind == KernelKind::Sddmm).unwrap();
        let prof = estimate_sparsity(sd, Some(PruneRequest::Rate { rate: 0.3 }), 0.0).unwrap();
        assert_eq!(prof.p, 0.3);
        assert_eq!(prof.skew, 0.0);
        assert_eq!(prof.source, SparsitySource::PruneDerived);
        assert!((prof.per_row_activity - (1.0 - prof.p) * prof.row_len as f64).abs() <= 1.0);
    }

    #[test]
    fn dense_kernel_has_no_profile() {
        let k = Kernel::new("d".into(), KernelKind::Ddmm, KernelShape::fixed(2, 2, 2), "l");
        assert!(matches!(estimate_sparsity(&k, None, 0.0), Err(LowerError::DenseKernel(_))));
    }

    #[test]
    fn heads_beyond_cap_become_loop_bound() {
        let (l, x) = attn(16, 48, 6, None);
        let low = lower_layer(&l, &[x], &LowerOptions::default()).unwrap();
        let scores: Vec<_> = low.kernels.iter().filter(|k| k.id.contains(".scores.")).collect();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].heads.unwrap().count, 6);
        let macs: u64 = low.kernels.iter().map(Kernel::macs_est).sum();
        assert_eq!(macs, 4 * 16 * 48 * 48 + 2 * 16 * 16 * 48);
    }

    #[test]
    fn shape_mismatch_reported() {
        let l = LayerSpec::new("fc", LayerKind::Linear).dim("D", 8).dim("D_out", 4);
        let x = TensorRef {
            buf: "x".into(),
            rows: Extent::fixed(3),
            cols: 16,
        };
        assert!(matches!(
            lower_layer(&l, &[x], &LowerOptions::default()),
            Err(LowerError::ShapeMismatch { .. })
        ));
    }
}

//! Functional evaluation of one block against the buffer store.

use std::collections::BTreeMap;

use crate::config::HardwareConfig;
use crate::error::{RuntimeError, SimError};
use crate::kernel_ir::{adjacency_degrees, HeadSplit, Kernel, KernelKind, MaskSource, Operand, ScoreSource};
use crate::mode_policy::MseMode;
use crate::sim::nonlinear::{exec_nonlinear, NonlinearTables};
use crate::sim::{
    build_sparse_queue, exec_radt, exec_simd_row, exec_systolic, exec_topk, requantize, CycleReport, QueueSource,
    SparseOp, SystolicVariant, Tiling,
};
use crate::{AccTensor, QTensor};

use super::data;

/// A produced buffer. Timing-only runs keep shapes and index lists only.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub rows: usize,
    pub cols: usize,
    pub data: Option<QTensor>,
    /// Kept token indices, for index-stream buffers.
    pub indices: Option<Vec<usize>>,
    /// Token positions of the rows relative to the tensor they were pruned
    /// from; used to align residual additions.
    pub origin: Option<Vec<usize>>,
}

impl Buffer {
    pub fn tensor(t: QTensor, origin: Option<Vec<usize>>) -> Self {
        Buffer {
            rows: t.rows,
            cols: t.cols,
            data: Some(t),
            indices: None,
            origin,
        }
    }

    pub fn shape(rows: usize, cols: usize, origin: Option<Vec<usize>>) -> Self {
        Buffer {
            rows,
            cols,
            data: None,
            indices: None,
            origin,
        }
    }

    pub fn bytes(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

pub type Store = BTreeMap<String, Buffer>;

pub struct ExecCtx<'a> {
    pub hw: &'a HardwareConfig,
    pub seed: u64,
    pub functional: bool,
    pub tables: &'a NonlinearTables<f64>,
}

fn engine(block: &str) -> impl Fn(SimError) -> RuntimeError + '_ {
    move |source| RuntimeError::Engine {
        block: block.to_string(),
        source,
    }
}

fn get<'s>(store: &'s Store, name: &str) -> Result<&'s Buffer, RuntimeError> {
    store.get(name).ok_or_else(|| RuntimeError::MissingBuffer(name.to_string()))
}

fn data<'s>(store: &'s Store, name: &str) -> Result<&'s QTensor, RuntimeError> {
    get(store, name)?
        .data
        .as_ref()
        .ok_or_else(|| RuntimeError::MissingBuffer(name.to_string()))
}

fn indices<'s>(store: &'s Store, name: &str) -> Result<&'s [usize], RuntimeError> {
    get(store, name)?
        .indices
        .as_deref()
        .ok_or_else(|| RuntimeError::MissingBuffer(name.to_string()))
}

/// Kept-token count and ascending kept list of a pruning request.
pub fn apply_pruning(
    scores: &[i64],
    keep: usize,
    width: usize,
    hw: &HardwareConfig,
) -> Result<(Vec<usize>, CycleReport), RuntimeError> {
    if scores.is_empty() {
        return Err(RuntimeError::Pruning("empty score stream".into()));
    }
    if keep == 0 || keep > scores.len() {
        return Err(RuntimeError::Pruning(format!(
            "cannot keep {keep} of {} tokens",
            scores.len()
        )));
    }
    let (res, rep) = exec_topk(scores, keep, width, &hw.topk, 0, &hw.array)
        .map_err(|e| RuntimeError::Pruning(e.to_string()))?;
    let mut kept = res.indices;
    kept.sort_unstable();
    Ok((kept, rep))
}

/// Per-head active counts of a sparse kernel as observed from its inputs.
pub fn observed_rows(kern: &Kernel, store: &Store, seed: u64) -> Result<Option<Vec<usize>>, RuntimeError> {
    if !kern.kind.is_sparse() {
        return Ok(None);
    }
    let (n, m, k) = kern.shape.est();
    let rows = match &kern.mask {
        Some(MaskSource::KeptSquare(buf)) => {
            let kept = indices(store, buf)?.len();
            if kept != n || kept != m {
                return Err(RuntimeError::BindingViolation {
                    block: kern.id.clone(),
                    detail: format!("kept stream has {kept} tokens but the block is bound to {n}x{m}"),
                });
            }
            vec![kept; kept]
        }
        Some(MaskSource::Adjacency) => adjacency_of(kern, seed).1,
        Some(MaskSource::DenseLeft) | None => {
            let full = if kern.kind == KernelKind::Sddmm { m } else { k };
            vec![full; n]
        }
    };
    Ok(Some(rows))
}

fn adjacency_of(kern: &Kernel, seed: u64) -> (Vec<(usize, usize)>, Vec<usize>) {
    for op in &kern.inputs {
        if let Operand::Adjacency {
            id,
            nodes,
            edges,
            degrees,
        } = op
        {
            let deg = adjacency_degrees(*nodes, *edges, degrees.as_deref());
            return (data::adjacency(seed, id, *nodes, &deg), deg);
        }
    }
    (Vec::new(), Vec::new())
}

fn im2col(x: &QTensor, g: &crate::kernel_ir::ConvGeom) -> QTensor {
    let plen = g.patch_len();
    let mut out = vec![0i8; g.positions() * plen];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = oy * g.w_out + ox;
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        continue;
                    }
                    let src = x.row(iy as usize * g.w + ix as usize);
                    let dst = row * plen + (ky * g.kernel + kx) * g.c_in;
                    out[dst..dst + g.c_in].copy_from_slice(src);
                }
            }
        }
    }
    QTensor::new(g.positions(), plen, out, x.scale).expect("patch sizes match")
}

fn operand(
    kern: &Kernel,
    op: &Operand,
    head: usize,
    store: &Store,
    ctx: &ExecCtx<'_>,
) -> Result<QTensor, RuntimeError> {
    let err = engine(&kern.id);
    match op {
        Operand::Act {
            bufs,
            transpose,
            cols,
            gather,
            head_split,
        } => {
            let parts: Vec<&QTensor> = bufs.iter().map(|b| data(store, b)).collect::<Result<_, _>>()?;
            let mut t = if parts.len() == 1 {
                parts[0].clone()
            } else {
                QTensor::concat_cols(&parts).map_err(&err)?
            };
            if let Some(g) = gather {
                t = t.select_rows(indices(store, g)?).map_err(&err)?;
            }
            if let Some((start, len)) = cols {
                t = t.col_window(*start, *len).map_err(&err)?;
            }
            if let (Some(split), Some(hl)) = (head_split, kern.heads) {
                t = match split {
                    HeadSplit::Cols => t.col_window(head * hl.dim, hl.dim),
                    HeadSplit::Rows => {
                        let per = t.rows / hl.count;
                        t.row_block(head * per, per)
                    }
                }
                .map_err(&err)?;
            }
            Ok(if *transpose { t.transpose() } else { t })
        }
        Operand::Weight { id, rows, cols } => Ok(data::weight(ctx.seed, id, *rows, *cols)),
        Operand::Im2col { buf, geom } => Ok(im2col(data(store, buf)?, geom)),
        Operand::Adjacency { nodes, .. } => {
            let (coords, _) = adjacency_of(kern, ctx.seed);
            let mut t = QTensor::zeros(*nodes, *nodes, 1.0);
            for (r, c) in coords {
                t.data[r * nodes + c] = 1;
            }
            Ok(t)
        }
    }
}

fn stack(parts: Vec<AccTensor>, split: HeadSplit) -> AccTensor {
    if parts.len() == 1 {
        return parts.into_iter().next().expect("one part");
    }
    let scale = parts[0].scale;
    match split {
        HeadSplit::Rows => {
            let cols = parts[0].cols;
            let rows = parts.iter().map(|p| p.rows).sum();
            let data = parts.into_iter().flat_map(|p| p.data).collect();
            AccTensor { rows, cols, data, scale }
        }
        HeadSplit::Cols => {
            let rows = parts[0].rows;
            let cols = parts.iter().map(|p| p.cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in &parts {
                    data.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
                }
            }
            AccTensor { rows, cols, data, scale }
        }
    }
}

/// Keeps rows and columns listed in `kept`.
fn compact(acc: &AccTensor, kept: &[usize]) -> AccTensor {
    let mut out = AccTensor::zeros(kept.len(), kept.len(), acc.scale);
    for (i, &r) in kept.iter().enumerate() {
        for (j, &c) in kept.iter().enumerate() {
            out.set(i, j, acc.get(r, c));
        }
    }
    out
}

fn product(
    kern: &Kernel,
    mode: &MseMode,
    tiling: Tiling,
    head: usize,
    store: &Store,
    ctx: &ExecCtx<'_>,
) -> Result<AccTensor, RuntimeError> {
    let err = engine(&kern.id);
    let a = operand(kern, &kern.inputs[0], head, store, ctx)?;
    let b = operand(kern, &kern.inputs[1], head, store, ctx)?;
    let arr = &ctx.hw.array;
    if kern.kind == KernelKind::Ddmm {
        let variant = if *mode == MseMode::SystolicWs {
            SystolicVariant::Ws
        } else {
            SystolicVariant::Os
        };
        return Ok(exec_systolic(&a, &b, variant, tiling, arr).map_err(&err)?.0);
    }
    let (op, q, kept) = match (&kern.mask, kern.kind) {
        (Some(MaskSource::KeptSquare(buf)), _) => {
            let kept = indices(store, buf)?.to_vec();
            let q = build_sparse_queue(QueueSource::Kept(&kept), a.rows, b.cols).map_err(&err)?;
            (SparseOp::Sddmm, q, Some(kept))
        }
        (Some(MaskSource::Adjacency), _) => {
            let (coords, _) = adjacency_of(kern, ctx.seed);
            let q = build_sparse_queue(QueueSource::Coords(&coords), a.rows, a.cols).map_err(&err)?;
            (SparseOp::Spmm, q, None)
        }
        (_, KernelKind::Sddmm) => {
            let mask = vec![true; a.rows * b.cols];
            let q = build_sparse_queue(QueueSource::Mask(&mask), a.rows, b.cols).map_err(&err)?;
            (SparseOp::Sddmm, q, None)
        }
        _ => {
            let mask = vec![true; a.rows * a.cols];
            let q = build_sparse_queue(QueueSource::Mask(&mask), a.rows, a.cols).map_err(&err)?;
            (SparseOp::Spmm, q, None)
        }
    };
    let acc = match mode {
        MseMode::Radt(p) => exec_radt(&a, &b, &q, op, *p, arr).map_err(&err)?.0,
        _ => exec_simd_row(&a, &b, &q, op, arr).map_err(&err)?.0,
    };
    Ok(match kept {
        Some(k) => compact(&acc, &k),
        None => acc,
    })
}

fn first_origin(kern: &Kernel, store: &Store) -> Option<Vec<usize>> {
    kern.inputs.iter().find_map(|op| match op {
        Operand::Act { bufs, gather, .. } => {
            if let Some(g) = gather {
                return store.get(g).and_then(|b| b.indices.clone());
            }
            store.get(bufs.first()?).and_then(|b| b.origin.clone())
        }
        _ => None,
    })
}

fn check_shape(kern: &Kernel, rows: usize, _cols: usize) -> Result<(), RuntimeError> {
    if rows != kern.out_rows.est {
        return Err(RuntimeError::BindingViolation {
            block: kern.id.clone(),
            detail: format!("produced {rows} rows but the block is bound to {}", kern.out_rows.est),
        });
    }
    Ok(())
}

fn act_rows(store: &Store, op: &Operand) -> Result<(usize, Option<Vec<usize>>), RuntimeError> {
    match op {
        Operand::Act { bufs, .. } => {
            let b = get(store, &bufs[0])?;
            Ok((b.rows, b.origin.clone()))
        }
        _ => Ok((0, None)),
    }
}

/// Residual addition; the larger operand is gathered through the smaller
/// one's token positions when their row counts differ.
fn add(kern: &Kernel, store: &Store, ctx: &ExecCtx<'_>) -> Result<Buffer, RuntimeError> {
    let (ra, oa) = act_rows(store, &kern.inputs[0])?;
    let (rb, ob) = act_rows(store, &kern.inputs[1])?;
    let gather = match ra.cmp(&rb) {
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some((0, ob)),
        std::cmp::Ordering::Less => Some((1, oa)),
    };
    let gather = match gather {
        None => None,
        Some((which, Some(pos))) => Some((which, pos)),
        Some(_) => {
            return Err(RuntimeError::BindingViolation {
                block: kern.id.clone(),
                detail: format!("row counts {ra} and {rb} differ without a kept stream"),
            })
        }
    };
    let rows = ra.min(rb);
    let cols = kern.out_cols;
    check_shape(kern, rows, cols)?;
    if !ctx.functional {
        return Ok(Buffer::shape(rows, cols, None));
    }
    let err = engine(&kern.id);
    let mut a = operand(kern, &kern.inputs[0], 0, store, ctx)?;
    let mut b = operand(kern, &kern.inputs[1], 0, store, ctx)?;
    if let Some((which, pos)) = gather {
        if which == 0 {
            a = a.select_rows(&pos).map_err(&err)?;
        } else {
            b = b.select_rows(&pos).map_err(&err)?;
        }
    }
    let vals: Vec<f64> = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x as f64 * a.scale + y as f64 * b.scale)
        .collect();
    let t = QTensor::quantize(rows, cols, &vals).map_err(&err)?;
    Ok(Buffer::tensor(t, None))
}

/// Result of one block: its output buffer and, for top-k blocks, the kept list.
pub struct Outcome {
    pub out: Buffer,
    pub kept: Option<Vec<usize>>,
}

/// Kept count a top-k block will emit for its bound stream.
pub fn topk_keep(kern: &Kernel) -> usize {
    kern.topk.as_ref().map_or(1, |t| t.keep.est)
}

pub fn exec_block(
    kern: &Kernel,
    mode: &MseMode,
    tiling: Tiling,
    store: &Store,
    ctx: &ExecCtx<'_>,
) -> Result<Outcome, RuntimeError> {
    let err = engine(&kern.id);
    let origin = first_origin(kern, store);
    let out = match kern.kind {
        KernelKind::Ddmm | KernelKind::Sddmm | KernelKind::Spmm => {
            let rows = kern.out_rows.est;
            let origin = match &kern.mask {
                Some(MaskSource::KeptSquare(buf)) => Some(indices(store, buf)?.to_vec()),
                _ => origin,
            };
            if !ctx.functional {
                Buffer::shape(rows, kern.out_cols, origin)
            } else {
                let split = kern.heads.map_or(HeadSplit::Cols, |h| h.output);
                let parts = (0..kern.head_count())
                    .map(|h| product(kern, mode, tiling, h, store, ctx))
                    .collect::<Result<Vec<_>, _>>()?;
                let mut acc = stack(parts, split);
                acc.scale *= kern.scale_mul;
                check_shape(kern, acc.rows, acc.cols)?;
                let t = requantize(&acc, acc.dynamic_scale());
                Buffer::tensor(t, origin)
            }
        }
        KernelKind::Elementwise => add(kern, store, ctx)?,
        KernelKind::Nonlinear(nk) => {
            let (rows, cols) = (kern.shape.n.est, kern.shape.m.est);
            if cols > ctx.tables.row_capacity {
                return Err(err(SimError::RowTooLong {
                    len: cols,
                    capacity: ctx.tables.row_capacity,
                }));
            }
            if !ctx.functional {
                Buffer::shape(rows, cols, origin)
            } else {
                let x = operand(kern, &kern.inputs[0], 0, store, ctx)?;
                let acc = AccTensor {
                    rows: x.rows,
                    cols: x.cols,
                    data: x.data.iter().map(|&v| v as i32).collect(),
                    scale: x.scale,
                };
                let o = exec_nonlinear(nk, &acc, ctx.tables, &ctx.hw.array).map_err(&err)?;
                check_shape(kern, o.out.rows, o.out.cols)?;
                Buffer::tensor(o.out, origin)
            }
        }
        KernelKind::TopK => return topk(kern, store, ctx),
    };
    Ok(Outcome { out, kept: None })
}

fn topk(kern: &Kernel, store: &Store, ctx: &ExecCtx<'_>) -> Result<Outcome, RuntimeError> {
    let params = kern.topk.as_ref().expect("top-k blocks carry parameters");
    let stream = params.stream.est;
    let keep = params.keep.est;
    if keep > ctx.hw.topk.max_k && ctx.hw.topk.overflow == crate::config::TopkOverflow::Error {
        return Err(RuntimeError::Pruning(format!(
            "keeping {keep} tokens exceeds Max-k {}",
            ctx.hw.topk.max_k
        )));
    }
    let (rows, _) = act_rows(store, &kern.inputs[0])?;
    if rows != stream {
        return Err(RuntimeError::BindingViolation {
            block: kern.id.clone(),
            detail: format!("score stream has {rows} tokens, bound to {stream}"),
        });
    }
    let kept = if ctx.functional {
        let x = operand(kern, &kern.inputs[0], 0, store, ctx)?;
        let scores: Vec<i64> = match params.score {
            ScoreSource::RowSum => (0..x.rows).map(|r| x.row(r).iter().map(|&v| v as i64).sum()).collect(),
            ScoreSource::ClsAttention => {
                let k = operand(kern, &kern.inputs[1], 0, store, ctx)?;
                let cls = x.row(0);
                (0..k.rows)
                    .map(|t| cls.iter().zip(k.row(t)).map(|(&a, &b)| a as i64 * b as i64).sum())
                    .collect()
            }
        };
        apply_pruning(&scores, keep, params.width, ctx.hw)?.0
    } else {
        (0..keep).collect()
    };
    let out = if params.gather_input {
        let origin = Some(kept.clone());
        match &get(store, &kern.reads()[0])?.data {
            Some(_) if ctx.functional => {
                let x = operand(kern, &kern.inputs[0], 0, store, ctx)?;
                Buffer::tensor(x.select_rows(&kept).map_err(engine(&kern.id))?, origin)
            }
            _ => Buffer::shape(kept.len(), kern.out_cols, origin),
        }
    } else {
        Buffer {
            rows: kept.len(),
            cols: 4,
            data: None,
            indices: Some(kept.clone()),
            origin: None,
        }
    };
    Ok(Outcome { out, kept: Some(kept) })
}

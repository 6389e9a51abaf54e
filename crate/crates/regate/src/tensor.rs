//! Dense rank-2 tensors on a reverse-mode tape.
//!
//! Every value lives in a [`Tape`] arena; a [`Tensor`] is a cheap handle
//! (buffer id plus shape). Operations execute eagerly, record themselves,
//! and `backward` replays the record in reverse, accumulating gradients.
//! The element type is generic so the same graph can run in f32 for speed
//! or f64 for gradient checks.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fmt;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive constant marking a blocked attention slot.
pub const MASK_NEG: f64 = -1e30;

// A row whose best slot is still below this has every slot blocked and
// must come out of the softmax as exact zeros.
pub const FULLY_MASKED: f64 = -1e29;

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Scalar element type for tape values: f32 or f64.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints so loads can reject the wrong width.
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Little-endian bytes at native width, for hashing.
    fn append_le_bytes(self, out: &mut Vec<u8>);
}

impl Element for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("target id {id} outside vocabulary of size {vocab}")]
    TargetOutOfVocab { id: u32, vocab: usize },
    #[error("lookup id {id} outside table of {rows} rows")]
    IdOutOfTable { id: u32, rows: usize },
    #[error("row index {index} outside {rows} rows in {op}")]
    RowOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got [{rows} x {cols}]")]
    LossNotScalar { rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a buffer on a tape. Shape is carried inline; all buffers are
/// logically rank-2 (scalars are [1 x 1], row vectors [1 x n]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Buf<T> {
    data: Vec<T>,
    grad: Option<Vec<T>>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

enum Op<T> {
    Embed {
        table: usize,
        ids: Vec<u32>,
        out: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        out: usize,
    },
    /// out = a @ b^T where b is stored row-major [n x k].
    MatmulTB {
        a: usize,
        b: usize,
        out: usize,
    },
    Add {
        a: usize,
        b: usize,
        out: usize,
    },
    /// Row vector added to every row.
    AddBiasRow {
        a: usize,
        bias: usize,
        out: usize,
    },
    Mul {
        a: usize,
        b: usize,
        out: usize,
    },
    Scale {
        a: usize,
        factor: T,
        out: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
        out: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
        out: usize,
    },
    GatherRows {
        a: usize,
        rows: Vec<usize>,
        out: usize,
    },
    /// out = base with rows[i] added at positions[i]; other rows pass through.
    AddRowsAt {
        base: usize,
        rows: usize,
        positions: Vec<usize>,
        out: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        out: usize,
    },
    Gelu {
        x: usize,
        out: usize,
    },
    /// Backward needs only the probabilities, so the mask is not retained.
    SoftmaxRows {
        x: usize,
        out: usize,
    },
    CrossEntropyPerRow {
        logits: usize,
        targets: Vec<u32>,
        eval: Vec<bool>,
        out: usize,
    },
    SumAll {
        a: usize,
        out: usize,
    },
}

/// Arena of buffers plus the operation record for one forward pass.
pub struct Tape<T: Element> {
    bufs: Vec<Buf<T>>,
    ops: Vec<Op<T>>,
    eval: bool,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            bufs: Vec::new(),
            ops: Vec::new(),
            eval: false,
            backward_done: false,
        }
    }

    /// Evaluation tapes execute ops but record nothing, so no graph exists
    /// to differentiate. Used for the frozen teacher and held-out evals.
    pub fn new_eval() -> Self {
        Tape {
            eval: true,
            ..Self::new()
        }
    }

    pub fn is_eval(&self) -> bool {
        self.eval
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ---- buffer management ----

    fn push(&mut self, data: Vec<T>, rows: usize, cols: usize, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        self.bufs.push(Buf {
            data,
            grad: None,
            rows,
            cols,
            requires_grad,
        });
        Tensor {
            id: self.bufs.len() - 1,
            rows,
            cols,
        }
    }

    fn check_finite(&self, t: Tensor, op: &'static str) -> Result<()> {
        if self.bufs[t.id].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Leaf that does not receive a gradient (inputs, masks, ids).
    pub fn constant(&mut self, data: Vec<T>, rows: usize, cols: usize) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "constant",
                detail: format!("{} values for [{rows} x {cols}]", data.len()),
            });
        }
        let t = self.push(data, rows, cols, false);
        self.check_finite(t, "constant")?;
        Ok(t)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(&mut self, data: &[T], rows: usize, cols: usize) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "param",
                detail: format!("{} values for [{rows} x {cols}]", data.len()),
            });
        }
        let t = self.push(data.to_vec(), rows, cols, true);
        self.check_finite(t, "param")?;
        Ok(t)
    }

    pub fn value(&self, t: Tensor) -> &[T] {
        &self.bufs[t.id].data
    }

    /// Gradient of the loss with respect to `t`, if backward reached it.
    pub fn grad(&self, t: Tensor) -> Option<&[T]> {
        self.bufs[t.id].grad.as_deref()
    }

    pub fn scalar(&self, t: Tensor) -> T {
        debug_assert_eq!(t.len(), 1);
        self.bufs[t.id].data[0]
    }

    fn record(&mut self, op: Op<T>) {
        if !self.eval {
            self.ops.push(op);
        }
    }

    fn requires(&self, id: usize) -> bool {
        self.bufs[id].requires_grad
    }

    // ---- forward operations ----

    pub fn embed(&mut self, table: Tensor, ids: &[u32]) -> Result<Tensor> {
        for &id in ids {
            if id as usize >= table.rows {
                return Err(TensorError::IdOutOfTable {
                    id,
                    rows: table.rows,
                });
            }
        }
        let d = table.cols;
        let mut data = vec![T::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            let src = &self.bufs[table.id].data[id as usize * d..(id as usize + 1) * d];
            data[i * d..(i + 1) * d].copy_from_slice(src);
        }
        let req = self.requires(table.id);
        let out = self.push(data, ids.len(), d, req);
        self.record(Op::Embed {
            table: table.id,
            ids: ids.to_vec(),
            out: out.id,
        });
        self.check_finite(out, "embed")?;
        Ok(out)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols != b.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("[{} x {}] @ [{} x {}]", a.rows, a.cols, b.rows, b.cols),
            });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![T::zero(); m * n];
        {
            let av = &self.bufs[a.id].data;
            let bv = &self.bufs[b.id].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        let req = self.requires(a.id) || self.requires(b.id);
        let t = self.push(out, m, n, req);
        self.record(Op::Matmul {
            a: a.id,
            b: b.id,
            out: t.id,
        });
        self.check_finite(t, "matmul")?;
        Ok(t)
    }

    /// a @ b^T with b stored row-major [n x k]. Used for attention scores
    /// and the tied output head.
    pub fn matmul_tb(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.cols != b.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tb",
                detail: format!("[{} x {}] @ [{} x {}]^T", a.rows, a.cols, b.rows, b.cols),
            });
        }
        let (m, k, n) = (a.rows, a.cols, b.rows);
        let mut out = vec![T::zero(); m * n];
        {
            let av = &self.bufs[a.id].data;
            let bv = &self.bufs[b.id].data;
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bv[j * k..(j + 1) * k];
                    let mut s = T::zero();
                    for p in 0..k {
                        s += arow[p] * brow[p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
        let req = self.requires(a.id) || self.requires(b.id);
        let t = self.push(out, m, n, req);
        self.record(Op::MatmulTB {
            a: a.id,
            b: b.id,
            out: t.id,
        });
        self.check_finite(t, "matmul_tb")?;
        Ok(t)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("[{} x {}] + [{} x {}]", a.rows, a.cols, b.rows, b.cols),
            });
        }
        let data: Vec<T> = self.bufs[a.id]
            .data
            .iter()
            .zip(&self.bufs[b.id].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.requires(a.id) || self.requires(b.id);
        let t = self.push(data, a.rows, a.cols, req);
        self.record(Op::Add {
            a: a.id,
            b: b.id,
            out: t.id,
        });
        self.check_finite(t, "add")?;
        Ok(t)
    }

    pub fn add_bias_row(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != a.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_row",
                detail: format!(
                    "[{} x {}] + bias [{} x {}]",
                    a.rows, a.cols, bias.rows, bias.cols
                ),
            });
        }
        let n = a.cols;
        let mut data = self.bufs[a.id].data.clone();
        {
            let bv = &self.bufs[bias.id].data;
            for r in 0..a.rows {
                for j in 0..n {
                    data[r * n + j] += bv[j];
                }
            }
        }
        let req = self.requires(a.id) || self.requires(bias.id);
        let t = self.push(data, a.rows, a.cols, req);
        self.record(Op::AddBiasRow {
            a: a.id,
            bias: bias.id,
            out: t.id,
        });
        self.check_finite(t, "add_bias_row")?;
        Ok(t)
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!("[{} x {}] * [{} x {}]", a.rows, a.cols, b.rows, b.cols),
            });
        }
        let data: Vec<T> = self.bufs[a.id]
            .data
            .iter()
            .zip(&self.bufs[b.id].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires(a.id) || self.requires(b.id);
        let t = self.push(data, a.rows, a.cols, req);
        self.record(Op::Mul {
            a: a.id,
            b: b.id,
            out: t.id,
        });
        self.check_finite(t, "mul")?;
        Ok(t)
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Result<Tensor> {
        let f = T::from_f64(factor);
        let data: Vec<T> = self.bufs[a.id].data.iter().map(|&x| x * f).collect();
        let req = self.requires(a.id);
        let t = self.push(data, a.rows, a.cols, req);
        self.record(Op::Scale {
            a: a.id,
            factor: f,
            out: t.id,
        });
        self.check_finite(t, "scale")?;
        Ok(t)
    }

    pub fn slice_cols(&mut self, a: Tensor, start: usize, width: usize) -> Result<Tensor> {
        if start + width > a.cols || width == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!(
                    "cols {}..{} of [{} x {}]",
                    start,
                    start + width,
                    a.rows,
                    a.cols
                ),
            });
        }
        let mut data = vec![T::zero(); a.rows * width];
        {
            let av = &self.bufs[a.id].data;
            for r in 0..a.rows {
                data[r * width..(r + 1) * width]
                    .copy_from_slice(&av[r * a.cols + start..r * a.cols + start + width]);
            }
        }
        let req = self.requires(a.id);
        let t = self.push(data, a.rows, width, req);
        self.record(Op::SliceCols {
            a: a.id,
            start,
            out: t.id,
        });
        Ok(t)
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let total: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = vec![T::zero(); rows * total];
        let mut offset = 0;
        for p in parts {
            let pv = &self.bufs[p.id].data;
            for r in 0..rows {
                data[r * total + offset..r * total + offset + p.cols]
                    .copy_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
            offset += p.cols;
        }
        let req = parts.iter().any(|p| self.requires(p.id));
        let t = self.push(data, rows, total, req);
        self.record(Op::ConcatCols {
            parts: parts.iter().map(|p| p.id).collect(),
            out: t.id,
        });
        Ok(t)
    }

    pub fn gather_rows(&mut self, a: Tensor, rows: &[usize]) -> Result<Tensor> {
        for &r in rows {
            if r >= a.rows {
                return Err(TensorError::RowOutOfRange {
                    op: "gather_rows",
                    index: r,
                    rows: a.rows,
                });
            }
        }
        let n = a.cols;
        let mut data = vec![T::zero(); rows.len() * n];
        {
            let av = &self.bufs[a.id].data;
            for (i, &r) in rows.iter().enumerate() {
                data[i * n..(i + 1) * n].copy_from_slice(&av[r * n..(r + 1) * n]);
            }
        }
        let req = self.requires(a.id);
        let t = self.push(data, rows.len(), n, req);
        self.record(Op::GatherRows {
            a: a.id,
            rows: rows.to_vec(),
            out: t.id,
        });
        Ok(t)
    }

    /// Residual scatter: rows of `rows_t` are added into a copy of `base`
    /// at `positions`; every other row of `base` passes through unchanged.
    pub fn add_rows_at(
        &mut self,
        base: Tensor,
        rows_t: Tensor,
        positions: &[usize],
    ) -> Result<Tensor> {
        if rows_t.cols != base.cols || rows_t.rows != positions.len() {
            return Err(TensorError::ShapeMismatch {
                op: "add_rows_at",
                detail: format!(
                    "rows [{} x {}] at {} positions into [{} x {}]",
                    rows_t.rows,
                    rows_t.cols,
                    positions.len(),
                    base.rows,
                    base.cols
                ),
            });
        }
        for &p in positions {
            if p >= base.rows {
                return Err(TensorError::RowOutOfRange {
                    op: "add_rows_at",
                    index: p,
                    rows: base.rows,
                });
            }
        }
        let n = base.cols;
        let mut data = self.bufs[base.id].data.clone();
        {
            let rv = &self.bufs[rows_t.id].data;
            for (i, &p) in positions.iter().enumerate() {
                for j in 0..n {
                    data[p * n + j] += rv[i * n + j];
                }
            }
        }
        let req = self.requires(base.id) || self.requires(rows_t.id);
        let t = self.push(data, base.rows, base.cols, req);
        self.record(Op::AddRowsAt {
            base: base.id,
            rows: rows_t.id,
            positions: positions.to_vec(),
            out: t.id,
        });
        self.check_finite(t, "add_rows_at")?;
        Ok(t)
    }

    pub fn layer_norm(&mut self, x: Tensor, gain: Tensor, bias: Tensor) -> Result<Tensor> {
        if gain.rows != 1 || gain.cols != x.cols || bias.rows != 1 || bias.cols != x.cols {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "x [{} x {}], gain [{} x {}], bias [{} x {}]",
                    x.rows, x.cols, gain.rows, gain.cols, bias.rows, bias.cols
                ),
            });
        }
        let n = x.cols;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut data = vec![T::zero(); x.rows * n];
        {
            let xv = &self.bufs[x.id].data;
            let gv = &self.bufs[gain.id].data;
            let bv = &self.bufs[bias.id].data;
            for r in 0..x.rows {
                let row = &xv[r * n..(r + 1) * n];
                let mut mean = T::zero();
                for &v in row {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let rstd = (var + eps).sqrt().recip();
                for j in 0..n {
                    data[r * n + j] = (row[j] - mean) * rstd * gv[j] + bv[j];
                }
            }
        }
        let req = self.requires(x.id) || self.requires(gain.id) || self.requires(bias.id);
        let t = self.push(data, x.rows, n, req);
        self.record(Op::LayerNorm {
            x: x.id,
            gain: gain.id,
            bias: bias.id,
            out: t.id,
        });
        self.check_finite(t, "layer_norm")?;
        Ok(t)
    }

    pub fn gelu(&mut self, x: Tensor) -> Result<Tensor> {
        let data: Vec<T> = self.bufs[x.id].data.iter().map(|&v| gelu_val(v)).collect();
        let req = self.requires(x.id);
        let t = self.push(data, x.rows, x.cols, req);
        self.record(Op::Gelu { x: x.id, out: t.id });
        self.check_finite(t, "gelu")?;
        Ok(t)
    }

    /// Row softmax after adding `mask` (same shape as `x`; 0 keeps a slot,
    /// [`MASK_NEG`] blocks it). Rows with every slot blocked come out as
    /// exact zeros rather than NaN.
    pub fn softmax_rows_masked(&mut self, x: Tensor, mask: Option<&[T]>) -> Result<Tensor> {
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows_masked",
                    detail: format!("mask len {} for [{} x {}]", m.len(), x.rows, x.cols),
                });
            }
        }
        let n = x.cols;
        let blocked = T::from_f64(FULLY_MASKED);
        let mut data = vec![T::zero(); x.rows * n];
        {
            let xv = &self.bufs[x.id].data;
            let mut z = vec![T::zero(); n];
            for r in 0..x.rows {
                for j in 0..n {
                    z[j] = xv[r * n + j] + mask.map_or(T::zero(), |m| m[r * n + j]);
                }
                let mut mx = z[0];
                for &v in &z[1..] {
                    if v > mx {
                        mx = v;
                    }
                }
                if mx < blocked {
                    continue; // fully masked row stays all-zero
                }
                let mut sum = T::zero();
                for j in 0..n {
                    let e = (z[j] - mx).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
                let inv = sum.recip();
                for j in 0..n {
                    data[r * n + j] *= inv;
                }
            }
        }
        let req = self.requires(x.id);
        let t = self.push(data, x.rows, n, req);
        self.record(Op::SoftmaxRows { x: x.id, out: t.id });
        self.check_finite(t, "softmax_rows_masked")?;
        Ok(t)
    }

    /// Per-row negative log likelihood of `targets[r]`, via log-sum-exp.
    /// Rows with `eval[r] == false` contribute an exact zero.
    pub fn cross_entropy_per_row(
        &mut self,
        logits: Tensor,
        targets: &[u32],
        eval: &[bool],
    ) -> Result<Tensor> {
        if targets.len() != logits.rows || eval.len() != logits.rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_per_row",
                detail: format!(
                    "{} targets / {} eval flags for {} rows",
                    targets.len(),
                    eval.len(),
                    logits.rows
                ),
            });
        }
        let v = logits.cols;
        for (r, &t) in targets.iter().enumerate() {
            if eval[r] && t as usize >= v {
                return Err(TensorError::TargetOutOfVocab { id: t, vocab: v });
            }
        }
        let mut data = vec![T::zero(); logits.rows];
        {
            let lv = &self.bufs[logits.id].data;
            for r in 0..logits.rows {
                if !eval[r] {
                    continue;
                }
                let row = &lv[r * v..(r + 1) * v];
                let mut mx = row[0];
                for &x in &row[1..] {
                    if x > mx {
                        mx = x;
                    }
                }
                let mut sum = T::zero();
                for &x in row {
                    sum += (x - mx).exp();
                }
                data[r] = mx + sum.ln() - row[targets[r] as usize];
            }
        }
        let req = self.requires(logits.id);
        let t = self.push(data, logits.rows, 1, req);
        self.record(Op::CrossEntropyPerRow {
            logits: logits.id,
            targets: targets.to_vec(),
            eval: eval.to_vec(),
            out: t.id,
        });
        self.check_finite(t, "cross_entropy_per_row")?;
        Ok(t)
    }

    pub fn sum_all(&mut self, a: Tensor) -> Result<Tensor> {
        let mut s = T::zero();
        for &v in &self.bufs[a.id].data {
            s += v;
        }
        let req = self.requires(a.id);
        let t = self.push(vec![s], 1, 1, req);
        self.record(Op::SumAll { a: a.id, out: t.id });
        self.check_finite(t, "sum_all")?;
        Ok(t)
    }

    // ---- backward ----

    fn accumulate(&mut self, id: usize, delta: &[T]) {
        if !self.bufs[id].requires_grad {
            return;
        }
        let len = self.bufs[id].data.len();
        let g = self.bufs[id]
            .grad
            .get_or_insert_with(|| vec![T::zero(); len]);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn grad_of(&self, id: usize) -> Option<Vec<T>> {
        self.bufs[id].grad.clone()
    }

    /// Reverse-mode sweep from a scalar loss. Each recorded op is visited
    /// exactly once, newest first. A second call is an error.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if loss.len() != 1 {
            return Err(TensorError::LossNotScalar {
                rows: loss.rows,
                cols: loss.cols,
            });
        }
        self.backward_done = true;
        self.bufs[loss.id].grad = Some(vec![T::one()]);

        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<T>) {
        match op {
            Op::Embed { table, ids, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if !self.bufs[*table].requires_grad {
                    return;
                }
                let d = self.bufs[*table].cols;
                let table_len = self.bufs[*table].data.len();
                let g = self.bufs[*table]
                    .grad
                    .get_or_insert_with(|| vec![T::zero(); table_len]);
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    for (j, slot) in dst.iter_mut().enumerate() {
                        *slot += d_out[i * d + j];
                    }
                }
            }
            Op::Matmul { a, b, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                let m = self.bufs[*a].rows;
                let k = self.bufs[*a].cols;
                let n = self.bufs[*b].cols;
                if self.bufs[*a].requires_grad {
                    // dA[i,p] = sum_j dOut[i,j] * B[p,j]
                    let mut da = vec![T::zero(); m * k];
                    let bv = &self.bufs[*b].data;
                    for i in 0..m {
                        let drow = &d_out[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for j in 0..n {
                                s += drow[j] * brow[j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.bufs[*b].requires_grad {
                    // dB[p,j] = sum_i A[i,p] * dOut[i,j]
                    let mut db = vec![T::zero(); k * n];
                    let av = &self.bufs[*a].data;
                    for i in 0..m {
                        let drow = &d_out[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += aip * drow[j];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::MatmulTB { a, b, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                let m = self.bufs[*a].rows;
                let k = self.bufs[*a].cols;
                let n = self.bufs[*b].rows;
                if self.bufs[*a].requires_grad {
                    // dA[i,p] = sum_j dOut[i,j] * B[j,p]
                    let mut da = vec![T::zero(); m * k];
                    let bv = &self.bufs[*b].data;
                    for i in 0..m {
                        for j in 0..n {
                            let dv = d_out[i * n + j];
                            let brow = &bv[j * k..(j + 1) * k];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for p in 0..k {
                                darow[p] += dv * brow[p];
                            }
                        }
                    }
                    self.accumulate(*a, &da);
                }
                if self.bufs[*b].requires_grad {
                    // dB[j,p] = sum_i dOut[i,j] * A[i,p]
                    let mut db = vec![T::zero(); n * k];
                    let av = &self.bufs[*a].data;
                    for i in 0..m {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let dv = d_out[i * n + j];
                            let dbrow = &mut db[j * k..(j + 1) * k];
                            for p in 0..k {
                                dbrow[p] += dv * arow[p];
                            }
                        }
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                self.accumulate(*a, &d_out);
                self.accumulate(*b, &d_out);
            }
            Op::AddBiasRow { a, bias, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                self.accumulate(*a, &d_out);
                if self.bufs[*bias].requires_grad {
                    let n = self.bufs[*bias].cols;
                    let rows = d_out.len() / n;
                    let mut db = vec![T::zero(); n];
                    for r in 0..rows {
                        for (j, slot) in db.iter_mut().enumerate() {
                            *slot += d_out[r * n + j];
                        }
                    }
                    self.accumulate(*bias, &db);
                }
            }
            Op::Mul { a, b, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if self.bufs[*a].requires_grad {
                    let da: Vec<T> = d_out
                        .iter()
                        .zip(&self.bufs[*b].data)
                        .map(|(&d, &y)| d * y)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.bufs[*b].requires_grad {
                    let db: Vec<T> = d_out
                        .iter()
                        .zip(&self.bufs[*a].data)
                        .map(|(&d, &x)| d * x)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale { a, factor, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                let da: Vec<T> = d_out.iter().map(|&d| d * *factor).collect();
                self.accumulate(*a, &da);
            }
            Op::SliceCols { a, start, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if !self.bufs[*a].requires_grad {
                    return;
                }
                let cols = self.bufs[*a].cols;
                let rows = self.bufs[*a].rows;
                let w = self.bufs[*out].cols;
                let mut da = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    for j in 0..w {
                        da[i * cols + start + j] = d_out[i * w + j];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::ConcatCols { parts, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                let total = self.bufs[*out].cols;
                let rows = self.bufs[*out].rows;
                let mut offset = 0;
                for &p in parts {
                    let w = self.bufs[p].cols;
                    if self.bufs[p].requires_grad {
                        let mut dp = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(
                                &d_out[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { a, rows, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if !self.bufs[*a].requires_grad {
                    return;
                }
                let n = self.bufs[*a].cols;
                let mut da = vec![T::zero(); self.bufs[*a].data.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        da[r * n + j] += d_out[i * n + j];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::AddRowsAt {
                base,
                rows,
                positions,
                out,
            } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                self.accumulate(*base, &d_out);
                if self.bufs[*rows].requires_grad {
                    let n = self.bufs[*rows].cols;
                    let mut dr = vec![T::zero(); positions.len() * n];
                    for (i, &p) in positions.iter().enumerate() {
                        dr[i * n..(i + 1) * n].copy_from_slice(&d_out[p * n..(p + 1) * n]);
                    }
                    self.accumulate(*rows, &dr);
                }
            }
            Op::LayerNorm { x, gain, bias, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                let n = self.bufs[*gain].cols;
                let rows = self.bufs[*x].rows;
                let eps = T::from_f64(LAYER_NORM_EPS);
                let inv_n = T::from_f64(1.0 / n as f64);
                let need_x = self.bufs[*x].requires_grad;
                let mut dx = if need_x {
                    vec![T::zero(); rows * n]
                } else {
                    Vec::new()
                };
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                {
                    let xv = &self.bufs[*x].data;
                    let gv = &self.bufs[*gain].data;
                    let mut xhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let row = &xv[r * n..(r + 1) * n];
                        let mut mean = T::zero();
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = T::zero();
                        for &v in row {
                            let d = v - mean;
                            var += d * d;
                        }
                        var *= inv_n;
                        let rstd = (var + eps).sqrt().recip();
                        for j in 0..n {
                            xhat[j] = (row[j] - mean) * rstd;
                        }
                        let drow = &d_out[r * n..(r + 1) * n];
                        for j in 0..n {
                            dg[j] += drow[j] * xhat[j];
                            db[j] += drow[j];
                        }
                        if need_x {
                            let mut sum_dxh = T::zero();
                            let mut sum_dxh_xh = T::zero();
                            for j in 0..n {
                                let dxh = drow[j] * gv[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xhat[j];
                            }
                            let m1 = sum_dxh * inv_n;
                            let m2 = sum_dxh_xh * inv_n;
                            let drow_x = &mut dx[r * n..(r + 1) * n];
                            for j in 0..n {
                                let dxh = drow[j] * gv[j];
                                drow_x[j] = rstd * (dxh - m1 - xhat[j] * m2);
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(*x, &dx);
                }
                self.accumulate(*gain, &dg);
                self.accumulate(*bias, &db);
            }
            Op::Gelu { x, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if !self.bufs[*x].requires_grad {
                    return;
                }
                let dx: Vec<T> = self.bufs[*x]
                    .data
                    .iter()
                    .zip(&d_out)
                    .map(|(&v, &d)| d * gelu_grad(v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxRows { x, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if !self.bufs[*x].requires_grad {
                    return;
                }
                let n = self.bufs[*out].cols;
                let rows = self.bufs[*out].rows;
                let mut dx = vec![T::zero(); d_out.len()];
                let pv = &self.bufs[*out].data;
                for r in 0..rows {
                    let p = &pv[r * n..(r + 1) * n];
                    let d = &d_out[r * n..(r + 1) * n];
                    let mut dot = T::zero();
                    for j in 0..n {
                        dot += p[j] * d[j];
                    }
                    let drow = &mut dx[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] = p[j] * (d[j] - dot);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::CrossEntropyPerRow {
                logits,
                targets,
                eval,
                out,
            } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if !self.bufs[*logits].requires_grad {
                    return;
                }
                let v = self.bufs[*logits].cols;
                let rows = targets.len();
                let mut dl = vec![T::zero(); rows * v];
                let lv = &self.bufs[*logits].data;
                for r in 0..rows {
                    if !eval[r] {
                        continue;
                    }
                    let row = &lv[r * v..(r + 1) * v];
                    let mut mx = row[0];
                    for &x in &row[1..] {
                        if x > mx {
                            mx = x;
                        }
                    }
                    let mut sum = T::zero();
                    for &x in row {
                        sum += (x - mx).exp();
                    }
                    let inv = sum.recip();
                    let scale = d_out[r];
                    let drow = &mut dl[r * v..(r + 1) * v];
                    for j in 0..v {
                        drow[j] = scale * (row[j] - mx).exp() * inv;
                    }
                    drow[targets[r] as usize] -= scale;
                }
                self.accumulate(*logits, &dl);
            }
            Op::SumAll { a, out } => {
                let Some(d_out) = self.grad_of(*out) else { return };
                if !self.bufs[*a].requires_grad {
                    return;
                }
                let d = d_out[0];
                let da = vec![d; self.bufs[*a].data.len()];
                self.accumulate(*a, &da);
            }
        }
    }
}

pub(crate) fn gelu_val<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let s = T::from_f64(GELU_S);
    let c = T::from_f64(GELU_C);
    let u = s * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let s = T::from_f64(GELU_S);
    let c = T::from_f64(GELU_C);
    let three = T::from_f64(3.0);
    let u = s * (x + c * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * s * (T::one() + three * c * x * x)
}

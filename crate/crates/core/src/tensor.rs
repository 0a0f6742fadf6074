//! Dense f64 tensors and a tape for reverse-mode differentiation.
//!
//! Tensors are immutable values. A [`Tape`] records every operation whose
//! inputs include a tensor registered on it (via [`Tape::watch`] or as the
//! output of an earlier recorded op). Operations on untracked inputs are
//! evaluated eagerly and leave the tape untouched, so a frozen forward pass
//! costs nothing extra.
//!
//! ```
//! use ttl_core::tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.watch(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.mul(&x, &x).unwrap();
//! let loss = tape.sum(&y).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct NodeRef {
    tape: u64,
    index: usize,
}

/// Dense row-major array of 64-bit floats.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    /// Mutable access to the values of an untracked tensor (copy-on-write
    /// when the storage is shared).
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        debug_assert!(self.node.is_none(), "mutating a tracked tensor");
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Whether this tensor participates in gradient computation.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// An untracked copy sharing the same storage.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
        }
    }

    /// Interpret any tensor with rank >= 1 as rows over its last dimension.
    fn as_rows(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.split_last() {
            Some((&c, rest)) if c > 0 => Ok((rest.iter().product(), c)),
            _ => Err(Error::shape(op, format!("expected rank >= 1, got {:?}", self.shape))),
        }
    }
}

/// c = op(a) * op(b) (+ c when `accumulate`), with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover every strided index
    // touched for the given (m, k, n); `c` is m×n row-major and exclusive.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if cfg!(debug_assertions) && data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

type Buf = Arc<Vec<f64>>;

enum Op {
    Leaf,
    MatMul { a: Buf, b: Buf, m: usize, k: usize, n: usize },
    Linear { x: Buf, w: Buf, rows: usize, inp: usize, out: usize, bias: bool },
    Add,
    Mul { a: Buf, b: Buf },
    Scale(f64),
    AddScalar,
    Exp { y: Buf },
    Log { x: Buf },
    Gelu { x: Buf },
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64>, gamma: Buf, rows: usize, cols: usize },
    Softmax { y: Buf, temperature: f64, rows: usize, cols: usize },
    EntropyRows { p: Buf, cols: usize },
    Sum { len: usize },
    Mean { len: usize },
    SumLast { rows: usize, cols: usize },
    MeanRows { rows: usize, cols: usize },
    Reshape,
    Transpose { rows: usize, cols: usize },
    Concat { row_counts: Vec<usize>, cols: usize },
    GatherRows { index: Vec<usize>, rows: usize, cols: usize },
    Attention { q: Buf, k: Buf, v: Buf, probs: Vec<f64>, layout: AttentionLayout },
    NormalizeRows { y: Buf, norms: Vec<f64>, rows: usize, cols: usize },
    EmbedTokens { batch: usize, patches: usize, dim: usize },
}

/// Geometry of a packed multi-head attention call: `batch` sequences of
/// `seq` tokens, each token a row of `heads * head_dim` features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionLayout {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

struct Record {
    op: Op,
    inputs: Vec<Option<usize>>,
    output: usize,
}

#[derive(Default)]
struct TapeInner {
    shapes: Vec<Vec<usize>>,
    produced: Vec<bool>,
    records: Vec<Record>,
}

/// Ordered log of differentiable operations for one adaptation episode or
/// training step. Confined to a single thread.
pub struct Tape {
    id: Cell<u64>,
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by the tracked leaves.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or `None` if `t` was not
    /// reachable from the loss.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        let g = self.grads.get(node.index)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[node.index].clone(),
            data: Arc::new(g.clone()),
            node: None,
        })
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable tensors.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape.clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: Cell::new(fresh_tape_id()),
            inner: RefCell::new(TapeInner::default()),
        }
    }

    /// Number of recorded operations (leaves excluded).
    pub fn len(&self) -> usize {
        self.inner.borrow().records.iter().filter(|r| !matches!(r.op, Op::Leaf)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every record. Tensors tracked before the reset become constants
    /// with respect to this tape.
    pub fn clear(&self) {
        *self.inner.borrow_mut() = TapeInner::default();
        self.id.set(fresh_tape_id());
    }

    /// Register `t` as a trainable leaf and return the tracked handle.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let index = inner.shapes.len();
        inner.shapes.push(t.shape.clone());
        inner.produced.push(false);
        inner.records.push(Record {
            op: Op::Leaf,
            inputs: Vec::new(),
            output: index,
        });
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef { tape: self.id.get(), index }),
        }
    }

    fn node_of(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node {
            None => Ok(None),
            Some(n) if n.tape == self.id.get() => Ok(Some(n.index)),
            Some(_) => Err(Error::NotOnTape),
        }
    }

    fn finish(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: &[&Tensor],
        make_op: impl FnOnce() -> Op,
    ) -> Result<Tensor> {
        check_finite(op_name, &data)?;
        let nodes = inputs
            .iter()
            .map(|t| self.node_of(t))
            .collect::<Result<Vec<_>>>()?;
        let node = if nodes.iter().any(Option::is_some) {
            let mut inner = self.inner.borrow_mut();
            let index = inner.shapes.len();
            inner.shapes.push(shape.clone());
            inner.produced.push(true);
            inner.records.push(Record {
                op: make_op(),
                inputs: nodes,
                output: index,
            });
            Some(NodeRef { tape: self.id.get(), index })
        } else {
            None
        };
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node,
        })
    }

    /// Matrix product of `a` (m×k) and `b` (k×n).
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.rows_cols("matmul")?;
        let (k2, n) = b.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", a.shape, b.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &a.data, (k as isize, 1), &b.data, (n as isize, 1), &mut out, false);
        self.finish("matmul", vec![m, n], out, &[a, b], || Op::MatMul {
            a: Arc::clone(&a.data),
            b: Arc::clone(&b.data),
            m,
            k,
            n,
        })
    }

    /// `x · wᵀ + bias` for `x` (rows×in), `w` (out×in) and optional bias (out).
    pub fn linear(&self, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (rows, inp) = x.rows_cols("linear")?;
        let (out, inp2) = w.rows_cols("linear")?;
        if inp != inp2 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} against weight {:?}", x.shape, w.shape),
            ));
        }
        let mut y = vec![0.0; rows * out];
        if let Some(b) = bias {
            if b.data.len() != out {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {out} outputs", b.shape),
                ));
            }
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(&b.data);
            }
        }
        gemm(
            rows,
            inp,
            out,
            &x.data,
            (inp as isize, 1),
            &w.data,
            (1, inp as isize),
            &mut y,
            bias.is_some(),
        );
        let mut inputs = vec![x, w];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.finish("linear", vec![rows, out], y, &inputs, || Op::Linear {
            x: Arc::clone(&x.data),
            w: Arc::clone(&w.data),
            rows,
            inp,
            out,
            bias: bias.is_some(),
        })
    }

    fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
        }
        Ok(())
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("add", a, b)?;
        let out = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        self.finish("add", a.shape.clone(), out, &[a, b], || Op::Add)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::same_shape("mul", a, b)?;
        let out = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        self.finish("mul", a.shape.clone(), out, &[a, b], || Op::Mul {
            a: Arc::clone(&a.data),
            b: Arc::clone(&b.data),
        })
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let out = a.data.iter().map(|x| x * factor).collect();
        self.finish("scale", a.shape.clone(), out, &[a], || Op::Scale(factor))
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = a.data.iter().map(|x| x + c).collect();
        self.finish("add_scalar", a.shape.clone(), out, &[a], || Op::AddScalar)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = a.data.iter().map(|x| x.exp()).collect();
        let y = Arc::new(out.clone());
        self.finish("exp", a.shape.clone(), out, &[a], || Op::Exp { y })
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data.iter().map(|x| x.ln()).collect();
        self.finish("log", a.shape.clone(), out, &[a], || Op::Log {
            x: Arc::clone(&a.data),
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        let out = a.data.iter().map(|&x| gelu(x)).collect();
        self.finish("gelu", a.shape.clone(), out, &[a], || Op::Gelu {
            x: Arc::clone(&a.data),
        })
    }

    /// Per-row layer normalization with learned affine over the last dim.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = x.as_rows("layer_norm")?;
        if gamma.len() != cols || beta.len() != cols {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for width {cols}", gamma.shape, beta.shape),
            ));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gamma.data[c] + beta.data[c];
            }
        }
        self.finish("layer_norm", x.shape.clone(), out, &[x, gamma, beta], || Op::LayerNorm {
            xhat,
            inv_std,
            gamma: Arc::clone(&gamma.data),
            rows,
            cols,
        })
    }

    /// Softmax of `temperature · x` over the last dimension.
    pub fn softmax(&self, x: &Tensor, temperature: f64) -> Result<Tensor> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let (rows, cols) = x.as_rows("softmax")?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.data[r * cols..(r + 1) * cols];
            softmax_into(row, temperature, &mut out[r * cols..(r + 1) * cols]);
        }
        let y = Arc::new(out.clone());
        self.finish("softmax", x.shape.clone(), out, &[x], || Op::Softmax {
            y,
            temperature,
            rows,
            cols,
        })
    }

    /// Row entropies `−Σ p ln p` of a probability matrix `[..., c] -> [...]`,
    /// with `0·ln 0 = 0`. Zero entries receive zero gradient.
    pub fn entropy_rows(&self, p: &Tensor) -> Result<Tensor> {
        let (_, cols) = p.as_rows("entropy_rows")?;
        let out = p
            .data
            .chunks_exact(cols)
            .map(|r| -r.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
            .collect();
        let shape = p.shape[..p.shape.len() - 1].to_vec();
        self.finish("entropy_rows", shape, out, &[p], || Op::EntropyRows {
            p: Arc::clone(&p.data),
            cols,
        })
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.data.iter().sum();
        self.finish("sum", Vec::new(), vec![s], &[a], || Op::Sum { len: a.len() })
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = a.data.iter().sum::<f64>() / a.len() as f64;
        self.finish("mean", Vec::new(), vec![s], &[a], || Op::Mean { len: a.len() })
    }

    /// Sum over the last dimension: `[..., c] -> [...]`.
    pub fn sum_last(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.as_rows("sum_last")?;
        let out = a.data.chunks_exact(cols).map(|r| r.iter().sum()).collect();
        let shape = a.shape[..a.shape.len() - 1].to_vec();
        self.finish("sum_last", shape, out, &[a], || Op::SumLast { rows, cols })
    }

    /// Mean over the first dimension of a matrix: `[n, c] -> [c]`.
    pub fn mean_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.rows_cols("mean_rows")?;
        if rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; cols];
        for row in a.data.chunks_exact(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        self.finish("mean_rows", vec![cols], out, &[a], || Op::MeanRows { rows, cols })
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", a.shape)));
        }
        self.finish("reshape", shape, a.data.to_vec(), &[a], || Op::Reshape)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.rows_cols("transpose")?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = a.data[r * cols + c];
            }
        }
        self.finish("transpose", vec![cols, rows], out, &[a], || Op::Transpose { rows, cols })
    }

    /// Stack matrices with equal column counts along the row axis.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, cols) = first.rows_cols("concat_rows")?;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = p.rows_cols("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{:?} vs width {cols}", p.shape)));
            }
            row_counts.push(r);
            out.extend_from_slice(&p.data);
        }
        let total = row_counts.iter().sum();
        self.finish("concat_rows", vec![total, cols], out, parts, || Op::Concat {
            row_counts,
            cols,
        })
    }

    /// Select rows of a matrix by index (repeats allowed).
    pub fn gather_rows(&self, a: &Tensor, index: &[usize]) -> Result<Tensor> {
        let (rows, cols) = a.rows_cols("gather_rows")?;
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
        }
        self.finish("gather_rows", vec![index.len(), cols], out, &[a], || Op::GatherRows {
            index: index.to_vec(),
            rows,
            cols,
        })
    }

    /// Scale every row to unit L2 norm.
    pub fn normalize_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = a.as_rows("normalize_rows")?;
        let mut out = vec![0.0; rows * cols];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &a.data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::NonFinite { op: "normalize_rows" });
            }
            norms[r] = norm;
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        let y = Arc::new(out.clone());
        self.finish("normalize_rows", a.shape.clone(), out, &[a], || Op::NormalizeRows {
            y,
            norms,
            rows,
            cols,
        })
    }

    /// Scaled dot-product multi-head self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × (heads·head_dim)`; head `h` owns
    /// columns `h·head_dim .. (h+1)·head_dim`. Logits are scaled by
    /// `1/sqrt(head_dim)`.
    pub fn attention(
        &self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        layout: AttentionLayout,
    ) -> Result<Tensor> {
        let expected = vec![layout.batch * layout.seq, layout.width()];
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            if t.shape != expected {
                return Err(Error::shape(
                    "attention",
                    format!("{name} is {:?}, layout needs {expected:?}", t.shape),
                ));
            }
        }
        let AttentionLayout { batch, seq, heads, head_dim } = layout;
        let width = layout.width();
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; batch * seq * width];
        let mut logits = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let p_block = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &q.data[(b * seq + i) * width + h * head_dim..][..head_dim];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let kj = &k.data[(b * seq + j) * width + h * head_dim..][..head_dim];
                        *l = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    let prow = &mut p_block[i * seq..(i + 1) * seq];
                    softmax_into(&logits, 1.0, prow);
                    let oi = &mut out[(b * seq + i) * width + h * head_dim..][..head_dim];
                    for (j, &p) in prow.iter().enumerate() {
                        let vj = &v.data[(b * seq + j) * width + h * head_dim..][..head_dim];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.finish("attention", expected.clone(), out, &[q, k, v], || Op::Attention {
            q: Arc::clone(&q.data),
            k: Arc::clone(&k.data),
            v: Arc::clone(&v.data),
            probs,
            layout,
        })
    }

    /// Assemble transformer input tokens: per sample, the class token
    /// followed by its patch embeddings, each row plus its positional row.
    ///
    /// `patches` is `(batch·P) × d`, `cls` has `d` elements and `pos` is
    /// `(P+1) × d`. The result is `(batch·(P+1)) × d`.
    pub fn embed_tokens(&self, patches: &Tensor, cls: &Tensor, pos: &Tensor, batch: usize) -> Result<Tensor> {
        let (rows, dim) = patches.rows_cols("embed_tokens")?;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::shape("embed_tokens", format!("{rows} patch rows for batch {batch}")));
        }
        let np = rows / batch;
        let seq = np + 1;
        if cls.len() != dim || pos.shape != [seq, dim] {
            return Err(Error::shape(
                "embed_tokens",
                format!("cls {:?}, pos {:?} for {seq} tokens of width {dim}", cls.shape, pos.shape),
            ));
        }
        let mut out = vec![0.0; batch * seq * dim];
        for b in 0..batch {
            for t in 0..seq {
                let dst = &mut out[(b * seq + t) * dim..][..dim];
                let src = if t == 0 {
                    &cls.data[..]
                } else {
                    &patches.data[(b * np + t - 1) * dim..][..dim]
                };
                let p = &pos.data[t * dim..][..dim];
                for ((o, s), q) in dst.iter_mut().zip(src).zip(p) {
                    *o = s + q;
                }
            }
        }
        self.finish("embed_tokens", vec![batch * seq, dim], out, &[patches, cls, pos], || {
            Op::EmbedTokens {
                batch,
                patches: np,
                dim,
            }
        })
    }

    /// Reverse-mode sweep from a scalar `loss`. Clears the tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::NotScalar(loss.shape.clone()));
        }
        let root = self.node_of(loss)?.ok_or(Error::NotOnTape)?;
        let tape_id = self.id.get();
        let inner = std::mem::take(&mut *self.inner.borrow_mut());
        self.id.set(fresh_tape_id());

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.shapes.len()];
        grads[root] = Some(vec![1.0]);
        for record in inner.records.iter().rev() {
            if matches!(record.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[record.output].take() else {
                continue;
            };
            let needed: Vec<bool> = record.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward_op(&record.op, &g, &needed);
            for (slot, ig) in record.inputs.iter().zip(input_grads) {
                if let (Some(idx), Some(ig)) = (slot, ig) {
                    match &mut grads[*idx] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(ig),
                    }
                }
            }
        }
        // Intermediate gradients were consumed above; only leaves remain.
        for (i, produced) in inner.produced.iter().enumerate() {
            if *produced {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            tape: tape_id,
            grads,
            shapes: inner.shapes,
        })
    }
}

/// Numerically stable softmax of `temperature · x` written into `out`.
pub(crate) fn softmax_into(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (temperature * (v - max)).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn backward_op(op: &Op, g: &[f64], needed: &[bool]) -> Vec<Option<Vec<f64>>> {
    let want = |i: usize| needed.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => Vec::new(),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let da = want(0).then(|| {
                let mut d = vec![0.0; m * k];
                // g (m×n) · bᵀ (n×k)
                gemm(m, n, k, g, (n as isize, 1), b, (1, n as isize), &mut d, false);
                d
            });
            let db = want(1).then(|| {
                let mut d = vec![0.0; k * n];
                // aᵀ (k×m) · g (m×n)
                gemm(k, m, n, a, (1, k as isize), g, (n as isize, 1), &mut d, false);
                d
            });
            vec![da, db]
        }
        Op::Linear { x, w, rows, inp, out, bias } => {
            let (rows, inp, out) = (*rows, *inp, *out);
            let dx = want(0).then(|| {
                let mut d = vec![0.0; rows * inp];
                // g (rows×out) · w (out×in)
                gemm(rows, out, inp, g, (out as isize, 1), w, (inp as isize, 1), &mut d, false);
                d
            });
            let dw = want(1).then(|| {
                let mut d = vec![0.0; out * inp];
                // gᵀ (out×rows) · x (rows×in)
                gemm(out, rows, inp, g, (1, out as isize), x, (inp as isize, 1), &mut d, false);
                d
            });
            let mut res = vec![dx, dw];
            if *bias {
                res.push(want(2).then(|| {
                    let mut d = vec![0.0; out];
                    for row in g.chunks_exact(out) {
                        d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    d
                }));
            }
            res
        }
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Mul { a, b } => vec![
            want(0).then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
            want(1).then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
        ],
        Op::Scale(f) => vec![Some(g.iter().map(|v| v * f).collect())],
        Op::AddScalar | Op::Reshape => vec![Some(g.to_vec())],
        Op::Exp { y } => vec![Some(g.iter().zip(y.iter()).map(|(g, y)| g * y).collect())],
        Op::Log { x } => vec![Some(g.iter().zip(x.iter()).map(|(g, x)| g / x).collect())],
        Op::Gelu { x } => vec![Some(g.iter().zip(x.iter()).map(|(g, &x)| g * gelu_grad(x)).collect())],
        Op::LayerNorm { xhat, inv_std, gamma, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            let dx = want(0).then(|| {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_x = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * gamma[c];
                        mean_dh += dh;
                        mean_dh_x += dh * xr[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_x /= cols as f64;
                    for c in 0..cols {
                        let dh = gr[c] * gamma[c];
                        d[r * cols + c] = inv_std[r] * (dh - mean_dh - xr[c] * mean_dh_x);
                    }
                }
                d
            });
            let dgamma = want(1).then(|| {
                let mut d = vec![0.0; cols];
                for (gr, xr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for c in 0..cols {
                        d[c] += gr[c] * xr[c];
                    }
                }
                d
            });
            let dbeta = want(2).then(|| {
                let mut d = vec![0.0; cols];
                for gr in g.chunks_exact(cols) {
                    d.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
                d
            });
            vec![dx, dgamma, dbeta]
        }
        Op::Softmax { y, temperature, rows, cols } => {
            let mut d = vec![0.0; rows * cols];
            for r in 0..*rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for c in 0..*cols {
                    d[r * cols + c] = temperature * yr[c] * (gr[c] - dot);
                }
            }
            vec![Some(d)]
        }
        Op::EntropyRows { p, cols } => {
            let d = p
                .iter()
                .enumerate()
                .map(|(i, &v)| if v > 0.0 { -g[i / cols] * (v.ln() + 1.0) } else { 0.0 })
                .collect();
            vec![Some(d)]
        }
        Op::Sum { len } => vec![Some(vec![g[0]; *len])],
        Op::Mean { len } => vec![Some(vec![g[0] / *len as f64; *len])],
        Op::SumLast { rows, cols } => {
            let mut d = vec![0.0; rows * cols];
            for r in 0..*rows {
                d[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = g[r]);
            }
            vec![Some(d)]
        }
        Op::MeanRows { rows, cols } => {
            let inv = 1.0 / *rows as f64;
            let mut d = Vec::with_capacity(rows * cols);
            for _ in 0..*rows {
                d.extend(g.iter().map(|v| v * inv));
            }
            vec![Some(d)]
        }
        Op::Transpose { rows, cols } => {
            let mut d = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    d[r * cols + c] = g[c * rows + r];
                }
            }
            vec![Some(d)]
        }
        Op::Concat { row_counts, cols } => {
            let mut res = Vec::with_capacity(row_counts.len());
            let mut offset = 0;
            for (i, r) in row_counts.iter().enumerate() {
                let n = r * cols;
                res.push(want(i).then(|| g[offset..offset + n].to_vec()));
                offset += n;
            }
            res
        }
        Op::GatherRows { index, rows, cols } => {
            let mut d = vec![0.0; rows * cols];
            for (k, &i) in index.iter().enumerate() {
                let src = &g[k * cols..(k + 1) * cols];
                d[i * cols..(i + 1) * cols].iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            vec![Some(d)]
        }
        Op::NormalizeRows { y, norms, rows, cols } => {
            let mut d = vec![0.0; rows * cols];
            for r in 0..*rows {
                let gr = &g[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for c in 0..*cols {
                    d[r * cols + c] = (gr[c] - yr[c] * dot) / norms[r];
                }
            }
            vec![Some(d)]
        }
        Op::Attention { q, k, v, probs, layout } => attention_backward(q, k, v, probs, *layout, g, needed),
        Op::EmbedTokens { batch, patches, dim } => {
            let (batch, np, dim) = (*batch, *patches, *dim);
            let seq = np + 1;
            let dpatch = want(0).then(|| {
                let mut d = vec![0.0; batch * np * dim];
                for b in 0..batch {
                    for p in 0..np {
                        d[(b * np + p) * dim..][..dim]
                            .copy_from_slice(&g[(b * seq + p + 1) * dim..][..dim]);
                    }
                }
                d
            });
            let dcls = want(1).then(|| {
                let mut d = vec![0.0; dim];
                for b in 0..batch {
                    d.iter_mut()
                        .zip(&g[b * seq * dim..][..dim])
                        .for_each(|(a, x)| *a += x);
                }
                d
            });
            let dpos = want(2).then(|| {
                let mut d = vec![0.0; seq * dim];
                for b in 0..batch {
                    d.iter_mut()
                        .zip(&g[b * seq * dim..][..seq * dim])
                        .for_each(|(a, x)| *a += x);
                }
                d
            });
            vec![dpatch, dcls, dpos]
        }
    }
}

fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    layout: AttentionLayout,
    g: &[f64],
    needed: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let AttentionLayout { batch, seq, heads, head_dim } = layout;
    let width = layout.width();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let n = batch * seq * width;
    let mut dq = vec![0.0; n];
    let mut dk = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut dp = vec![0.0; seq];
    let at = |b: usize, t: usize, h: usize| (b * seq + t) * width + h * head_dim;
    for b in 0..batch {
        for h in 0..heads {
            let p_block = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            for i in 0..seq {
                let prow = &p_block[i * seq..(i + 1) * seq];
                let gi = &g[at(b, i, h)..][..head_dim];
                // dV_j += p_ij · g_i ; dP_ij = g_i · v_j
                for j in 0..seq {
                    let vj = &v[at(b, j, h)..][..head_dim];
                    dp[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    let dvj = &mut dv[at(b, j, h)..][..head_dim];
                    dvj.iter_mut().zip(gi).for_each(|(a, x)| *a += prow[j] * x);
                }
                let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                let qi_start = at(b, i, h);
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj_start = at(b, j, h);
                    for c in 0..head_dim {
                        dq[qi_start + c] += ds * k[kj_start + c];
                        dk[kj_start + c] += ds * q[qi_start + c];
                    }
                }
            }
        }
    }
    let pick = |i: usize, d: Vec<f64>| needed.get(i).copied().unwrap_or(false).then_some(d);
    vec![pick(0, dq), pick(1, dk), pick(2, dv)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let tape = Tape::new();
        let i2 = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let col = t(vec![2, 1], vec![3.0, 4.0]);
        assert_eq!(tape.matmul(&i2, &col).unwrap().data(), &[3.0, 4.0]);
        let row = t(vec![1, 2], vec![1.0, 2.0]);
        assert_eq!(tape.matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::new();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matches!(tape.matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_symmetric_cases() {
        let tape = Tape::new();
        let y = tape.softmax(&Tensor::zeros(vec![3]), 1.0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.softmax(&t(vec![2], vec![1.0, 1.0]), 100.0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let tape = Tape::new();
        assert!(tape.softmax(&Tensor::zeros(vec![3]), 0.0).is_err());
        assert!(tape.softmax(&Tensor::zeros(vec![3]), -1.0).is_err());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let tape = Tape::new();
        let x = tape.watch(&t(vec![3], vec![5.0, -1.0, 2.0]));
        let loss = tape.sum(&x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(tape.is_empty());

        let x = tape.watch(&t(vec![3], vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.watch(&t(vec![2], vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::NotScalar(_))));
        let constant = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&constant), Err(Error::NotOnTape)));
        let other = Tape::new();
        let y = other.watch(&Tensor::scalar(2.0));
        let s = other.sum(&y).unwrap();
        assert!(matches!(tape.backward(&s), Err(Error::NotOnTape)));
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let tape = Tape::new();
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.matmul(&a, &a).unwrap();
        let c = tape.softmax(&b, 2.0).unwrap();
        let _ = tape.sum(&c).unwrap();
        assert!(tape.is_empty());
        assert!(!c.requires_grad());
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.watch(&Tensor::scalar(1.0));
        assert!(matches!(b.scale(&x, 2.0), Err(Error::NotOnTape)));
    }

    #[cfg(debug_assertions)]
    #[test]
    fn non_finite_outputs_surface_as_errors() {
        let tape = Tape::new();
        let x = t(vec![2], vec![0.0, 1.0]);
        assert!(matches!(tape.log(&x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.watch(&t(vec![2], vec![1.0, 3.0]));
        let y = tape.add(&x, &x).unwrap();
        let z = tape.mul(&y, &x).unwrap(); // 2x²
        let loss = tape.sum(&z).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[4.0, 12.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(1.0));
        let unused = tape.watch(&Tensor::scalar(1.0));
        let loss = tape.scale(&x, 3.0).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.get_or_zeros(&unused).data(), &[0.0]);
        assert_eq!(g.get(&x).unwrap().data(), &[3.0]);
    }
}

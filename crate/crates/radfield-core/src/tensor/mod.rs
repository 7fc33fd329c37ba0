//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! Every value is a 2-D matrix (scalars are 1×1, vectors are n×1 or 1×n);
//! that is all the radiance-field pipeline needs and it keeps shape handling
//! honest. Forward operations evaluate eagerly and record the operation graph
//! through reference-counted parent links. [`Tensor::backward`] walks the
//! graph in reverse creation order (creation ids are monotone, and parents
//! always precede children, so sorting by id is a topological order) and
//! accumulates `d loss / d tensor` into every leaf parameter created with
//! [`Tensor::param`], plus any interior node marked with
//! [`Tensor::retain_grad`].
//!
//! Gradients accumulate across repeated `backward` calls until explicitly
//! cleared with [`Tensor::zero_grad`] — the training loop owns the reset.
//!
//! Shape mismatches are programming errors and panic with a message naming
//! both shapes.

mod adam;
pub mod gradcheck;
pub(crate) mod pool;

pub use adam::{Adam, AdamParams};

use crate::backend;
use crate::backend::fmath;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Extension point for operations whose forward pass lives outside this
/// module (wavelet transforms, hash-grid lookups). The implementation
/// receives the upstream gradient and must **add** parent `idx`'s
/// contribution into `sink`.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward_into(&self, grad_out: &[f64], idx: usize, sink: &mut [f64]);

    /// Overwrite `sink` — whose contents are arbitrary on entry — with parent
    /// `idx`'s full contribution and return `true`. The default returns
    /// `false` without touching `sink`; the caller then zeroes the buffer and
    /// falls back to [`CustomOp::backward_into`]. Implementations must either
    /// write every element or leave the buffer untouched.
    fn backward_assign(&self, _grad_out: &[f64], _idx: usize, _sink: &mut [f64]) -> bool {
        false
    }
}

/// Elementwise epilogue that [`Tensor::affine`] fuses onto the matmul+bias
/// node. `Relu` computes the negative side as `0.0 * z` rather than a literal
/// zero so a non-finite pre-activation still surfaces as NaN in the output
/// instead of being silently clamped away.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    Affine(Tensor, Tensor, Tensor, Activation),
    Transpose(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Square(Tensor),
    Abs(Tensor),
    MaxScalar(Tensor, f64),
    Huber(Tensor, f64),
    Softplus(Tensor),
    Sigmoid(Tensor),
    SoftmaxRows(Tensor),
    SumAll(Tensor),
    MeanAll(Tensor),
    SumRows(Tensor),
    CumsumExclRows(Tensor),
    BroadcastRows(Tensor, usize),
    BroadcastCols(Tensor, usize),
    BroadcastAll(Tensor, usize, usize),
    ConcatRows(Vec<Tensor>),
    ConcatCols(Vec<Tensor>),
    SliceRows(Tensor, usize, usize),
    SliceCols(Tensor, usize, usize),
    Reshape(Tensor),
    Custom(Vec<Tensor>, Rc<dyn CustomOp>),
}

struct Inner {
    id: u64,
    rows: usize,
    cols: usize,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    retain: core::cell::Cell<bool>,
    op: Op,
}

impl Drop for Inner {
    fn drop(&mut self) {
        // Recycle the payloads; graphs of identical shape are rebuilt every
        // training iteration and reuse beats allocator churn.
        pool::give(core::mem::take(self.data.get_mut()));
        if let Some(g) = self.grad.get_mut().take() {
            pool::give(g);
        }
    }
}

/// A reference-counted matrix participating in the autodiff graph. Cloning
/// is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &(self.rows(), self.cols()))
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &str) {
    assert!(
        a.rows() == b.rows() && a.cols() == b.cols(),
        "{op}: shape mismatch {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    );
}

impl Tensor {
    fn build(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                rows,
                cols,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                retain: core::cell::Cell::new(false),
                op,
            }),
        }
    }

    /// Constant leaf (no gradient tracking).
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::build(rows, cols, data, false, Op::Leaf)
    }

    /// Trainable leaf; `backward` accumulates into its `grad`.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::build(rows, cols, data, true, Op::Leaf)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    pub fn len(&self) -> usize {
        self.inner.rows * self.inner.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrow the underlying row-major storage.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows() && c < self.cols());
        self.inner.data.borrow()[r * self.cols() + c]
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Replace the stored values (length-checked). Intended for optimizer
    /// updates, checkpoint restore and finite-difference probing of leaves;
    /// interior nodes are not recomputed.
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(values.len(), d.len(), "set_data: length mismatch");
        d.copy_from_slice(values);
    }

    /// Mutate storage in place (see [`Tensor::set_data`] for caveats).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.data.borrow_mut())
    }

    /// Current accumulated gradient, if any backward pass has touched this
    /// tensor since the last [`Tensor::zero_grad`].
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Reset the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => buf.fill(0.0),
            None => *g = Some(vec![0.0; self.len()]),
        }
    }

    /// Request that backward also store this interior node's gradient.
    pub fn retain_grad(&self) {
        self.inner.retain.set(true);
    }

    /// Accumulate an externally computed gradient (same layout as `data`),
    /// for pipelines that produce part of the gradient outside this graph.
    pub fn add_to_grad(&self, values: &[f64]) {
        assert_eq!(values.len(), self.len(), "add_to_grad: length mismatch");
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(values) {
                    *b += v;
                }
            }
            None => *g = Some(values.to_vec()),
        }
    }

    fn unary(&self, op: Op, data: Vec<f64>) -> Tensor {
        Tensor::build(self.rows(), self.cols(), data, self.requires_grad(), op)
    }

    // --- pooled elementwise kernels ---------------------------------------

    fn pooled_map(src: &[f64], mut f: impl FnMut(f64) -> f64) -> Vec<f64> {
        let mut out = pool::take_uninit(src.len());
        for (o, &s) in out.iter_mut().zip(src) {
            *o = f(s);
        }
        out
    }

    fn pooled_zip(a: &[f64], b: &[f64], mut f: impl FnMut(f64, f64) -> f64) -> Vec<f64> {
        let mut out = pool::take_uninit(a.len());
        for (o, (&x, &y)) in out.iter_mut().zip(a.iter().zip(b)) {
            *o = f(x, y);
        }
        out
    }

    // --- elementwise binary ---------------------------------------------

    pub fn add(&self, other: &Tensor) -> Tensor {
        check_same(self, other, "add");
        let a = self.data();
        let b = other.data();
        let data = Tensor::pooled_zip(&a, &b, |x, y| x + y);
        drop(a);
        drop(b);
        let req = self.requires_grad() || other.requires_grad();
        Tensor::build(self.rows(), self.cols(), data, req, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        check_same(self, other, "sub");
        let a = self.data();
        let b = other.data();
        let data = Tensor::pooled_zip(&a, &b, |x, y| x - y);
        drop(a);
        drop(b);
        let req = self.requires_grad() || other.requires_grad();
        Tensor::build(self.rows(), self.cols(), data, req, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        check_same(self, other, "mul");
        let a = self.data();
        let b = other.data();
        let data = Tensor::pooled_zip(&a, &b, |x, y| x * y);
        drop(a);
        drop(b);
        let req = self.requires_grad() || other.requires_grad();
        Tensor::build(self.rows(), self.cols(), data, req, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        check_same(self, other, "div");
        let a = self.data();
        let b = other.data();
        let data = Tensor::pooled_zip(&a, &b, |x, y| x / y);
        drop(a);
        drop(b);
        let req = self.requires_grad() || other.requires_grad();
        Tensor::build(self.rows(), self.cols(), data, req, Op::Div(self.clone(), other.clone()))
    }

    // --- matrix ops -------------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.cols() == other.rows(),
            "matmul: inner dimensions differ, {}x{} vs {}x{}",
            self.rows(),
            self.cols(),
            other.rows(),
            other.cols()
        );
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = pool::take_uninit(m * n);
        backend::gemm_nn(m, k, n, &self.data(), &other.data(), &mut out, false);
        let req = self.requires_grad() || other.requires_grad();
        Tensor::build(m, n, out, req, Op::Matmul(self.clone(), other.clone()))
    }

    /// Fused dense layer: `act(self · w + b)` with `b` broadcast across rows.
    /// One graph node instead of the matmul → broadcast → add → relu chain,
    /// which keeps the backward pass to three kernel calls (input grad,
    /// weight grad, bias column-sum).
    pub fn affine(&self, w: &Tensor, b: &Tensor, act: Activation) -> Tensor {
        assert!(
            self.cols() == w.rows(),
            "affine: inner dimensions differ, {}x{} vs {}x{}",
            self.rows(),
            self.cols(),
            w.rows(),
            w.cols()
        );
        assert!(
            b.rows() == 1 && b.cols() == w.cols(),
            "affine: bias must be 1x{}, got {}x{}",
            w.cols(),
            b.rows(),
            b.cols()
        );
        let (m, k, n) = (self.rows(), self.cols(), w.cols());
        let mut out = pool::take_uninit(m * n);
        backend::gemm_nn(m, k, n, &self.data(), &w.data(), &mut out, false);
        let bd = b.data();
        for row in out.chunks_exact_mut(n) {
            match act {
                Activation::Identity => {
                    for (o, bj) in row.iter_mut().zip(bd.iter()) {
                        *o += bj;
                    }
                }
                Activation::Relu => {
                    for (o, bj) in row.iter_mut().zip(bd.iter()) {
                        let z = *o + bj;
                        *o = if z > 0.0 { z } else { 0.0 * z };
                    }
                }
            }
        }
        drop(bd);
        let req = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Tensor::build(
            m,
            n,
            out,
            req,
            Op::Affine(self.clone(), w.clone(), b.clone(), act),
        )
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = self.shape();
        let mut out = vec![0.0; r * c];
        backend::transpose(r, c, &self.data(), &mut out);
        Tensor::build(c, r, out, self.requires_grad(), Op::Transpose(self.clone()))
    }

    // --- scalar and unary ops ----------------------------------------------

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), |x| x + s);
        self.unary(Op::AddScalar(self.clone()), data)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), |x| x * s);
        self.unary(Op::MulScalar(self.clone(), s), data)
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), fmath::exp);
        self.unary(Op::Exp(self.clone()), data)
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn ln(&self) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), fmath::ln);
        self.unary(Op::Ln(self.clone()), data)
    }

    pub fn sqrt(&self) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), fmath::sqrt);
        self.unary(Op::Sqrt(self.clone()), data)
    }

    pub fn square(&self) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), |x| x * x);
        self.unary(Op::Square(self.clone()), data)
    }

    pub fn abs(&self) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), fmath::abs);
        self.unary(Op::Abs(self.clone()), data)
    }

    /// Elementwise `max(x, c)`; `relu` is `max_scalar(0.0)`.
    pub fn max_scalar(&self, c: f64) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), |x| if x > c { x } else { c });
        self.unary(Op::MaxScalar(self.clone(), c), data)
    }

    pub fn relu(&self) -> Tensor {
        self.max_scalar(0.0)
    }

    /// Elementwise Huber penalty of a residual: `0.5 x²` for `|x| ≤ delta`,
    /// `delta (|x| − 0.5 delta)` otherwise.
    pub fn huber(&self, delta: f64) -> Tensor {
        assert!(delta > 0.0, "huber: delta must be positive, got {delta}");
        let data = Tensor::pooled_map(&self.data(), |x| {
            let a = fmath::abs(x);
            if a <= delta {
                0.5 * x * x
            } else {
                delta * (a - 0.5 * delta)
            }
        });
        self.unary(Op::Huber(self.clone(), delta), data)
    }

    /// Numerically stable `ln(1 + eˣ)`.
    pub fn softplus(&self) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), |x| {
            let m = if x > 0.0 { x } else { 0.0 };
            m + fmath::log1p(fmath::exp(-fmath::abs(x)))
        });
        self.unary(Op::Softplus(self.clone()), data)
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = Tensor::pooled_map(&self.data(), |x| {
            let e = fmath::exp(-fmath::abs(x));
            if x >= 0.0 {
                1.0 / (1.0 + e)
            } else {
                e / (1.0 + e)
            }
        });
        self.unary(Op::Sigmoid(self.clone()), data)
    }

    /// Softmax along each row (max-shifted for stability).
    pub fn softmax_rows(&self) -> Tensor {
        let (r, c) = self.shape();
        assert!(c > 0, "softmax_rows: empty rows");
        let x = self.data();
        let mut out = pool::take_uninit(r * c);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = fmath::exp(v - mx);
                *d = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        drop(x);
        self.unary(Op::SoftmaxRows(self.clone()), out)
    }

    // --- reductions -------------------------------------------------------

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::build(1, 1, vec![s], self.requires_grad(), Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        assert!(self.len() > 0, "mean_all: empty tensor");
        let s: f64 = self.data().iter().sum();
        let mean = s / self.len() as f64;
        Tensor::build(1, 1, vec![mean], self.requires_grad(), Op::MeanAll(self.clone()))
    }

    /// Row sums: `[m,n] -> [m,1]`.
    pub fn sum_rows(&self) -> Tensor {
        let (r, c) = self.shape();
        let x = self.data();
        let mut data = pool::take_uninit(r);
        for (i, d) in data.iter_mut().enumerate() {
            *d = x[i * c..(i + 1) * c].iter().sum();
        }
        drop(x);
        Tensor::build(r, 1, data, self.requires_grad(), Op::SumRows(self.clone()))
    }

    /// Exclusive prefix sums along each row: `y[i,j] = Σ_{j'<j} x[i,j']`.
    pub fn cumsum_excl_rows(&self) -> Tensor {
        let (r, c) = self.shape();
        let x = self.data();
        let mut out = pool::take_uninit(r * c);
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..c {
                out[i * c + j] = acc;
                acc += x[i * c + j];
            }
        }
        drop(x);
        self.unary(Op::CumsumExclRows(self.clone()), out)
    }

    // --- broadcasting -------------------------------------------------------

    /// `[1,n] -> [m,n]` by repeating the single row.
    pub fn broadcast_rows(&self, m: usize) -> Tensor {
        assert_eq!(self.rows(), 1, "broadcast_rows: expected 1x{}, got {}x{}", self.cols(), self.rows(), self.cols());
        let x = self.data();
        let mut out = pool::take_uninit(m * self.cols());
        for row in out.chunks_exact_mut(self.cols()) {
            row.copy_from_slice(&x);
        }
        drop(x);
        Tensor::build(m, self.cols(), out, self.requires_grad(), Op::BroadcastRows(self.clone(), m))
    }

    /// `[m,1] -> [m,n]` by repeating the single column.
    pub fn broadcast_cols(&self, n: usize) -> Tensor {
        assert_eq!(self.cols(), 1, "broadcast_cols: expected {}x1, got {}x{}", self.rows(), self.rows(), self.cols());
        let x = self.data();
        let mut out = pool::take_uninit(self.rows() * n);
        for (row, &v) in out.chunks_exact_mut(n).zip(x.iter()) {
            row.fill(v);
        }
        drop(x);
        Tensor::build(self.rows(), n, out, self.requires_grad(), Op::BroadcastCols(self.clone(), n))
    }

    /// `[1,1] -> [m,n]`.
    pub fn broadcast_all(&self, m: usize, n: usize) -> Tensor {
        assert_eq!(self.shape(), (1, 1), "broadcast_all: expected scalar, got {}x{}", self.rows(), self.cols());
        let v = self.item();
        let mut out = pool::take_uninit(m * n);
        out.fill(v);
        Tensor::build(m, n, out, self.requires_grad(), Op::BroadcastAll(self.clone(), m, n))
    }

    // --- concatenation / slicing -------------------------------------------

    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let c = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            assert_eq!(
                p.cols(),
                c,
                "concat_rows: column mismatch {}x{} vs {}x{}",
                parts[0].rows(),
                c,
                p.rows(),
                p.cols()
            );
            rows += p.rows();
        }
        let mut data = pool::take_uninit(rows * c);
        let mut off = 0;
        for p in parts {
            let pd = p.data();
            data[off..off + pd.len()].copy_from_slice(&pd);
            off += pd.len();
        }
        let req = parts.iter().any(Tensor::requires_grad);
        Tensor::build(rows, c, data, req, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let r = parts[0].rows();
        let mut cols = 0;
        for p in parts {
            assert_eq!(
                p.rows(),
                r,
                "concat_cols: row mismatch {r}x{} vs {}x{}",
                parts[0].cols(),
                p.rows(),
                p.cols()
            );
            cols += p.cols();
        }
        let mut data = pool::take_uninit(r * cols);
        let mut off = 0;
        for p in parts {
            let pc = p.cols();
            let pd = p.data();
            for i in 0..r {
                data[i * cols + off..i * cols + off + pc].copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let req = parts.iter().any(Tensor::requires_grad);
        Tensor::build(r, cols, data, req, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `[r0, r1)` as a new tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor {
        assert!(
            r0 <= r1 && r1 <= self.rows(),
            "slice_rows: range {r0}..{r1} out of bounds for {}x{}",
            self.rows(),
            self.cols()
        );
        let c = self.cols();
        let mut data = pool::take_uninit((r1 - r0) * c);
        data.copy_from_slice(&self.data()[r0 * c..r1 * c]);
        Tensor::build(r1 - r0, c, data, self.requires_grad(), Op::SliceRows(self.clone(), r0, r1))
    }

    /// Columns `[c0, c1)` as a new tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor {
        assert!(
            c0 <= c1 && c1 <= self.cols(),
            "slice_cols: range {c0}..{c1} out of bounds for {}x{}",
            self.rows(),
            self.cols()
        );
        let (r, c) = self.shape();
        let w = c1 - c0;
        let x = self.data();
        let mut data = pool::take_uninit(r * w);
        for (i, row) in data.chunks_exact_mut(w).enumerate() {
            row.copy_from_slice(&x[i * c + c0..i * c + c1]);
        }
        drop(x);
        Tensor::build(r, w, data, self.requires_grad(), Op::SliceCols(self.clone(), c0, c1))
    }

    /// Same elements, new row/column split (row-major order preserved).
    pub fn reshape(&self, rows: usize, cols: usize) -> Tensor {
        assert!(
            rows * cols == self.len(),
            "reshape: {}x{} has {} elements, not {rows}x{cols}",
            self.rows(),
            self.cols(),
            self.len()
        );
        let mut data = pool::take_uninit(self.len());
        data.copy_from_slice(&self.data());
        Tensor::build(rows, cols, data, self.requires_grad(), Op::Reshape(self.clone()))
    }

    /// Attach an externally computed op (see [`CustomOp`]).
    pub fn custom(
        parents: &[Tensor],
        op: Rc<dyn CustomOp>,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> Tensor {
        let req = parents.iter().any(Tensor::requires_grad);
        Tensor::build(rows, cols, data, req, Op::Custom(parents.to_vec(), op))
    }

    // --- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Accumulates into `grad` of all
    /// trainable leaves (and `retain_grad` nodes) reachable from `self`.
    pub fn backward(&self) {
        assert_eq!(
            self.shape(),
            (1, 1),
            "backward: loss must be a scalar, got {}x{}",
            self.rows(),
            self.cols()
        );
        assert!(
            self.item().is_finite(),
            "backward: loss is not finite ({})",
            self.item()
        );
        if !self.requires_grad() {
            return;
        }

        // Collect reachable differentiable subgraph.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: BTreeSet<u64> = BTreeSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.inner.id) {
                continue;
            }
            t.for_each_parent(|p| stack.push(p.clone()));
            nodes.push(t);
        }
        // Parents are created before children, so descending id order is a
        // valid reverse-topological order.
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        let mut flows: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        flows.insert(self.inner.id, vec![1.0]);

        for node in &nodes {
            let Some(g) = flows.remove(&node.inner.id) else {
                continue;
            };
            node.propagate(&g, &mut flows);
            let is_leaf = matches!(node.inner.op, Op::Leaf);
            if is_leaf || node.inner.retain.get() {
                let mut slot = node.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(buf) => {
                        for (b, gi) in buf.iter_mut().zip(&g) {
                            *b += gi;
                        }
                        drop(slot);
                        pool::give(g);
                    }
                    None => *slot = Some(g),
                }
            } else {
                pool::give(g);
            }
        }
    }

    fn for_each_parent(&self, mut f: impl FnMut(&Tensor)) {
        match &self.inner.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                f(a);
                f(b);
            }
            Op::Affine(x, w, b, _) => {
                f(x);
                f(w);
                f(b);
            }
            Op::Transpose(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::MaxScalar(a, _)
            | Op::Huber(a, _)
            | Op::Softplus(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumRows(a)
            | Op::CumsumExclRows(a)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::BroadcastAll(a, _, _)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::Reshape(a) => f(a),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => {
                for p in parts {
                    f(p);
                }
            }
            Op::Custom(parents, _) => {
                for p in parents {
                    f(p);
                }
            }
        }
    }

    /// Add this node's contribution to each differentiable parent's flow
    /// buffer. `g` is d(loss)/d(self).
    fn propagate(&self, g: &[f64], flows: &mut BTreeMap<u64, Vec<f64>>) {
        fn sink<'m>(flows: &'m mut BTreeMap<u64, Vec<f64>>, t: &Tensor) -> &'m mut Vec<f64> {
            flows
                .entry(t.inner.id)
                .or_insert_with(|| pool::take_zeroed(t.len()))
        }

        /// Like `sink`, but when the flow does not exist yet the buffer is
        /// handed back *unzeroed* with `fresh = true`: the caller must assign
        /// every element instead of accumulating. Saves a full clear+read
        /// pass on the large matmul flows.
        fn sink_fresh<'m>(
            flows: &'m mut BTreeMap<u64, Vec<f64>>,
            t: &Tensor,
        ) -> (&'m mut Vec<f64>, bool) {
            use alloc::collections::btree_map::Entry;
            match flows.entry(t.inner.id) {
                Entry::Occupied(e) => (e.into_mut(), false),
                Entry::Vacant(e) => (e.insert(pool::take_uninit(t.len())), true),
            }
        }

        match &self.inner.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if a.requires_grad() {
                    let s = sink(flows, a);
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                }
                if b.requires_grad() {
                    let s = sink(flows, b);
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    let s = sink(flows, a);
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                }
                if b.requires_grad() {
                    let s = sink(flows, b);
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        s[i] += g[i] * bd[i];
                    }
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let s = sink(flows, b);
                    for i in 0..s.len() {
                        s[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bd = b.data();
                if a.requires_grad() {
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        s[i] += g[i] / bd[i];
                    }
                }
                if b.requires_grad() {
                    let out = self.data();
                    let s = sink(flows, b);
                    for i in 0..s.len() {
                        s[i] -= g[i] * out[i] / bd[i];
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = a.shape();
                let n = b.cols();
                if a.requires_grad() {
                    let bd = b.data();
                    let (s, fresh) = sink_fresh(flows, a);
                    // dA = g · Bᵀ, with B already stored row-major [k,n]
                    backend::gemm_nt(m, n, k, g, &bd, s, !fresh);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let (s, fresh) = sink_fresh(flows, b);
                    // dB = Aᵀ · g, with A stored row-major [m,k]
                    backend::gemm_tn(k, m, n, &ad, g, s, !fresh);
                }
            }
            Op::Affine(x, w, b, act) => {
                let (m, n) = self.shape();
                let k = x.cols();
                // Pull the upstream gradient through the activation first so
                // the masked copy is shared by all three parameter grads. The
                // relu mask is recovered from the stored output (y > 0 iff
                // the pre-activation was > 0).
                let gz_store: Vec<f64>;
                let gz: &[f64] = match act {
                    Activation::Identity => g,
                    Activation::Relu => {
                        let out = self.data();
                        gz_store = g
                            .iter()
                            .zip(out.iter())
                            .map(|(&gi, &yi)| if yi > 0.0 { gi } else { 0.0 })
                            .collect();
                        &gz_store
                    }
                };
                if x.requires_grad() {
                    let wd = w.data();
                    let (s, fresh) = sink_fresh(flows, x);
                    // dX = gz · Wᵀ, with W already stored row-major [k,n]
                    backend::gemm_nt(m, n, k, gz, &wd, s, !fresh);
                }
                if w.requires_grad() {
                    let xd = x.data();
                    let (s, fresh) = sink_fresh(flows, w);
                    // dW = Xᵀ · gz, with X stored row-major [m,k]
                    backend::gemm_tn(k, m, n, &xd, gz, s, !fresh);
                }
                if b.requires_grad() {
                    let s = sink(flows, b);
                    // db = column sums of gz
                    for row in gz.chunks_exact(n) {
                        for (sj, gj) in s.iter_mut().zip(row) {
                            *sj += gj;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if a.requires_grad() {
                    let (r, c) = self.shape(); // r = a.cols, c = a.rows
                    let s = sink(flows, a);
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    let s = sink(flows, a);
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                }
            }
            Op::MulScalar(a, c) => {
                if a.requires_grad() {
                    let s = sink(flows, a);
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += c * gi;
                    }
                }
            }
            Op::Exp(a) => {
                if a.requires_grad() {
                    let out = self.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        s[i] += g[i] * out[i];
                    }
                }
            }
            Op::Ln(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        s[i] += g[i] / ad[i];
                    }
                }
            }
            Op::Sqrt(a) => {
                if a.requires_grad() {
                    let out = self.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        s[i] += g[i] * 0.5 / out[i];
                    }
                }
            }
            Op::Square(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        s[i] += g[i] * 2.0 * ad[i];
                    }
                }
            }
            Op::Abs(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        let sign = if ad[i] > 0.0 {
                            1.0
                        } else if ad[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[i] * sign;
                    }
                }
            }
            Op::MaxScalar(a, c) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        if ad[i] > *c {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Huber(a, delta) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        let x = ad[i];
                        let d = if fmath::abs(x) <= *delta {
                            x
                        } else if x > 0.0 {
                            *delta
                        } else {
                            -*delta
                        };
                        s[i] += g[i] * d;
                    }
                }
            }
            Op::Softplus(a) => {
                if a.requires_grad() {
                    let ad = a.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        let x = ad[i];
                        let e = fmath::exp(-fmath::abs(x));
                        let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                        s[i] += g[i] * sig;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if a.requires_grad() {
                    let out = self.data();
                    let s = sink(flows, a);
                    for i in 0..s.len() {
                        s[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if a.requires_grad() {
                    let out = self.data();
                    let (r, c) = self.shape();
                    let s = sink(flows, a);
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                        let sr = &mut s[i * c..(i + 1) * c];
                        for j in 0..c {
                            sr[j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if a.requires_grad() {
                    let s = sink(flows, a);
                    for si in s.iter_mut() {
                        *si += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                if a.requires_grad() {
                    let w = g[0] / a.len() as f64;
                    let s = sink(flows, a);
                    for si in s.iter_mut() {
                        *si += w;
                    }
                }
            }
            Op::SumRows(a) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let s = sink(flows, a);
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            s[i * c + j] += gi;
                        }
                    }
                }
            }
            Op::CumsumExclRows(a) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let s = sink(flows, a);
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in (0..c).rev() {
                            s[i * c + j] += acc;
                            acc += g[i * c + j];
                        }
                    }
                }
            }
            Op::BroadcastRows(a, m) => {
                if a.requires_grad() {
                    let c = a.cols();
                    let s = sink(flows, a);
                    for i in 0..*m {
                        for j in 0..c {
                            s[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::BroadcastCols(a, n) => {
                if a.requires_grad() {
                    let r = a.rows();
                    let s = sink(flows, a);
                    for i in 0..r {
                        let row: f64 = g[i * n..(i + 1) * n].iter().sum();
                        s[i] += row;
                    }
                }
            }
            Op::BroadcastAll(a, m, n) => {
                if a.requires_grad() {
                    let total: f64 = g[..m * n].iter().sum();
                    sink(flows, a)[0] += total;
                }
            }
            Op::ConcatRows(parts) => {
                let c = self.cols();
                let mut r0 = 0;
                for p in parts {
                    let pr = p.rows();
                    if p.requires_grad() {
                        let s = sink(flows, p);
                        for (si, gi) in s.iter_mut().zip(&g[r0 * c..(r0 + pr) * c]) {
                            *si += gi;
                        }
                    }
                    r0 += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, cols) = self.shape();
                let mut c0 = 0;
                for p in parts {
                    let pc = p.cols();
                    if p.requires_grad() {
                        let s = sink(flows, p);
                        for i in 0..r {
                            for j in 0..pc {
                                s[i * pc + j] += g[i * cols + c0 + j];
                            }
                        }
                    }
                    c0 += pc;
                }
            }
            Op::SliceRows(a, r0, r1) => {
                if a.requires_grad() {
                    let c = a.cols();
                    let s = sink(flows, a);
                    for (si, gi) in s[r0 * c..r1 * c].iter_mut().zip(g) {
                        *si += gi;
                    }
                }
            }
            Op::SliceCols(a, c0, c1) => {
                if a.requires_grad() {
                    let (r, c) = a.shape();
                    let w = c1 - c0;
                    let s = sink(flows, a);
                    for i in 0..r {
                        for j in 0..w {
                            s[i * c + c0 + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if a.requires_grad() {
                    let s = sink(flows, a);
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi;
                    }
                }
            }
            Op::Custom(parents, op) => {
                for (idx, p) in parents.iter().enumerate() {
                    if p.requires_grad() {
                        let (s, fresh) = sink_fresh(flows, p);
                        if fresh && op.backward_assign(g, idx, s) {
                            continue;
                        }
                        if fresh {
                            s.fill(0.0);
                        }
                        op.backward_into(g, idx, s);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;

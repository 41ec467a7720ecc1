//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are handles onto reference-counted nodes; every operation that
//! involves a gradient-requiring operand records its parents, so a forward
//! pass builds the computation graph implicitly. [`backward`] walks that
//! graph once in reverse topological order and accumulates gradients into
//! every node that requires them.
//!
//! Scope is deliberately small: 1-D and 2-D shapes, the handful of ops an
//! MLP and an input-gradient attack need, and no broadcasting beyond
//! scalar-vs-tensor. `relu` has derivative 0 at 0. All stored values must be
//! finite; `log`/`exp` check their outputs, the remaining ops check under
//! `debug_assertions`.
//!
//! A graph lives on one thread (handles are `Rc`-based and not `Send`);
//! parallel workloads build independent graphs.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

/// Errors from tensor construction and ops.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shape product does not match the data length.
    DataLength { expected: usize, got: usize },
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An op requires a specific rank or dimension it did not get.
    BadShape { op: &'static str, shape: Vec<usize> },
    /// A non-finite value was found where only finite values are allowed.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar tensor.
    NotScalar { len: usize },
    /// A cross-entropy target row is not a probability distribution.
    NotDistribution { row: usize, sum: f64 },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "shape implies {expected} elements, got {got}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::BadShape { op, shape } => write!(f, "{op}: unsupported shape {shape:?}"),
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            TensorError::NotScalar { len } => {
                write!(f, "backward requires a scalar loss, got {len} elements")
            }
            TensorError::NotDistribution { row, sum } => {
                write!(f, "target row {row} is not a distribution (sum {sum})")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

enum Op {
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    /// Row-vector bias added to every row of a matrix. Explicit op, not
    /// implicit broadcasting.
    AddRow(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Log(Tensor),
    Exp(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    /// Row-wise softmax; backward reuses the node's own output.
    Softmax(Tensor),
    /// Fused mean cross-entropy between logits and constant target rows.
    CrossEntropy { logits: Tensor, target: Tensor },
    /// Column slice of a matrix; gradient scatters back zero-padded.
    SliceCols {
        input: Tensor,
        start: usize,
        len: usize,
    },
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// Handle to a tensor node. Cloning is cheap and aliases the same node.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("data", &inner.data)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> TensorResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    /// Leaf tensor from raw data. Rejects non-finite values up front.
    pub fn new(shape: &[usize], data: Vec<f64>) -> TensorResult<Tensor> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                expected: numel(shape),
                got: data.len(),
            });
        }
        check_finite("new", &data)?;
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn scalar(value: f64) -> Tensor {
        assert!(value.is_finite(), "scalar: non-finite value");
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            grad: None,
            requires_grad,
            op: None,
        })))
    }

    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "op produced a non-finite value"
        );
        Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            grad: None,
            requires_grad: true,
            op: Some(op),
        })))
    }

    /// Marks this leaf as a differentiation target and returns it.
    pub fn requires_grad(self) -> Tensor {
        self.0.borrow_mut().requires_grad = true;
        self
    }

    pub fn does_require_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the stored values.
    pub fn items(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.0.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar");
        inner.data[0]
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Overwrites the values of a leaf in place (used by optimizer updates).
    /// Panics if called on a non-leaf: graph nodes are immutable history.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.0.borrow_mut();
        assert!(inner.op.is_none(), "set_data on a non-leaf tensor");
        assert_eq!(inner.data.len(), data.len(), "set_data: length mismatch");
        debug_assert!(data.iter().all(|v| v.is_finite()));
        inner.data.copy_from_slice(data);
    }

    /// New leaf with the same values and no graph history.
    pub fn detach(&self) -> Tensor {
        let inner = self.0.borrow();
        Tensor::leaf(inner.shape.clone(), inner.data.clone(), false)
    }

    fn ptr(&self) -> *const RefCell<Inner> {
        Rc::as_ptr(&self.0)
    }

    fn rows_cols(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        let shape = self.shape();
        match shape.len() {
            1 => Ok((1, shape[0])),
            2 => Ok((shape[0], shape[1])),
            _ => Err(TensorError::BadShape { op, shape }),
        }
    }

    // ---- ops ---------------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = rhs.rows_cols("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let a = self.0.borrow();
        let b = rhs.0.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        drop(a);
        drop(b);
        Ok(self.emit(vec![m, n], out, || Op::MatMul(self.clone(), rhs.clone()), &[rhs]))
    }

    fn zip_elementwise(
        &self,
        rhs: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl FnOnce() -> Op,
    ) -> TensorResult<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let a = self.0.borrow();
        let b = rhs.0.borrow();
        let out: Vec<f64> = if ls == rs {
            a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
        } else if rhs.len() == 1 {
            let y = b.data[0];
            a.data.iter().map(|&x| f(x, y)).collect()
        } else if self.len() == 1 {
            let x = a.data[0];
            b.data.iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: ls,
                right: rs,
            });
        };
        let shape = if self.len() == 1 && rhs.len() != 1 { rs } else { ls };
        drop(a);
        drop(b);
        Ok(self.emit(shape, out, make_op, &[rhs]))
    }

    /// Elementwise sum. Shapes must match, or one side is a scalar.
    pub fn add(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        self.zip_elementwise(rhs, "add", |x, y| x + y, || Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        self.zip_elementwise(rhs, "sub", |x, y| x - y, || Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        self.zip_elementwise(rhs, "mul", |x, y| x * y, || Op::Mul(self.clone(), rhs.clone()))
    }

    /// Adds a length-n row vector to every row of an m x n matrix.
    pub fn add_row(&self, bias: &Tensor) -> TensorResult<Tensor> {
        let (m, n) = self.rows_cols("add_row")?;
        let bshape = bias.shape();
        if bshape != [n] && bshape != [1, n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(),
                right: bshape,
            });
        }
        let a = self.0.borrow();
        let b = bias.0.borrow();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(a.data[i * n + j] + b.data[j]);
            }
        }
        drop(a);
        drop(b);
        Ok(self.emit(self.shape(), out, || Op::AddRow(self.clone(), bias.clone()), &[bias]))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        assert!(c.is_finite(), "scale by non-finite constant");
        let out: Vec<f64> = self.0.borrow().data.iter().map(|&x| c * x).collect();
        self.emit(self.shape(), out, || Op::Scale(self.clone(), c), &[])
    }

    /// max(x, 0); derivative at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self
            .0
            .borrow()
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.emit(self.shape(), out, || Op::Relu(self.clone()), &[])
    }

    pub fn log(&self) -> TensorResult<Tensor> {
        let out: Vec<f64> = self.0.borrow().data.iter().map(|&x| x.ln()).collect();
        check_finite("log", &out)?;
        Ok(self.emit(self.shape(), out, || Op::Log(self.clone()), &[]))
    }

    pub fn exp(&self) -> TensorResult<Tensor> {
        let out: Vec<f64> = self.0.borrow().data.iter().map(|&x| x.exp()).collect();
        check_finite("exp", &out)?;
        Ok(self.emit(self.shape(), out, || Op::Exp(self.clone()), &[]))
    }

    /// Sum of all elements (scalar result).
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.0.borrow().data.iter().sum();
        self.emit(vec![1], vec![s], || Op::Sum(self.clone()), &[])
    }

    /// Mean of all elements (scalar result).
    pub fn mean(&self) -> Tensor {
        let inner = self.0.borrow();
        let s: f64 = inner.data.iter().sum();
        let n = inner.data.len().max(1) as f64;
        drop(inner);
        self.emit(vec![1], vec![s / n], || Op::Mean(self.clone()), &[])
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&self) -> TensorResult<Tensor> {
        let (rows, cols) = self.rows_cols("softmax")?;
        if cols == 0 {
            return Err(TensorError::BadShape {
                op: "softmax",
                shape: self.shape(),
            });
        }
        let inner = self.0.borrow();
        check_finite("softmax", &inner.data)?;
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &inner.data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|&e| e / denom));
        }
        drop(inner);
        Ok(self.emit(self.shape(), out, || Op::Softmax(self.clone()), &[]))
    }

    /// Mean over rows of `-sum_k target_k * log softmax(logits)_k`.
    ///
    /// Targets are treated as constants (no gradient flows to them). Each
    /// target row must be non-negative and sum to 1 within 1e-9.
    pub fn cross_entropy(&self, target: &Tensor) -> TensorResult<Tensor> {
        let (rows, cols) = self.rows_cols("cross_entropy")?;
        let (trows, tcols) = target.rows_cols("cross_entropy")?;
        if rows != trows || cols != tcols {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(),
                right: target.shape(),
            });
        }
        let logits = self.0.borrow();
        let tgt = target.0.borrow();
        let mut total = 0.0;
        for r in 0..rows {
            let trow = &tgt.data[r * cols..(r + 1) * cols];
            let sum: f64 = trow.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || trow.iter().any(|&t| t < 0.0) {
                return Err(TensorError::NotDistribution { row: r, sum });
            }
            let zrow = &logits.data[r * cols..(r + 1) * cols];
            let m = zrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + zrow.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            // sum_k t_k (lse - z_k) == lse - sum_k t_k z_k  since sum t == 1
            let dot: f64 = trow.iter().zip(zrow).map(|(&t, &z)| t * z).sum();
            total += lse - dot;
        }
        drop(logits);
        drop(tgt);
        Ok(self.emit(
            vec![1],
            vec![total / rows as f64],
            || Op::CrossEntropy {
                logits: self.clone(),
                target: target.clone(),
            },
            &[],
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> TensorResult<Tensor> {
        let (rows, cols) = self.rows_cols("slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                shape: vec![start, len, cols],
            });
        }
        let inner = self.0.borrow();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&inner.data[r * cols + start..r * cols + start + len]);
        }
        drop(inner);
        Ok(self.emit(
            vec![rows, len],
            out,
            || Op::SliceCols {
                input: self.clone(),
                start,
                len,
            },
            &[],
        ))
    }

    /// Builds the result node, recording the op only when some operand
    /// requires a gradient; inference-only forwards stay graph-free.
    fn emit(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        make_op: impl FnOnce() -> Op,
        extra: &[&Tensor],
    ) -> Tensor {
        let needs = self.does_require_grad() || extra.iter().any(|t| t.does_require_grad());
        if needs {
            Tensor::from_op(shape, data, make_op())
        } else {
            debug_assert!(
                data.iter().all(|v| v.is_finite()),
                "op produced a non-finite value"
            );
            Tensor::leaf(shape, data, false)
        }
    }
}

/// Runs reverse-mode differentiation from a scalar loss.
///
/// Gradients accumulate into every reachable tensor that requires them;
/// repeated calls without [`Tensor::zero_grad`] keep accumulating.
pub fn backward(loss: &Tensor) -> TensorResult<()> {
    if loss.len() != 1 {
        return Err(TensorError::NotScalar { len: loss.len() });
    }

    // Topological order over parent edges, iteratively (graphs from long
    // attack loops can be deep).
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<*const RefCell<Inner>> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.ptr()) {
            continue;
        }
        stack.push((node.clone(), true));
        let inner = node.0.borrow();
        if let Some(op) = &inner.op {
            for parent in op_parents(op) {
                if !seen.contains(&parent.ptr()) {
                    stack.push((parent, false));
                }
            }
        }
    }

    // Pass-local gradient buffers, then fold into persistent grads at the
    // end so that repeated backward calls accumulate correctly.
    let mut local: Vec<Option<Vec<f64>>> = vec![None; order.len()];
    let index: std::collections::HashMap<*const RefCell<Inner>, usize> = order
        .iter()
        .enumerate()
        .map(|(i, t)| (t.ptr(), i))
        .collect();
    let loss_idx = index[&loss.ptr()];
    local[loss_idx] = Some(vec![1.0]);

    for i in (0..order.len()).rev() {
        let node = &order[i];
        let g = match local[i].take() {
            Some(g) => g,
            None => continue,
        };
        {
            let mut inner = node.0.borrow_mut();
            if inner.requires_grad {
                let grad = inner
                    .grad
                    .get_or_insert_with(|| vec![0.0; g.len()]);
                for (acc, &gv) in grad.iter_mut().zip(&g) {
                    *acc += gv;
                }
            }
        }
        let inner = node.0.borrow();
        if let Some(op) = &inner.op {
            propagate(op, node, &g, |parent, contrib| {
                if let Some(&pi) = index.get(&parent.ptr()) {
                    match &mut local[pi] {
                        Some(buf) => {
                            for (acc, v) in buf.iter_mut().zip(contrib) {
                                *acc += v;
                            }
                        }
                        None => local[pi] = Some(contrib),
                    }
                }
            });
        }
    }
    Ok(())
}

fn op_parents(op: &Op) -> Vec<Tensor> {
    match op {
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![a.clone(), b.clone()]
        }
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Softmax(a) => vec![a.clone()],
        Op::CrossEntropy { logits, target: _ } => vec![logits.clone()],
        Op::SliceCols { input, .. } => vec![input.clone()],
    }
}

/// Computes each parent's gradient contribution for one node and hands it to
/// `sink`. Gradient reduction for a scalar operand is the sum over elements.
fn propagate(op: &Op, node: &Tensor, g: &[f64], mut sink: impl FnMut(&Tensor, Vec<f64>)) {
    match op {
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ad = a.0.borrow();
            let bd = b.0.borrow();
            // dA = G . B^T
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let gv = g[i * n + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        da[i * k + p] += gv * bd.data[p * n + j];
                    }
                }
            }
            // dB = A^T . G
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad.data[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        db[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            drop(ad);
            drop(bd);
            sink(a, da);
            sink(b, db);
        }
        Op::Add(a, b) => {
            sink(a, reduce_to(a, g.to_vec()));
            sink(b, reduce_to(b, g.to_vec()));
        }
        Op::Sub(a, b) => {
            sink(a, reduce_to(a, g.to_vec()));
            sink(b, reduce_to(b, g.iter().map(|&v| -v).collect()));
        }
        Op::Mul(a, b) => {
            let ad = a.0.borrow().data.clone();
            let bd = b.0.borrow().data.clone();
            let ga: Vec<f64> = if bd.len() == 1 {
                g.iter().map(|&v| v * bd[0]).collect()
            } else {
                g.iter().zip(&bd).map(|(&v, &y)| v * y).collect()
            };
            let gb: Vec<f64> = if ad.len() == 1 {
                g.iter().map(|&v| v * ad[0]).collect()
            } else {
                g.iter().zip(&ad).map(|(&v, &x)| v * x).collect()
            };
            sink(a, reduce_to(a, ga));
            sink(b, reduce_to(b, gb));
        }
        Op::AddRow(a, bias) => {
            sink(a, g.to_vec());
            let n = bias.len();
            let mut gb = vec![0.0; n];
            for (i, &gv) in g.iter().enumerate() {
                gb[i % n] += gv;
            }
            sink(bias, gb);
        }
        Op::Scale(a, c) => sink(a, g.iter().map(|&v| c * v).collect()),
        Op::Relu(a) => {
            let ad = a.0.borrow().data.clone();
            sink(
                a,
                g.iter()
                    .zip(&ad)
                    .map(|(&v, &x)| if x > 0.0 { v } else { 0.0 })
                    .collect(),
            );
        }
        Op::Log(a) => {
            let ad = a.0.borrow().data.clone();
            sink(a, g.iter().zip(&ad).map(|(&v, &x)| v / x).collect());
        }
        Op::Exp(a) => {
            let out = node.0.borrow().data.clone();
            sink(a, g.iter().zip(&out).map(|(&v, &e)| v * e).collect());
        }
        Op::Sum(a) => sink(a, vec![g[0]; a.len()]),
        Op::Mean(a) => {
            let n = a.len().max(1) as f64;
            sink(a, vec![g[0] / n; a.len()])
        }
        Op::Softmax(a) => {
            // dz = p * (g - sum(g * p)) per row
            let p = node.0.borrow().data.clone();
            let cols = *node.shape().last().unwrap();
            let mut da = vec![0.0; p.len()];
            for r in 0..p.len() / cols {
                let base = r * cols;
                let dot: f64 = (0..cols).map(|j| g[base + j] * p[base + j]).sum();
                for j in 0..cols {
                    da[base + j] = p[base + j] * (g[base + j] - dot);
                }
            }
            sink(a, da);
        }
        Op::CrossEntropy { logits, target } => {
            // d/dz = (softmax(z) - t) / rows, scaled by upstream g
            let z = logits.0.borrow().data.clone();
            let t = target.0.borrow().data.clone();
            let (rows, cols) = {
                let s = logits.shape();
                if s.len() == 1 {
                    (1, s[0])
                } else {
                    (s[0], s[1])
                }
            };
            let scale = g[0] / rows as f64;
            let mut dz = vec![0.0; z.len()];
            for r in 0..rows {
                let row = &z[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..cols {
                    dz[r * cols + j] = scale * (exps[j] / denom - t[r * cols + j]);
                }
            }
            sink(logits, dz);
        }
        Op::SliceCols { input, start, len } => {
            let (rows, cols) = (input.shape()[0], input.shape()[1]);
            let mut di = vec![0.0; rows * cols];
            for r in 0..rows {
                for j in 0..*len {
                    di[r * cols + start + j] = g[r * len + j];
                }
            }
            sink(input, di);
        }
    }
}

/// Sums a gradient down to a scalar when the operand was a broadcast scalar.
fn reduce_to(operand: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if operand.len() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

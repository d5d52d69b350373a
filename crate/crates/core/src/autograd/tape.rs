//! Define-by-run reverse-mode tape over row-major matrices.
//!
//! Every value is a `rows × cols` matrix; vectors are single rows. The tape
//! reads parameters from a borrowed [`ParamStore`] and accumulates their
//! gradients into its own [`Grads`], so the store stays immutable for the
//! lifetime of a step and can be shared by concurrent inference tapes.

use super::params::{Grads, ParamId, ParamStore};
use super::real::{lit, Real};
use super::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Input of the truncated exponential is clamped to `[-TRUNC_EXP_BOUND, TRUNC_EXP_BOUND]`.
pub const TRUNC_EXP_BOUND: f64 = 15.0;

/// Sentinel for [`Tape::gather`]: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Counters for instrumented kernels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Grid-corner feature reads, summed over samples and levels.
    pub corner_fetches: u64,
    /// Sample-level products (samples × levels) the fetches were spread over.
    pub encoded_sample_levels: u64,
    /// Radiance-field or torso-field point evaluations.
    pub field_queries: u64,
}

/// Backward context handed to custom kernels.
pub struct BackwardCtx<'a, T: Real> {
    pub inputs: Vec<&'a [T]>,
    /// One slot per input; `None` when that input does not need a gradient.
    pub input_grads: Vec<Option<&'a mut [T]>>,
    pub params: &'a ParamStore<T>,
    pub param_grads: &'a mut Grads<T>,
}

/// A fused operation with a hand-written backward pass (grid lookup, volume
/// rendering). The forward value is computed by the caller and handed to
/// [`Tape::custom`].
pub trait CustomOp<T: Real>: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &mut BackwardCtx<'_, T>, out_grad: &[T]);
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    TruncExp,
    Abs,
    Square,
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<u32>),
    SoftmaxRows(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    record: bool,
    param_vars: Vec<Option<Var>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    param_grads: Grads<T>,
    stats: TapeStats,
}

impl<'p, T: Real> Tape<'p, T> {
    /// A recording tape: ops remember their inputs for [`Tape::backward`].
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, true)
    }

    /// Forward-only evaluation; nothing is kept for a backward pass.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamStore<T>, record: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            record,
            param_vars: vec![None; params.len()],
            leaf_grads: Vec::new(),
            param_grads: Grads::new(),
            stats: TapeStats::default(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn stats_mut(&mut self) -> &mut TapeStats {
        &mut self.stats
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf created with [`Tape::input`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> &Grads<T> {
        &self.param_grads
    }

    pub fn into_grads(self) -> Grads<T> {
        self.param_grads
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let needs_grad = needs_grad && self.record;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(sa)
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(TensorError::BadLength { expected: rows * cols, got: value.len() });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// A differentiable leaf whose gradient is readable via [`Tape::grad`].
    pub fn input(&mut self, value: Vec<T>, rows: usize, cols: usize) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(TensorError::BadLength { expected: rows * cols, got: value.len() });
        }
        Ok(self.push(rows, cols, value, Op::Leaf, true))
    }

    /// The parameter as a node. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.push(p.rows, p.cols, p.data.clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", left: (m, k), right: (k2, n) });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    /// `x·w + bias` with `bias` a `1×n` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(x), self.shape(w));
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "linear", left: (m, k), right: (k2, n) });
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = bias {
            if self.shape(b) != (1, n) {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    left: (1, n),
                    right: self.shape(b),
                });
            }
            let bv = self.value(b);
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(m, k, n, self.value(x), false, self.value(w), false, beta, &mut out);
        let ng = self.ng(x) || self.ng(w) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(m, n, out, Op::Linear(x, w, bias), ng))
    }

    // ---- elementwise binary -------------------------------------------

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    /// `a + row`, broadcasting a `1×cols` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(TensorError::ShapeMismatch { op: "add_row", left: (r, c), right: self.shape(row) });
        }
        let rv = self.value(row);
        let out: Vec<T> = self
            .value(a)
            .chunks_exact(c.max(1))
            .flat_map(|x| x.iter().zip(rv).map(|(&p, &q)| p + q))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("div", a, b)?;
        let out = self.zip(a, b, |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Div(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::AddScalar(a), ng)
    }

    // ---- elementwise unary --------------------------------------------

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let (r, c) = self.shape(a);
        let bound: T = lit(TRUNC_EXP_BOUND);
        let out = self
            .value(a)
            .iter()
            .map(|&x| match u {
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Sigmoid => sigmoid(x),
                Unary::Relu => x.max(T::zero()),
                Unary::LeakyRelu(s) => {
                    if x > T::zero() {
                        x
                    } else {
                        x * lit(s)
                    }
                }
                Unary::TruncExp => x.max(-bound).min(bound).exp(),
                Unary::Abs => x.abs(),
                Unary::Square => x * x,
            })
            .collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Unary(a, u), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }
    /// `exp(clamp(x, -15, 15))`; the gradient is zero where the clamp is active.
    pub fn trunc_exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::TruncExp)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Gradient passes where `lo <= x <= hi` and is zero elsewhere.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.max(lo).min(hi)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, Op::Clamp(a, lo, hi), ng)
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: T = v.iter().copied().sum::<T>() / lit(v.len().max(1) as f64);
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Mean(a), ng)
    }

    /// Column sums: `rows×cols → 1×cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks_exact(c.max(1)) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(1, c, out, Op::SumRows(a), ng)
    }

    /// Row sums: `rows×cols → rows×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = if c == 0 {
            vec![T::zero(); r]
        } else {
            self.value(a).chunks_exact(c).map(|row| row.iter().copied().sum()).collect()
        };
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumCols(a), ng)
    }

    // ---- layout -------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]),
                    right: self.shape(p),
                });
            }
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(TensorError::ShapeMismatch { op: "slice_cols", left: (r, c), right: (r, start + len) });
        }
        let out = self.value(a).chunks_exact(c.max(1)).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(TensorError::ShapeMismatch { op: "slice_rows", left: (r, c), right: (start + len, c) });
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(len, c, out, Op::SliceRows(a, start), ng))
    }

    /// `out.flat[i] = a.flat[index[i]]`, or zero for [`GATHER_ZERO`].
    /// Covers reshapes, row broadcasts, embedding lookups and im2col.
    pub fn gather(&mut self, a: Var, index: Vec<u32>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return Err(TensorError::BadLength { expected: rows * cols, got: index.len() });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len());
        for &i in &index {
            if i == GATHER_ZERO {
                out.push(T::zero());
            } else {
                let i = i as usize;
                if i >= src.len() {
                    return Err(TensorError::IndexOutOfRange { index: i, len: src.len() });
                }
                out.push(src[i]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(rows, cols, out, Op::Gather(a, index), ng))
    }

    /// Repeats a `1×c` row `rows` times.
    pub fn repeat_row(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(TensorError::ShapeMismatch { op: "repeat_row", left: (r, c), right: (1, c) });
        }
        let index = (0..rows).flat_map(|_| 0..c as u32).collect();
        self.gather(a, index, rows, c)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: (r, c), right: (rows, cols) });
        }
        self.gather(a, (0..(r * c) as u32).collect(), rows, cols)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x = *x / s;
            }
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::SoftmaxRows(a), ng)
    }

    /// Records a kernel whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Vec<T>,
        rows: usize,
        cols: usize,
        op: Box<dyn CustomOp<T>>,
        uses_params: bool,
    ) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(TensorError::BadLength { expected: rows * cols, got: value.len() });
        }
        let ng = uses_params || inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(rows, cols, value, Op::Custom(inputs, op), ng))
    }

    // ---- backward -----------------------------------------------------

    /// Accumulates `∂loss/∂·` into every reachable parameter and input leaf.
    /// Calling it again adds to the previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { rows: r, cols: c });
        }
        if !self.record {
            return Err(TensorError::NotRecording);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[id];
        // Zero-initialised gradient buffer for input `v`, or None if unneeded.
        macro_rules! gbuf {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {
                let dst = self.leaf_grads[id].get_or_insert_with(|| vec![T::zero(); g.len()]);
                axpy(dst, g, T::one());
            }
            Op::Param(pid) => {
                let dst = self.param_grads.slot(*pid, g.len());
                axpy(dst, g, T::one());
            }
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                let (a, b) = (*a, *b);
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                if let Some(da) = gbuf!(a) {
                    T::gemm(m, n, k, g, false, &nodes[b.0].value, true, T::one(), da);
                }
                if let Some(db) = gbuf!(b) {
                    T::gemm(k, m, n, &nodes[a.0].value, true, g, false, T::one(), db);
                }
                if let Op::Linear(_, _, Some(bias)) = &node.op {
                    if let Some(dbias) = gbuf!(*bias) {
                        for row in g.chunks_exact(n.max(1)) {
                            axpy(dbias, row, T::one());
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = gbuf!(*a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = gbuf!(*b) {
                    axpy(db, g, T::one());
                }
            }
            Op::AddRow(a, row) => {
                if let Some(da) = gbuf!(*a) {
                    axpy(da, g, T::one());
                }
                let c = node.cols.max(1);
                if let Some(dr) = gbuf!(*row) {
                    for gr in g.chunks_exact(c) {
                        axpy(dr, gr, T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = gbuf!(*a) {
                    axpy(da, g, T::one());
                }
                if let Some(db) = gbuf!(*b) {
                    axpy(db, g, -T::one());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = gbuf!(a) {
                    for ((d, &gi), &bv) in da.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d += gi * bv;
                    }
                }
                if let Some(db) = gbuf!(b) {
                    for ((d, &gi), &av) in db.iter_mut().zip(g).zip(&nodes[a.0].value) {
                        *d += gi * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(da) = gbuf!(a) {
                    for ((d, &gi), &bv) in da.iter_mut().zip(g).zip(&nodes[b.0].value) {
                        *d += gi / bv;
                    }
                }
                if let Some(db) = gbuf!(b) {
                    let out = &node.value;
                    for (((d, &gi), &bv), &o) in db.iter_mut().zip(g).zip(&nodes[b.0].value).zip(out) {
                        *d -= gi * o / bv;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(da) = gbuf!(*a) {
                    axpy(da, g, *s);
                }
            }
            Op::AddScalar(a) => {
                if let Some(da) = gbuf!(*a) {
                    axpy(da, g, T::one());
                }
            }
            Op::Unary(a, u) => {
                let a = *a;
                let x = &nodes[a.0].value;
                let y = &node.value;
                let bound: T = lit(TRUNC_EXP_BOUND);
                if let Some(da) = gbuf!(a) {
                    for i in 0..g.len() {
                        let d = match u {
                            Unary::Exp => y[i],
                            Unary::Log => T::one() / x[i],
                            Unary::Sigmoid => y[i] * (T::one() - y[i]),
                            Unary::Relu => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if x[i] > T::zero() {
                                    T::one()
                                } else {
                                    lit(*s)
                                }
                            }
                            Unary::TruncExp => {
                                if x[i] < -bound || x[i] > bound {
                                    T::zero()
                                } else {
                                    y[i]
                                }
                            }
                            Unary::Abs => x[i].signum() * if x[i] == T::zero() { T::zero() } else { T::one() },
                            Unary::Square => lit::<T>(2.0) * x[i],
                        };
                        da[i] += g[i] * d;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let x = &nodes[a.0].value;
                if let Some(da) = gbuf!(*a) {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(da) = gbuf!(*a) {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1);
                if let Some(da) = gbuf!(*a) {
                    let s = g[0] / lit(n as f64);
                    for d in da.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SumRows(a) => {
                let c = node.cols.max(1);
                if let Some(da) = gbuf!(*a) {
                    for row in da.chunks_exact_mut(c) {
                        axpy(row, g, T::one());
                    }
                }
            }
            Op::SumCols(a) => {
                let c = nodes[a.0].cols.max(1);
                if let Some(da) = gbuf!(*a) {
                    for (row, &gi) in da.chunks_exact_mut(c).zip(g) {
                        for d in row.iter_mut() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].cols;
                    if let Some(dp) = gbuf!(p) {
                        for (r, row) in dp.chunks_exact_mut(c.max(1)).enumerate() {
                            axpy(row, &g[r * total + offset..r * total + offset + c], T::one());
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(dp) = gbuf!(p) {
                        axpy(dp, &g[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let c = nodes[a.0].cols;
                let len = node.cols;
                if let Some(da) = gbuf!(*a) {
                    for (row, gr) in da.chunks_exact_mut(c.max(1)).zip(g.chunks_exact(len.max(1))) {
                        axpy(&mut row[*start..*start + len], gr, T::one());
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = node.cols;
                if let Some(da) = gbuf!(*a) {
                    axpy(&mut da[start * c..start * c + g.len()], g, T::one());
                }
            }
            Op::Gather(a, index) => {
                if let Some(da) = gbuf!(*a) {
                    for (&i, &gi) in index.iter().zip(g) {
                        if i != GATHER_ZERO {
                            da[i as usize] += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols.max(1);
                let y = &node.value;
                if let Some(da) = gbuf!(*a) {
                    for ((dr, yr), gr) in da.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Custom(inputs, op) => {
                // Detach the needed input buffers so the kernel can write all
                // of them while reading node values.
                let mut taken: Vec<Option<Vec<T>>> = inputs
                    .iter()
                    .map(|&v| {
                        if nodes[v.0].needs_grad {
                            let len = nodes[v.0].value.len();
                            Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]))
                        } else {
                            None
                        }
                    })
                    .collect();
                {
                    let mut ctx = BackwardCtx {
                        inputs: inputs.iter().map(|&v| nodes[v.0].value.as_slice()).collect(),
                        input_grads: taken.iter_mut().map(|t| t.as_deref_mut()).collect(),
                        params: self.params,
                        param_grads: &mut self.param_grads,
                    };
                    op.backward(&mut ctx, g);
                }
                for (&v, t) in inputs.iter().zip(taken) {
                    if let Some(buf) = t {
                        match &mut grads[v.0] {
                            Some(existing) => axpy(existing, &buf, T::one()),
                            slot @ None => *slot = Some(buf),
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn axpy<T: Real>(dst: &mut [T], src: &[T], s: T) {
    for (d, &x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

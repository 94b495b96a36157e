//! Define-by-run reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations on [`Var`] handles
//! append nodes to the tape; [`Tape::backward`] replays their adjoint rules in
//! reverse order. The last axis of every array is the feature axis and all
//! leading axes are treated as a flattened batch ("rows").

use std::cell::{Cell, RefCell};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op} at node {node}: argument {value}")]
    Domain {
        op: &'static str,
        node: usize,
        value: f64,
    },
    #[error("non-finite value in {phase} pass at node {node} ({op})")]
    NonFinite {
        op: &'static str,
        node: usize,
        phase: &'static str,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("backward already ran on this tape; zero gradients and record a new tape")]
    BackwardTwice,
    #[error("operands recorded on different tapes")]
    ForeignTape,
    #[error("invalid slice [{start}, {end}) of last axis with length {len}")]
    BadSlice { start: usize, end: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// A detached, value-only array. Cheap to clone (data is shared).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    /// Builds a `[rows, cols]` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared with a live tape.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn cols(&self) -> usize {
        last_dim(&self.shape)
    }

    pub fn rows(&self) -> usize {
        rows_of(&self.shape)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows_of(shape: &[usize]) -> usize {
    let c = last_dim(shape);
    if c == 0 {
        0
    } else {
        shape.iter().product::<usize>() / c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a single row repeated over every row of the left.
    Rows,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize, bc: Broadcast },
    Mul { a: usize, b: usize, bc: Broadcast },
    Div { a: usize, b: usize, bc: Broadcast },
    Scale { a: usize, c: f64 },
    Shift { a: usize },
    Concat { parts: Vec<(usize, usize)> },
    Slice { a: usize, start: usize, end: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Softplus { a: usize },
    Square { a: usize },
    Sqrt { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    SumLast { a: usize },
    SumRows { a: usize },
    LogSumExpLast { a: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Div { .. } => "div",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Softplus { .. } => "softplus",
            Op::Square { .. } => "square",
            Op::Sqrt { .. } => "sqrt",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumLast { .. } => "sum_last",
            Op::SumRows { .. } => "sum_rows",
            Op::LogSumExpLast { .. } => "logsumexp",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` requires grad.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant (no gradient is tracked).
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_node(t.clone(), Op::Leaf, false)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_node(t.clone(), Op::Leaf, true)
    }

    fn push_node(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self, id }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var<'_>> {
        let id = self.len();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                node: id,
                phase: "forward",
            });
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents(&op).iter().any(|&p| nodes[p].needs_grad)
        };
        let value = Tensor {
            shape,
            data: Arc::new(data),
        };
        Ok(self.push_node(value, op, needs_grad))
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    /// Runs the adjoint pass from a scalar output.
    ///
    /// A tape supports a single backward pass; a second call is an error so
    /// that gradients cannot be accumulated twice from the same graph.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(self, output.tape) {
            return Err(AutodiffError::ForeignTape);
        }
        if self.consumed.get() {
            return Err(AutodiffError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(AutodiffError::NonScalar(out.value.shape.clone()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    op: node.op.name(),
                    node: id,
                    phase: "backward",
                });
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. }
        | Op::Add { a, b, .. }
        | Op::Sub { a, b, .. }
        | Op::Mul { a, b, .. }
        | Op::Div { a, b, .. } => vec![*a, *b],
        Op::Concat { parts } => parts.iter().map(|p| p.0).collect(),
        Op::Scale { a, .. }
        | Op::Shift { a }
        | Op::Slice { a, .. }
        | Op::Sigmoid { a }
        | Op::Tanh { a }
        | Op::Relu { a }
        | Op::Exp { a }
        | Op::Log { a }
        | Op::Softplus { a }
        | Op::Square { a }
        | Op::Sqrt { a }
        | Op::Sum { a }
        | Op::Mean { a }
        | Op::SumLast { a }
        | Op::SumRows { a }
        | Op::LogSumExpLast { a } => vec![*a],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

/// Sums `g` (shape of the left operand) down to a single row of width `cols`.
fn reduce_rows(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (n, k) = (av.shape[0], av.shape[1]);
            let m = node.value.shape[1];
            if nodes[a].needs_grad {
                // dA = G · op(B)^T
                let mut da = vec![0.0; n * k];
                if trans_b {
                    // op(B) = B^T, B is [m, k]: dA = G · B
                    gemm(n, m, k, g, m as isize, 1, bv.data(), k as isize, 1, &mut da, k);
                } else {
                    // B is [k, m]: dA = G · B^T
                    gemm(n, m, k, g, m as isize, 1, bv.data(), 1, m as isize, &mut da, k);
                }
                accumulate(grads, nodes, a, |s| add_into(s, &da));
            }
            if nodes[b].needs_grad {
                if trans_b {
                    // B is [m, k]: dB = G^T · A
                    let mut db = vec![0.0; m * k];
                    gemm(m, n, k, g, 1, m as isize, av.data(), k as isize, 1, &mut db, k);
                    accumulate(grads, nodes, b, |s| add_into(s, &db));
                } else {
                    // B is [k, m]: dB = A^T · G
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, av.data(), 1, k as isize, g, m as isize, 1, &mut db, m);
                    accumulate(grads, nodes, b, |s| add_into(s, &db));
                }
            }
        }
        Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            accumulate(grads, nodes, a, |s| add_into(s, g));
            if nodes[b].needs_grad {
                let gb = match bc {
                    Broadcast::Same => g.to_vec(),
                    Broadcast::Rows => reduce_rows(g, node.value.cols()),
                };
                accumulate(grads, nodes, b, |s| {
                    for (d, x) in s.iter_mut().zip(&gb) {
                        *d += sign * x;
                    }
                });
            }
        }
        Op::Mul { a, b, bc } => {
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            let cols = node.value.cols();
            if nodes[a].needs_grad {
                accumulate(grads, nodes, a, |s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        *d += g[i] * bv[bidx(bc, i, cols)];
                    }
                });
            }
            if nodes[b].needs_grad {
                let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                let gb = match bc {
                    Broadcast::Same => prod,
                    Broadcast::Rows => reduce_rows(&prod, cols),
                };
                accumulate(grads, nodes, b, |s| add_into(s, &gb));
            }
        }
        Op::Div { a, b, bc } => {
            let bv = nodes[b].value.data();
            let cols = node.value.cols();
            if nodes[a].needs_grad {
                accumulate(grads, nodes, a, |s| {
                    for (i, d) in s.iter_mut().enumerate() {
                        *d += g[i] / bv[bidx(bc, i, cols)];
                    }
                });
            }
            if nodes[b].needs_grad {
                // d(a/b)/db = -(a/b)/b
                let prod: Vec<f64> = (0..g.len())
                    .map(|i| -g[i] * out[i] / bv[bidx(bc, i, cols)])
                    .collect();
                let gb = match bc {
                    Broadcast::Same => prod,
                    Broadcast::Rows => reduce_rows(&prod, cols),
                };
                accumulate(grads, nodes, b, |s| add_into(s, &gb));
            }
        }
        Op::Scale { a, c } => accumulate(grads, nodes, a, |s| {
            for (d, x) in s.iter_mut().zip(g) {
                *d += c * x;
            }
        }),
        Op::Shift { a } => accumulate(grads, nodes, a, |s| add_into(s, g)),
        Op::Concat { ref parts } => {
            let cols = node.value.cols();
            let mut offset = 0;
            for &(p, w) in parts {
                accumulate(grads, nodes, p, |s| {
                    for (dst, src) in s.chunks_exact_mut(w).zip(g.chunks_exact(cols)) {
                        add_into(dst, &src[offset..offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::Slice { a, start, end } => {
            let cols = nodes[a].value.cols();
            let w = end - start;
            accumulate(grads, nodes, a, |s| {
                for (dst, src) in s.chunks_exact_mut(cols).zip(g.chunks_exact(w)) {
                    add_into(&mut dst[start..end], src);
                }
            });
        }
        Op::Sigmoid { a } => elementwise(grads, nodes, a, g, |i, _| out[i] * (1.0 - out[i])),
        Op::Tanh { a } => elementwise(grads, nodes, a, g, |i, _| 1.0 - out[i] * out[i]),
        Op::Relu { a } => elementwise(grads, nodes, a, g, |_, x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Exp { a } => elementwise(grads, nodes, a, g, |i, _| out[i]),
        Op::Log { a } => elementwise(grads, nodes, a, g, |_, x| 1.0 / x),
        Op::Softplus { a } => elementwise(grads, nodes, a, g, |_, x| sigmoid(x)),
        Op::Square { a } => elementwise(grads, nodes, a, g, |_, x| 2.0 * x),
        Op::Sqrt { a } => elementwise(grads, nodes, a, g, |i, _| 0.5 / out[i]),
        Op::Sum { a } => accumulate(grads, nodes, a, |s| s.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean { a } => {
            let n = nodes[a].value.len() as f64;
            accumulate(grads, nodes, a, |s| s.iter_mut().for_each(|d| *d += g[0] / n))
        }
        Op::SumLast { a } => {
            let cols = nodes[a].value.cols();
            accumulate(grads, nodes, a, |s| {
                for (row, gr) in s.chunks_exact_mut(cols).zip(g) {
                    row.iter_mut().for_each(|d| *d += gr);
                }
            })
        }
        Op::SumRows { a } => {
            let cols = nodes[a].value.cols();
            accumulate(grads, nodes, a, |s| {
                for row in s.chunks_exact_mut(cols) {
                    add_into(row, g);
                }
            })
        }
        Op::LogSumExpLast { a } => {
            let av = nodes[a].value.data();
            let cols = nodes[a].value.cols();
            accumulate(grads, nodes, a, |s| {
                for (r, row) in s.chunks_exact_mut(cols).enumerate() {
                    let x = &av[r * cols..(r + 1) * cols];
                    for (d, xi) in row.iter_mut().zip(x) {
                        *d += g[r] * (xi - out[r]).exp();
                    }
                }
            })
        }
    }
}

fn bidx(bc: Broadcast, i: usize, cols: usize) -> usize {
    match bc {
        Broadcast::Same => i,
        Broadcast::Rows => i % cols,
    }
}

fn elementwise(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: usize,
    g: &[f64],
    deriv: impl Fn(usize, f64) -> f64,
) {
    let x = nodes[a].value.data();
    accumulate(grads, nodes, a, |s| {
        for (i, d) in s.iter_mut().enumerate() {
            *d += g[i] * deriv(i, x[i]);
        }
    });
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `C += A · B` with arbitrary strides; `A` is m×k, `B` is k×n, `C` is m×n row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose lengths match the given dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data[0]
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignTape)
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value();
        let data = v.data.iter().map(|&x| f(x)).collect();
        self.tape.push(v.shape.clone(), data, op)
    }

    fn broadcast_kind(&self, other: &Var<'t>, op: &'static str) -> Result<(Tensor, Tensor, Broadcast)> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        if a.shape == b.shape {
            return Ok((a, b, Broadcast::Same));
        }
        let row_like = b.shape.len() <= 2 && b.rows() == 1 && b.cols() == a.cols() && !a.shape.is_empty();
        if row_like {
            Ok((a, b, Broadcast::Rows))
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            })
        }
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Result<Var<'t>> {
        let (a, b, bc) = self.broadcast_kind(other, name)?;
        let cols = a.cols();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[bidx(bc, i, cols)]))
            .collect();
        self.tape.push(a.shape.clone(), data, mk(self.id, other.id, bc))
    }

    /// `self · other` for 2-D operands.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ` for 2-D operands, without materializing the transpose.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let a = self.value();
        let b = other.value();
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        };
        if a.shape.len() != 2 || b.shape.len() != 2 {
            return Err(mismatch());
        }
        let (n, k) = (a.shape[0], a.shape[1]);
        let (kb, m, rsb, csb) = if trans_b {
            (b.shape[1], b.shape[0], 1, b.shape[1] as isize)
        } else {
            (b.shape[0], b.shape[1], b.shape[1] as isize, 1)
        };
        if k != kb {
            return Err(mismatch());
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, &a.data, k as isize, 1, &b.data, rsb, csb, &mut out, m);
        self.tape.push(
            vec![n, m],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
        )
    }

    /// Elementwise sum; `other` may also be a single row broadcast over all rows.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, |a, b, bc| Op::Div { a, b, bc })
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale { a: self.id, c }, |x| c * x)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Shift { a: self.id }, |x| x + c)
    }

    /// Concatenates along the last axis; all parts must share leading dims.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(AutodiffError::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let values: Vec<Tensor> = parts
            .iter()
            .map(|p| first.same_tape(p).map(|_| p.value()))
            .collect::<Result<_>>()?;
        let lead = &values[0].shape[..values[0].shape.len().saturating_sub(1)];
        for v in &values[1..] {
            if &v.shape[..v.shape.len().saturating_sub(1)] != lead {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: values[0].shape.clone(),
                    rhs: v.shape.clone(),
                });
            }
        }
        let rows = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let op = Op::Concat {
            parts: parts.iter().zip(widths).map(|(p, w)| (p.id, w)).collect(),
        };
        first.tape.push(shape, data, op)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        let cols = v.cols();
        if start > end || end > cols {
            return Err(AutodiffError::BadSlice { start, end, len: cols });
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let mut shape = v.shape.clone();
        *shape.last_mut().unwrap() = end - start;
        self.tape.push(shape, data, Op::Slice { a: self.id, start, end })
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid { a: self.id }, sigmoid)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary(Op::Tanh { a: self.id }, f64::tanh)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu { a: self.id }, |x| x.max(0.0))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp { a: self.id }, f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.check_domain("log")?;
        self.unary(Op::Log { a: self.id }, f64::ln)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(Op::Softplus { a: self.id }, softplus)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary(Op::Square { a: self.id }, |x| x * x)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.check_domain("sqrt")?;
        self.unary(Op::Sqrt { a: self.id }, f64::sqrt)
    }

    fn check_domain(&self, op: &'static str) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        if let Some(&bad) = nodes[self.id].value.data.iter().find(|&&x| x < 0.0) {
            return Err(AutodiffError::Domain {
                op,
                node: nodes.len(),
                value: bad,
            });
        }
        Ok(())
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data.iter().sum();
        self.tape.push(vec![], vec![s], Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        self.tape.push(vec![], vec![s], Op::Mean { a: self.id })
    }

    /// Sum over the last axis, keeping it with length 1.
    pub fn sum_last(&self) -> Result<Var<'t>> {
        let v = self.value();
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        self.tape.push(keep_last(&v.shape), data, Op::SumLast { a: self.id })
    }

    /// Sum over all leading axes, giving a `[1, cols]` row.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let v = self.value();
        let cols = v.cols();
        let data = reduce_rows(&v.data, cols);
        self.tape.push(vec![1, cols], data, Op::SumRows { a: self.id })
    }

    /// Numerically stable `log Σ exp` over the last axis, keeping it with length 1.
    pub fn logsumexp_last(&self) -> Result<Var<'t>> {
        let v = self.value();
        let data = (0..v.rows()).map(|r| logsumexp(v.row(r))).collect();
        self.tape.push(keep_last(&v.shape), data, Op::LogSumExpLast { a: self.id })
    }
}

fn keep_last(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = 1,
        None => s.push(1),
    }
    s
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)` over every
/// coordinate of every input.
pub fn finite_difference_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&tape, &leaves)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| {
            grads
                .wrt(*l)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; l.value().len()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data[i];
            xs[k].data_mut()[i] = orig + step;
            let plus = eval(&xs)?;
            xs[k].data_mut()[i] = orig - step;
            let minus = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[k][i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

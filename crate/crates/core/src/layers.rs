//! Parameterized layers and the parameter store they register into.
//!
//! Layers hold [`ParamId`]s only; values live in a [`ParamSet`]. Each forward
//! pass binds the set onto a fresh tape through a [`Ctx`].

use std::cell::RefCell;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, Tape, Tensor, Var};

pub type ParamId = usize;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LayerError>;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Buffers (batch-norm running statistics) are saved but not optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name,
            value,
            grad,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Records every parameter on `tape`; trainable ones as gradient leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(&p.value)
                } else {
                    tape.constant(&p.value)
                }
            })
            .collect()
    }

    /// Adds the gradients of a backward pass into each parameter's `grad`.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var<'_>]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.wrt(*v) {
                for (dst, src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    /// Global L2 norm of all trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Applies exponential-moving-average updates collected during a train-mode pass.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let m = u.momentum;
            let mean = self.params[u.mean].value.data_mut();
            for (r, b) in mean.iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            let var = self.params[u.var].value.data_mut();
            for (r, b) in var.iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Writes the text checkpoint format:
    ///
    /// ```text
    /// deepssm-params 1
    /// count <n>
    /// param <name> <trainable 0|1> <ndim> <d0> ... <dk>
    /// <row-major values separated by single spaces>
    /// ```
    ///
    /// Values are printed with Rust's shortest round-trip formatting, so a
    /// save/load cycle is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "deepssm-params 1")?;
        writeln!(out, "count {}", self.params.len())?;
        for p in &self.params {
            let mut header = format!(
                "param {} {} {}",
                p.name,
                u8::from(p.trainable),
                p.value.shape().len()
            );
            for d in p.value.shape() {
                write!(header, " {d}").unwrap();
            }
            writeln!(out, "{header}")?;
            let values: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", values.join(" "))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let bad = |msg: String| LayerError::Checkpoint(msg);
        let mut lines = input.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| bad("unexpected end of file".into()))
        };
        let magic = next()?;
        if magic.trim() != "deepssm-params 1" {
            return Err(bad(format!("bad header {magic:?}")));
        }
        let count_line = next()?;
        let count: usize = count_line
            .strip_prefix("count ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(format!("bad count line {count_line:?}")))?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let header = next()?;
            let fields: Vec<&str> = header.split_whitespace().collect();
            if fields.len() < 4 || fields[0] != "param" {
                return Err(bad(format!("bad param header {header:?}")));
            }
            let name = fields[1].to_string();
            let trainable = fields[2] == "1";
            let ndim: usize = fields[3].parse().map_err(|_| bad(format!("bad ndim in {header:?}")))?;
            if fields.len() != 4 + ndim {
                return Err(bad(format!("bad shape in {header:?}")));
            }
            let shape: Vec<usize> = fields[4..]
                .iter()
                .map(|d| d.parse().map_err(|_| bad(format!("bad dim in {header:?}"))))
                .collect::<Result<_>>()?;
            let values_line = next()?;
            let values: Vec<f64> = values_line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad value {v:?} for {name}"))))
                .collect::<Result<_>>()?;
            let value = Tensor::new(&shape, values).map_err(|e| bad(format!("{name}: {e}")))?;
            set.push(name, value, trainable);
        }
        Ok(set)
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(LayerError::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(LayerError::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Running-statistics update observed during a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    momentum: f64,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// One forward pass: the tape, the bound parameters, and the mode.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    train: bool,
    bn_updates: RefCell<Vec<BnUpdate>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, params: &ParamSet, train: bool) -> Self {
        Self::from_vars(tape, params.bind(tape), train)
    }

    /// Uses caller-provided variables in place of the parameters (gradient checks).
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>, train: bool) -> Self {
        Ctx {
            tape,
            vars,
            train,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn take_bn_updates(&self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` draws.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(set: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = Tensor::new(&[out_dim, in_dim], uniform_init(rng, in_dim, out_dim * in_dim)).unwrap();
        let w = set.add(format!("{name}.w"), w);
        let b = set.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul_t(&ctx.p(self.w))?.add(&ctx.p(self.b))?)
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        out_dim * in_dim + out_dim
    }
}

/// Affine layers with ReLU between them and no activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(set: &mut ParamSet, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(set, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ctx, &h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn num_params(dims: &[usize]) -> usize {
        dims.windows(2).map(|d| Linear::num_params(d[0], d[1])).sum()
    }
}

/// GRU cell with gates ordered (reset, update, candidate) in the stacked weights.
///
/// `r = σ(W_r x + U_r h + b_r)`, `z = σ(W_z x + U_z h + b_z)`,
/// `n = tanh(W_n x + r ⊙ (U_n h) + b_n)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    /// `[3h, in]`
    pub w_in: ParamId,
    /// `[3h, h]`
    pub w_hid: ParamId,
    /// `[3h]`
    pub b: ParamId,
    pub in_dim: usize,
    pub h_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(set: &mut ParamSet, name: &str, in_dim: usize, h_dim: usize, rng: &mut R) -> Self {
        let w_in = Tensor::new(&[3 * h_dim, in_dim], uniform_init(rng, in_dim, 3 * h_dim * in_dim)).unwrap();
        let w_hid = Tensor::new(&[3 * h_dim, h_dim], uniform_init(rng, h_dim, 3 * h_dim * h_dim)).unwrap();
        GruCell {
            w_in: set.add(format!("{name}.w_in"), w_in),
            w_hid: set.add(format!("{name}.w_hid"), w_hid),
            b: set.add(format!("{name}.b"), Tensor::zeros(&[3 * h_dim])),
            in_dim,
            h_dim,
        }
    }

    pub fn step<'t>(&self, ctx: &Ctx<'t>, h_prev: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.h_dim;
        let gx = x.matmul_t(&ctx.p(self.w_in))?.add(&ctx.p(self.b))?;
        let gh = h_prev.matmul_t(&ctx.p(self.w_hid))?;
        let r = gx.slice(0, h)?.add(&gh.slice(0, h)?)?.sigmoid()?;
        let z = gx.slice(h, 2 * h)?.add(&gh.slice(h, 2 * h)?)?.sigmoid()?;
        let n = gx.slice(2 * h, 3 * h)?.add(&r.mul(&gh.slice(2 * h, 3 * h)?)?)?.tanh()?;
        // (1 - z) n + z h = n + z (h - n)
        Ok(n.add(&z.mul(&h_prev.sub(&n)?)?)?)
    }

    pub fn num_params(in_dim: usize, h_dim: usize) -> usize {
        3 * h_dim * (in_dim + h_dim + 1)
    }
}

/// Stacked GRU cells; layer k's output is layer k+1's input at the same step.
#[derive(Clone, Debug)]
pub struct GruStack {
    pub cells: Vec<GruCell>,
}

impl GruStack {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        in_dim: usize,
        h_dim: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let cells = (0..n_layers)
            .map(|k| {
                let d = if k == 0 { in_dim } else { h_dim };
                GruCell::new(set, &format!("{name}.{k}"), d, h_dim, rng)
            })
            .collect();
        GruStack { cells }
    }

    /// Advances every layer; returns the new per-layer states (last = top output).
    pub fn step<'t>(&self, ctx: &Ctx<'t>, states: &[Var<'t>], x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut input = *x;
        let mut out = Vec::with_capacity(self.cells.len());
        for (cell, h) in self.cells.iter().zip(states) {
            input = cell.step(ctx, h, &input)?;
            out.push(input);
        }
        Ok(out)
    }

    pub fn num_params(in_dim: usize, h_dim: usize, n_layers: usize) -> usize {
        (0..n_layers)
            .map(|k| GruCell::num_params(if k == 0 { in_dim } else { h_dim }, h_dim))
            .sum()
    }
}

/// Per-feature batch normalization over the rows of a `[batch, features]` input.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: set.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: set.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: set.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: set.add_buffer(format!("{name}.running_var"), Tensor::full(&[dim], 1.0)),
            momentum: 0.1,
            eps: 1e-5,
            dim,
        }
    }

    /// Train mode normalizes with batch statistics and queues a running-stat
    /// update on `ctx`; eval mode uses the running statistics only.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let gamma = ctx.p(self.gamma);
        let beta = ctx.p(self.beta);
        let normalized = if ctx.is_train() {
            let rows = x.value().rows();
            if rows < 2 {
                return Err(LayerError::BatchTooSmall(rows));
            }
            let inv = 1.0 / rows as f64;
            let mean = x.sum_rows()?.scale(inv)?;
            let centered = x.sub(&mean)?;
            let var = centered.square()?.sum_rows()?.scale(inv)?;
            let unbiased = rows as f64 / (rows as f64 - 1.0);
            ctx.bn_updates.borrow_mut().push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                momentum: self.momentum,
                batch_mean: mean.value().data().to_vec(),
                batch_var: var.value().data().iter().map(|v| v * unbiased).collect(),
            });
            centered.div(&var.shift(self.eps)?.sqrt()?)?
        } else {
            let mean = ctx.p(self.running_mean);
            let std = ctx.p(self.running_var).shift(self.eps)?.sqrt()?;
            x.sub(&mean)?.div(&std)?
        };
        Ok(normalized.mul(&gamma)?.add(&beta)?)
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }
}

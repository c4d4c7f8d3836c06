//! Dense row-major tensors and a dynamic reverse-mode tape.
//!
//! Every value on the tape is a rank-2 block `[rows × cols]`; vectors are
//! carried as single rows. A tape is rebuilt for every forward pass and
//! dropped after its gradients have been read.

use crate::error::{Error, Result};

/// Dense double-precision array with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Contract(format!("invalid tensor shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dims("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            values: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading extent; rank-1 tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::dims("accumulate_grad", &self.shape, &[g.len()]));
        }
        let acc = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Stacks rows from several tensors with equal column extent.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let cols = parts.first().map(|t| t.cols()).unwrap_or(0);
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::dims("vstack", &[cols], p.shape()));
            }
            rows += p.rows();
            values.extend_from_slice(&p.values);
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            values,
            grad: None,
        })
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            values,
            grad: None,
        }
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input and the already computed output.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Act(Var, Activation),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogSumExpRows(Var),
    ConcatCols(Vec<Var>),
    GaussianLogDensity { x: Var, mean: Var, var: Var },
    LaplaceLogDensity(Var),
    Elementwise {
        x: Var,
        df: fn(f64) -> f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Inputs always precede outputs, so
/// the recorded graph is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies a tensor's value out of the tape.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            values: n.value.clone(),
            grad: None,
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>, rg: bool) -> Var {
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        op: Op,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        rg: bool,
    ) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(op, rows, cols, value, rg))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Records a tensor as a leaf. `track` marks it as a differentiation target.
    pub fn leaf(&mut self, t: &Tensor, track: bool) -> Var {
        self.push(Op::Leaf, t.rows(), t.cols(), t.values.clone(), track)
    }

    /// Untracked leaf from raw values.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(Error::dims("constant", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(Op::Leaf, rows, cols, values, false))
    }

    /// Tracked leaf from raw values.
    pub fn variable(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(Error::dims("variable", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(Op::Leaf, rows, cols, values, true))
    }

    /// Standard matrix product `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (k2, c) = self.dims(b);
        if k != k2 {
            return Err(Error::dims("matmul", &[r, k], &[k2, c]));
        }
        let mut out = vec![0.0; r * c];
        gemm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", Op::MatMul(a, b), r, c, out, rg)
    }

    /// Product with the second operand transposed, `a · bᵀ`, used for
    /// `[out × in]` weight matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims(a);
        let (c, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dims("matmul_t", &[r, k], &[c, k2]));
        }
        let bt = transpose(&self.nodes[b.0].value, c, k);
        let mut out = vec![0.0; r * c];
        gemm_nn(&self.nodes[a.0].value, &bt, &mut out, r, k, c);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul_t", Op::MatMulT(a, b), r, c, out, rg)
    }

    fn broadcast_ok(&self, a: Var, b: Var) -> bool {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        ca == cb && (ra == rb || rb == 1)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if !self.broadcast_ok(a, b) {
            let (ra, ca) = self.dims(a);
            let (rb, cb) = self.dims(b);
            return Err(Error::dims(name, &[ra, ca], &[rb, cb]));
        }
        let (_, c) = self.dims(a);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bcast = bv.len() != av.len();
        Ok(av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, if bcast { bv[i % c.max(1)] } else { bv[i] }))
            .collect())
    }

    /// `a + b`; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let (r, c) = self.dims(a);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("add", Op::Add(a, b), r, c, out, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let (r, c) = self.dims(a);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("sub", Op::Sub(a, b), r, c, out, rg)
    }

    /// Elementwise product, with the same row broadcast as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let (r, c) = self.dims(a);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("mul", Op::Mul(a, b), r, c, out, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a);
        self.push_checked("scale", Op::Scale(a, k), r, c, out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a);
        self.push_checked("exp", Op::Exp(a), r, c, out, rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(a);
        }
        let out = self.nodes[a.0].value.iter().map(|&x| kind.apply(x)).collect();
        let (r, c) = self.dims(a);
        let rg = self.rg(a);
        self.push_checked("activation", Op::Act(a, kind), r, c, out, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Softplus)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    /// Sum of all entries, as a `[1 × 1]` value.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", Op::Sum(a), 1, 1, vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push_checked("mean", Op::Mean(a), 1, 1, vec![s], rg)
    }

    /// Per-row sum, `[r × c] → [r × 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let v = &self.nodes[a.0].value;
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(a);
        self.push_checked("row_sum", Op::RowSum(a), r, 1, out, rg)
    }

    /// Per-row log-sum-exp with max stabilization, `[r × c] → [r × 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if c == 0 {
            return Err(Error::Contract("log-sum-exp over zero columns".into()));
        }
        let v = &self.nodes[a.0].value;
        let out = (0..r).map(|i| logsumexp(&v[i * c..(i + 1) * c])).collect();
        let rg = self.rg(a);
        self.push_checked("logsumexp_rows", Op::LogSumExpRows(a), r, 1, out, rg)
    }

    /// Horizontal concatenation of blocks with equal row counts. Zero-width
    /// blocks are allowed.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of no blocks".into()));
        };
        let (r, _) = self.dims(first);
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.dims(p);
            if rp != r {
                return Err(Error::dims("concat_cols", &[r], &[rp, cp]));
            }
            total += cp;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (_, cp) = self.dims(p);
                out.extend_from_slice(&self.nodes[p.0].value[i * cp..(i + 1) * cp]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push_checked("concat_cols", Op::ConcatCols(parts.to_vec()), r, total, out, rg)
    }

    /// Row-wise diagonal Gaussian log density,
    /// `Σ_k −½·log(2π·v_k) − ½·(x_k − μ_k)²/v_k`, giving `[r × 1]`.
    /// `mean` and `var` may be single rows broadcast over `x`.
    pub fn gaussian_log_density(&mut self, x: Var, mean: Var, var: Var) -> Result<Var> {
        if !self.broadcast_ok(x, mean) {
            let (a, b) = (self.dims(x), self.dims(mean));
            return Err(Error::dims("gaussian_log_density", &[a.0, a.1], &[b.0, b.1]));
        }
        if !self.broadcast_ok(x, var) {
            let (a, b) = (self.dims(x), self.dims(var));
            return Err(Error::dims("gaussian_log_density", &[a.0, a.1], &[b.0, b.1]));
        }
        if let Some(bad) = self.nodes[var.0].value.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "gaussian_log_density",
                detail: format!("variance must be positive, got {bad}"),
            });
        }
        let (r, c) = self.dims(x);
        let xv = &self.nodes[x.0].value;
        let mv = &self.nodes[mean.0].value;
        let vv = &self.nodes[var.0].value;
        let (mb, vb) = (mv.len() != xv.len(), vv.len() != xv.len());
        let mut out = vec![0.0; r];
        for i in 0..r {
            let mut acc = 0.0;
            for k in 0..c {
                let idx = i * c + k;
                let m = if mb { mv[k] } else { mv[idx] };
                let v = if vb { vv[k] } else { vv[idx] };
                let d = xv[idx] - m;
                acc += -0.5 * (LN_2PI + v.ln()) - 0.5 * d * d / v;
            }
            out[i] = acc;
        }
        let rg = self.rg(x) || self.rg(mean) || self.rg(var);
        self.push_checked(
            "gaussian_log_density",
            Op::GaussianLogDensity { x, mean, var },
            r,
            1,
            out,
            rg,
        )
    }

    /// Row-wise standard Laplace log density `Σ_k −|z_k| − log 2`.
    pub fn laplace_log_density(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.dims(z);
        let v = &self.nodes[z.0].value;
        let out = (0..r)
            .map(|i| {
                v[i * c..(i + 1) * c]
                    .iter()
                    .map(|x| -x.abs() - std::f64::consts::LN_2)
                    .sum()
            })
            .collect();
        let rg = self.rg(z);
        self.push_checked("laplace_log_density", Op::LaplaceLogDensity(z), r, 1, out, rg)
    }

    /// Elementwise map with a caller-supplied derivative. Intended for
    /// testing gradient checks against hand-written rules.
    pub fn elementwise(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        let out = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let (r, c) = self.dims(x);
        let rg = self.rg(x);
        self.push_checked("elementwise", Op::Elementwise { x, df }, r, c, out, rg)
    }

    /// Reverse sweep from a scalar output. Only nodes that depend on a
    /// tracked leaf receive gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.rows * out.cols != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got [{} x {}]",
                out.rows, out.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if out.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.dims(*a);
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose(&self.nodes[b.0].value, k, c);
                    let mut da = vec![0.0; r * k];
                    gemm_nn(g, &bt, &mut da, r, c, k);
                    acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * c];
                    gemm_tn(&self.nodes[a.0].value, g, &mut db, r, k, c);
                    acc(grads, *b, &db);
                }
            }
            Op::MatMulT(a, b) => {
                let (_, k) = self.dims(*a);
                if self.rg(*a) {
                    // dA = dC · B
                    let mut da = vec![0.0; r * k];
                    gemm_nn(g, &self.nodes[b.0].value, &mut da, r, c, k);
                    acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; c * k];
                    gemm_tn(g, &self.nodes[a.0].value, &mut db, r, c, k);
                    acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    acc(grads, *a, g);
                }
                if self.rg(*b) {
                    let db = self.reduce_broadcast(*b, c, g.iter().map(|v| sign * v));
                    acc(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let bcast = bv.len() != av.len();
                let bat = |i: usize| if bcast { bv[i % c] } else { bv[i] };
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().enumerate().map(|(i, gv)| gv * bat(i)).collect();
                    acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db = self.reduce_broadcast(*b, c, g.iter().zip(av).map(|(gv, x)| gv * x));
                    acc(grads, *b, &db);
                }
            }
            Op::Scale(a, k) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().map(|v| v * k).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(&node.value).map(|(gv, y)| gv * y).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Act(a, kind) => {
                if self.rg(*a) {
                    let xv = &self.nodes[a.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(xv.iter().zip(&node.value))
                        .map(|(gv, (&x, &y))| gv * kind.derivative(x, y))
                        .collect();
                    acc(grads, *a, &da);
                }
            }
            Op::Elementwise { x, df } => {
                if self.rg(*x) {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<f64> = g.iter().zip(xv).map(|(gv, &v)| gv * df(v)).collect();
                    acc(grads, *x, &dx);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let n = self.nodes[a.0].value.len();
                    acc(grads, *a, &vec![g[0]; n]);
                }
            }
            Op::Mean(a) => {
                if self.rg(*a) {
                    let n = self.nodes[a.0].value.len();
                    acc(grads, *a, &vec![g[0] / n as f64; n]);
                }
            }
            Op::RowSum(a) => {
                if self.rg(*a) {
                    let (ra, ca) = self.dims(*a);
                    let da: Vec<f64> = (0..ra * ca).map(|i| g[i / ca]).collect();
                    acc(grads, *a, &da);
                }
            }
            Op::LogSumExpRows(a) => {
                if self.rg(*a) {
                    let (ra, ca) = self.dims(*a);
                    let av = &self.nodes[a.0].value;
                    let mut da = vec![0.0; ra * ca];
                    for i in 0..ra {
                        let lse = node.value[i];
                        for k in 0..ca {
                            da[i * ca + k] = g[i] * (av[i * ca + k] - lse).exp();
                        }
                    }
                    acc(grads, *a, &da);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (_, cp) = self.dims(p);
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(r * cp);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * c + offset..i * c + offset + cp]);
                        }
                        acc(grads, p, &dp);
                    }
                    offset += cp;
                }
            }
            Op::GaussianLogDensity { x, mean, var } => {
                let (rx, cx) = self.dims(*x);
                let xv = &self.nodes[x.0].value;
                let mv = &self.nodes[mean.0].value;
                let vv = &self.nodes[var.0].value;
                let (mb, vb) = (mv.len() != xv.len(), vv.len() != xv.len());
                let mut dx = vec![0.0; rx * cx];
                let mut dv = vec![0.0; rx * cx];
                for i in 0..rx {
                    for k in 0..cx {
                        let idx = i * cx + k;
                        let m = if mb { mv[k] } else { mv[idx] };
                        let v = if vb { vv[k] } else { vv[idx] };
                        let d = xv[idx] - m;
                        dx[idx] = -g[i] * d / v;
                        dv[idx] = g[i] * (-0.5 / v + 0.5 * d * d / (v * v));
                    }
                }
                if self.rg(*mean) {
                    let dm = self.reduce_broadcast(*mean, cx, dx.iter().map(|v| -v));
                    acc(grads, *mean, &dm);
                }
                if self.rg(*var) {
                    let dvr = self.reduce_broadcast(*var, cx, dv.into_iter());
                    acc(grads, *var, &dvr);
                }
                if self.rg(*x) {
                    acc(grads, *x, &dx);
                }
            }
            Op::LaplaceLogDensity(z) => {
                if self.rg(*z) {
                    let (rz, cz) = self.dims(*z);
                    let zv = &self.nodes[z.0].value;
                    let dz: Vec<f64> = (0..rz * cz)
                        .map(|i| {
                            let s = if zv[i] > 0.0 {
                                -1.0
                            } else if zv[i] < 0.0 {
                                1.0
                            } else {
                                0.0
                            };
                            g[i / cz] * s
                        })
                        .collect();
                    acc(grads, *z, &dz);
                }
            }
        }
    }

    /// Folds a full-size gradient stream back onto `target`, summing over
    /// rows when `target` was broadcast.
    fn reduce_broadcast(&self, target: Var, cols: usize, g: impl Iterator<Item = f64>) -> Vec<f64> {
        let n = self.nodes[target.0].value.len();
        let mut out = vec![0.0; n];
        if n == cols {
            for (i, v) in g.enumerate() {
                out[i % cols.max(1)] += v;
            }
        } else {
            for (o, v) in out.iter_mut().zip(g) {
                *o = v;
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `c[r×n] += a[r×k] · b[k×n]`, accumulating row by row so each output row
/// depends only on the matching input row.
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, n: usize) {
    for i in 0..r {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[k×n] += a[r×k]ᵀ · b[r×n]`.
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, n: usize) {
    for i in 0..r {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Max-stabilized `log Σ exp(x)`. Terms are summed in ascending order, so
/// the result does not depend on the order of `xs`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut terms: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    terms.sort_unstable_by(f64::total_cmp);
    m + terms.iter().sum::<f64>().ln()
}

/// Maximum relative discrepancy between the tape gradient of a scalar
/// function and central finite differences at `point`. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (rows, cols) = (point.rows(), point.cols());
    let mut tape = Tape::new();
    let x = tape.variable(rows, cols, point.values().to_vec())?;
    let out = f(&mut tape, x)?;
    let analytic = tape.backward(out)?.get_or_zeros(x, point.len());

    let eval = |vals: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(rows, cols, vals)?;
        let y = f(&mut t, x)?;
        Ok(t.scalar(y))
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.values().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(t: &mut Tape, r: usize, c: usize, v: &[f64]) -> Var {
        t.variable(r, c, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 2, &[1., 2., 3., 4.]);
        let i = t.constant(2, 2, vec![1., 0., 0., 1.]).unwrap();
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.value(y), &[1., 2., 3., 4.]);
        let b = t.constant(2, 1, vec![5., 6.]).unwrap();
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 3, &[0.; 6]);
        let b = m(&mut t, 2, 2, &[0.; 4]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_bt() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 3, &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let bvals = [1.0, 2.0, -1.0, 0.5, 3.0, -2.0];
        let b = t.constant(3, 2, bvals.to_vec()).unwrap();
        let y = t.matmul(a, b).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        // (ones · Bᵀ)[i][p] = Σ_j B[p][j]
        let expected: Vec<f64> = (0..2)
            .flat_map(|_| (0..3).map(|p| bvals[p * 2] + bvals[p * 2 + 1]))
            .collect();
        assert_eq!(g.get(a).unwrap(), expected.as_slice());
    }

    #[test]
    fn activations_at_reference_points() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 1, &[0.0]);
        let y = t.tanh(x).unwrap();
        assert_eq!(t.value(y), &[0.0]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);

        let y = t.softplus(x).unwrap();
        assert!((t.value(y)[0] - 2f64.ln()).abs() < 1e-15);

        let x = m(&mut t, 1, 1, &[-3.0]);
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y), &[0.0]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0]);
    }

    #[test]
    fn gaussian_log_density_reference_values() {
        let mut t = Tape::new();
        let x = t.constant(1, 2, vec![0.3, -0.7]).unwrap();
        let v = t.constant(1, 2, vec![1.0, 1.0]).unwrap();
        let y = t.gaussian_log_density(x, x, v).unwrap();
        assert!((t.value(y)[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);

        let x1 = t.constant(1, 1, vec![1.0]).unwrap();
        let x2 = t.constant(1, 1, vec![2.0]).unwrap();
        let mu = t.constant(1, 1, vec![0.0]).unwrap();
        let one = t.constant(1, 1, vec![1.0]).unwrap();
        let a = t.gaussian_log_density(x1, mu, one).unwrap();
        let b = t.gaussian_log_density(x2, mu, one).unwrap();
        assert!((t.value(a)[0] - (-0.5 - 0.5 * LN_2PI)).abs() < 1e-12);
        assert!((t.value(a)[0] - t.value(b)[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn gaussian_log_density_rejects_non_positive_variance() {
        let mut t = Tape::new();
        let x = t.constant(1, 1, vec![0.0]).unwrap();
        let v = t.constant(1, 1, vec![0.0]).unwrap();
        assert!(matches!(
            t.gaussian_log_density(x, x, v),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = m(&mut t, 1, 2, &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn tensor_grad_accumulates_until_reset() {
        let mut w = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let x = t.leaf(&w, true);
            let s = t.sum(x).unwrap();
            t.backward(s).unwrap().accumulate_into(x, &mut w).unwrap();
        }
        assert_eq!(w.grad().unwrap(), &[2.0, 2.0]);
        w.zero_grad();
        assert!(w.grad().is_none());
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let err = finite_difference_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                t.sum(z)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let p = Tensor::matrix(1, 3, vec![0.4, -0.2, 0.9]).unwrap();
        let err = finite_difference_check(
            |t, x| {
                // true derivative of sin is cos; the rule below is wrong
                let y = t.elementwise(x, f64::sin, |v| -v.cos())?;
                t.sum(y)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-1, "{err}");
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut t = Tape::new();
        let x = t.constant(1, 1, vec![1000.0]).unwrap();
        assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn concat_with_zero_width_block_is_identity() {
        let mut t = Tape::new();
        let a = m(&mut t, 2, 2, &[1., 2., 3., 4.]);
        let e = t.constant(2, 0, vec![]).unwrap();
        let c = t.concat_cols(&[a, e]).unwrap();
        assert_eq!(t.value(c), t.value(a));
        assert_eq!(t.shape(c), [2, 2]);
    }
}

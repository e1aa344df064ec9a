//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! parents were created earlier, so node order is a topological order and
//! [`Graph::backward`] simply walks the tape in reverse. Tensors are
//! batch-major: the first dimension indexes samples.
//!
//! ```
//! use hhpnet::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
//! let w = g.param(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
//! let b = g.param(Tensor::new(vec![1], vec![0.0]).unwrap());
//! let y = g.dense(x, w, b).unwrap();
//! assert_eq!(g.value(y).data(), &[5.0]);
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 3.0]);
//! ```

use crate::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count and row width of a tensor viewed as `[batch, rest]`.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.split_first() {
            Some((&rows, rest)) => (rows, rest.iter().product()),
            None => (1, 1),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Dense { x: Var, w: Var, b: Var },
    Conv1d { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Sum { x: Var },
    /// A scalar whose local gradient w.r.t. each input was computed outside the tape.
    External { inputs: Vec<(Var, Tensor)> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not influence the differentiated output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if the node was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

/// `c = a · b (+ beta · c)` for row-major views described by explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major, contiguous), checked by the callers' shapes.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf (no gradient is propagated into it).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param, true)
    }

    /// Affine map `x·W + b` for `x: [B, m]`, `W: [m, k]`, `b: [k]` → `[B, k]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape.len() != 2 || ws.shape.len() != 2 || bs.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "dense expects x:[B,m], W:[m,k], b:[k]; got {:?}, {:?}, {:?}",
                xs.shape, ws.shape, bs.shape
            )));
        }
        let (batch, m) = (xs.shape[0], xs.shape[1]);
        let (wm, k) = (ws.shape[0], ws.shape[1]);
        if wm != m || bs.shape[0] != k {
            return Err(Error::Shape(format!(
                "dense: x {:?} · W {:?} + b {:?}",
                xs.shape, ws.shape, bs.shape
            )));
        }
        let mut out = vec![0.0; batch * k];
        for row in out.chunks_exact_mut(k) {
            row.copy_from_slice(&bs.data);
        }
        gemm(
            batch,
            m,
            k,
            &xs.data,
            (m as isize, 1),
            &ws.data,
            (k as isize, 1),
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![batch, k], out)?, Op::Dense { x, w, b }, rg))
    }

    /// Single-channel 1D cross-correlation with zero "same" padding.
    ///
    /// `x: [B, n]`, `W: [F, k]` (k odd), `b: [F]` → `[B, n, F]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if xs.shape.len() != 2 || ws.shape.len() != 2 || bs.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "conv1d expects x:[B,n], W:[F,k], b:[F]; got {:?}, {:?}, {:?}",
                xs.shape, ws.shape, bs.shape
            )));
        }
        let (batch, n) = (xs.shape[0], xs.shape[1]);
        let (filters, kernel) = (ws.shape[0], ws.shape[1]);
        if bs.shape[0] != filters {
            return Err(Error::Shape(format!(
                "conv1d: {filters} filters but {} biases",
                bs.shape[0]
            )));
        }
        if kernel % 2 == 0 {
            return Err(Error::Shape(format!("conv1d: kernel {kernel} must be odd")));
        }
        if kernel > n {
            return Err(Error::Shape(format!(
                "conv1d: kernel {kernel} longer than input {n}"
            )));
        }
        let pad = kernel / 2;
        let mut out = vec![0.0; batch * n * filters];
        for s in 0..batch {
            let xrow = &xs.data[s * n..(s + 1) * n];
            for pos in 0..n {
                let o = &mut out[(s * n + pos) * filters..(s * n + pos + 1) * filters];
                for (f, of) in o.iter_mut().enumerate() {
                    let mut acc = bs.data[f];
                    for j in 0..kernel {
                        let src = pos + j;
                        if src >= pad && src - pad < n {
                            acc += ws.data[f * kernel + j] * xrow[src - pad];
                        }
                    }
                    *of = acc;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![batch, n, filters], out)?,
            Op::Conv1d { x, w, b },
            rg,
        ))
    }

    /// Elementwise `max(x, slope·x)`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xs = self.value(x);
        let data = xs
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let t = Tensor {
            shape: xs.shape.clone(),
            data,
        };
        let rg = self.rg(x);
        self.push(t, Op::LeakyRelu { x, slope }, rg)
    }

    /// Which side of the kink every leaky-ReLU input lies on, in tape order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu { x, .. } => Some(self.value(x)),
                _ => None,
            })
            .flat_map(|t| t.data.iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let t = Tensor {
            shape: xs.shape.clone(),
            data: xs.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid { x }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (at, bt) = (self.value(a), self.value(b));
        let t = Tensor {
            shape: at.shape.clone(),
            data: at.data.iter().zip(&bt.data).map(|(x, y)| x * y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (at, bt) = (self.value(a), self.value(b));
        let t = Tensor {
            shape: at.shape.clone(),
            data: at.data.iter().zip(&bt.data).map(|(x, y)| x + y).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let xs = self.value(x);
        let t = Tensor {
            shape: xs.shape.clone(),
            data: xs.data.iter().map(|v| v * k).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, k }, rg)
    }

    /// Concatenates `[B, a_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let batch = self.value(*first).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.shape.len() != 2 || t.shape[0] != batch {
                return Err(Error::Shape(format!(
                    "concat expects [B, n] parts with B = {batch}; got {:?}",
                    t.shape
                )));
            }
            widths.push(t.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total);
        for s in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[s * w..(s + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![batch, total], data)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// `[B, d1, d2, ...]` → `[B, d1·d2·...]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let (rows, cols) = xs.rows_cols();
        let t = Tensor {
            shape: vec![rows, cols],
            data: xs.data.clone(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Reshape { x }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Attaches a scalar computed outside the tape, given its gradient with
    /// respect to each input node.
    pub fn external_scalar(&mut self, value: f64, inputs: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &inputs {
            if self.value(*v).shape != g.shape {
                return Err(Error::Shape(format!(
                    "external gradient {:?} for node of shape {:?}",
                    g.shape,
                    self.value(*v).shape
                )));
            }
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::External { inputs }, rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.value(root).shape.clone(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match op {
            Op::Input | Op::Param => {}
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (batch, m) = (xs.shape[0], xs.shape[1]);
                let k = ws.shape[1];
                if self.rg(*x) {
                    let mut dx = vec![0.0; batch * m];
                    // dX = dY · Wᵀ
                    gemm(
                        batch,
                        k,
                        m,
                        &g.data,
                        (k as isize, 1),
                        &ws.data,
                        (1, k as isize),
                        &mut dx,
                        0.0,
                    );
                    acc(*x, Tensor::new(xs.shape.clone(), dx).unwrap());
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; m * k];
                    // dW = Xᵀ · dY
                    gemm(
                        m,
                        batch,
                        k,
                        &xs.data,
                        (1, m as isize),
                        &g.data,
                        (k as isize, 1),
                        &mut dw,
                        0.0,
                    );
                    acc(*w, Tensor::new(ws.shape.clone(), dw).unwrap());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k];
                    for row in g.data.chunks_exact(k) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(vec![k], db).unwrap());
                }
            }
            Op::Conv1d { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (batch, n) = (xs.shape[0], xs.shape[1]);
                let (filters, kernel) = (ws.shape[0], ws.shape[1]);
                let pad = kernel / 2;
                let mut dx = vec![0.0; batch * n];
                let mut dw = vec![0.0; filters * kernel];
                let mut db = vec![0.0; filters];
                for s in 0..batch {
                    for pos in 0..n {
                        for f in 0..filters {
                            let go = g.data[(s * n + pos) * filters + f];
                            db[f] += go;
                            for j in 0..kernel {
                                let src = pos + j;
                                if src >= pad && src - pad < n {
                                    let xi = s * n + src - pad;
                                    dw[f * kernel + j] += go * xs.data[xi];
                                    dx[xi] += go * ws.data[f * kernel + j];
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xs.shape.clone(), dx).unwrap());
                acc(*w, Tensor::new(ws.shape.clone(), dw).unwrap());
                acc(*b, Tensor::new(vec![filters], db).unwrap());
            }
            Op::LeakyRelu { x, slope } => {
                let xs = self.value(*x);
                let data = xs
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                acc(*x, Tensor { shape: xs.shape.clone(), data });
            }
            Op::Sigmoid { x } => {
                let data = out
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                acc(*x, Tensor { shape: out.shape.clone(), data });
            }
            Op::Mul { a, b } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&bt.data).map(|(gv, y)| gv * y).collect();
                let db = g.data.iter().zip(&at.data).map(|(gv, x)| gv * x).collect();
                acc(*a, Tensor { shape: at.shape.clone(), data: da });
                acc(*b, Tensor { shape: bt.shape.clone(), data: db });
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale { x, k } => {
                acc(
                    *x,
                    Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().map(|v| v * k).collect(),
                    },
                );
            }
            Op::Concat { parts } => {
                let batch = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape[1];
                    let mut data = Vec::with_capacity(batch * w);
                    for s in 0..batch {
                        let start = s * total + offset;
                        data.extend_from_slice(&g.data[start..start + w]);
                    }
                    acc(p, Tensor { shape: vec![batch, w], data });
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                acc(
                    *x,
                    Tensor {
                        shape: self.value(*x).shape.clone(),
                        data: g.data.clone(),
                    },
                );
            }
            Op::Sum { x } => {
                let xs = self.value(*x);
                acc(*x, Tensor::filled(xs.shape.clone(), g.data[0]));
            }
            Op::External { inputs } => {
                let scale = g.data[0];
                for (v, local) in inputs {
                    acc(
                        *v,
                        Tensor {
                            shape: local.shape.clone(),
                            data: local.data.iter().map(|d| d * scale).collect(),
                        },
                    );
                }
            }
        }
    }
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst agreement.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because a perturbation moved a leaky-ReLU input
    /// across zero, where the central difference does not estimate the
    /// derivative.
    pub skipped_kinks: usize,
}

/// Which elements of each parameter tensor [`grad_check`] perturbs.
#[derive(Debug, Clone, Default)]
pub enum Coordinates {
    #[default]
    All,
    /// Explicit `(parameter index, element index)` pairs.
    Subset(Vec<(usize, usize)>),
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `f` receives a fresh graph and one [`Var`] per parameter tensor, and must
/// return a scalar node. The relative error of a coordinate is
/// `|a − n| / max(|a|, |n|, floor)` with `floor = 1e-6 · max(1, |f(params)|)`:
/// central differences cannot resolve gradients far below the roundoff of
/// the function value itself. Coordinates whose perturbations change the
/// [`Graph::kink_pattern`] are skipped and counted in
/// [`GradCheck::skipped_kinks`].
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    epsilon: f64,
    coords: &Coordinates,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.value(out).shape()
            )));
        }
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(params)?;
    let f0 = g.value(out).data()[0];
    let kinks = g.kink_pattern();
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    let floor = 1e-6 * f0.abs().max(1.0);

    let all: Vec<(usize, usize)>;
    let list = match coords {
        Coordinates::All => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(pi, p)| (0..p.len()).map(move |e| (pi, e)))
                .collect();
            &all
        }
        Coordinates::Subset(list) => list,
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for &(pi, e) in list {
        if pi >= params.len() || e >= params[pi].len() {
            return Err(Error::InvalidArgument(format!(
                "coordinate ({pi}, {e}) out of range"
            )));
        }
        let orig = params[pi].data[e];
        work[pi].data[e] = orig + epsilon;
        let (gp, _, op) = eval(&work)?;
        let fp = gp.value(op).data()[0];
        work[pi].data[e] = orig - epsilon;
        let (gm, _, om) = eval(&work)?;
        let fm = gm.value(om).data()[0];
        work[pi].data[e] = orig;
        if gp.kink_pattern() != kinks || gm.kink_pattern() != kinks {
            report.skipped_kinks += 1;
            continue;
        }

        let numeric = (fp - fm) / (2.0 * epsilon);
        let a = analytic[pi].data[e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((pi, e));
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

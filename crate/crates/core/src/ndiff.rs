//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] is an append-only tape. Every op references nodes that were
//! created before it, so the graph is acyclic by construction and backward
//! is a single reverse sweep over the tape.
//!
//! Vectors are `n x 1` columns and scalars are `1 x 1`. Elementwise ops
//! require equal shapes; shape errors in op builders are programming errors
//! and panic.
//!
//! ```
//! use grolab::ndiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.leaf(Tensor::scalar(4.0));
//! let z = g.mul(x, y);
//! g.backward(z).unwrap();
//! assert_eq!(g.grad(x).item(), 4.0);
//! assert_eq!(g.grad(y).item(), 3.0);
//! ```

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NdiffError {
    #[error("backward root must be scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("node {0} does not belong to this graph")]
    ForeignNode(usize),
    #[error("cycle detected at node {0}")]
    Cycle(usize),
    #[error("function value is not finite at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    /// Column vector.
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(n, 1, data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(1, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    SoftmaxCrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulNT(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Gather(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn matmul_into(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch {:?} x {:?}", a.shape(), b.shape());
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn matmul_nt_into(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch {:?} x {:?}ᵀ", a.shape(), b.shape());
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

fn transpose(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.data[i * a.cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`; zeros if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols))
    }

    pub fn take_grad(&mut self, v: Var) -> Tensor {
        let node = &mut self.nodes[v.0];
        node.grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let t = Tensor::from_vec(x.rows, x.cols, data);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let t = Tensor::from_vec(x.rows, x.cols, data);
        self.push(t, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let t = Tensor::from_vec(x.rows, x.cols, data);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v + s).collect());
        self.push(t, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = matmul_into(self.value(a), self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let t = matmul_nt_into(self.value(a), self.value(b));
        self.push(t, Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose(self.value(a));
        self.push(t, Op::Transpose(a))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * x.cols);
        for &r in rows {
            assert!(r < x.rows, "gather index {r} out of range for {} rows", x.rows);
            data.extend_from_slice(x.row(r));
        }
        let t = Tensor::from_vec(rows.len(), x.cols, data);
        self.push(t, Op::Gather(a, rows.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat column mismatch");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|&v| sigmoid(v)).collect());
        self.push(t, Op::Sigmoid(a))
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|&v| v.max(0.0)).collect());
        self.push(t, Op::Relu(a))
    }

    /// Alias of [`Graph::relu`] used for margin losses.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut t = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let (src, dst) = (x.row(r), &mut t.data[r * x.cols..(r + 1) * x.cols]);
            softmax_slice(src, dst);
        }
        self.push(t, Op::SoftmaxRows(a))
    }

    /// `-log softmax(logits)[target]` over all entries of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let x = self.value(logits);
        assert!(target < x.len(), "cross-entropy target out of range");
        let mut probs = vec![0.0; x.len()];
        softmax_slice(&x.data, &mut probs);
        let max = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x.data[target];
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, target, probs },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Signs of every relu/hinge pre-activation in tape order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) = n.op {
                out.extend(self.nodes[a.0].value.data.iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Whether `node` lies on some path into `root`.
    pub fn depends_on(&self, root: Var, node: Var) -> bool {
        if root.0 >= self.nodes.len() || node.0 > root.0 {
            return false;
        }
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            if v == node {
                return true;
            }
            if std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            stack.extend(self.nodes[v.0].op.parents().into_iter().filter(|p| p.0 >= node.0));
        }
        false
    }

    /// Accumulates `∂root/∂node` into every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<(), NdiffError> {
        if root.0 >= self.nodes.len() {
            return Err(NdiffError::ForeignNode(root.0));
        }
        let (rows, cols) = self.nodes[root.0].value.shape();
        if rows * cols != 1 {
            return Err(NdiffError::NonScalarRoot { rows, cols });
        }
        let mut pass: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        pass[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = pass[idx].take() else {
                continue;
            };
            for p in self.nodes[idx].op.parents() {
                if p.0 >= idx {
                    return Err(NdiffError::Cycle(idx));
                }
            }
            self.propagate(idx, &upstream, &mut pass);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(g) => g.add_assign(&upstream),
                None => node.grad = Some(upstream),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, up: &Tensor, pass: &mut [Option<Tensor>]) {
        fn acc(pass: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut pass[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            Tensor::from_vec(t.rows, t.cols, t.data.iter().enumerate().map(|(i, &g)| f(i, g)).collect())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(pass, *a, up.clone());
                acc(pass, *b, up.clone());
            }
            Op::Sub(a, b) => {
                acc(pass, *a, up.clone());
                acc(pass, *b, map(up, &|_, g| -g));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(pass, *a, map(up, &|i, g| g * y.data[i]));
                acc(pass, *b, map(up, &|i, g| g * x.data[i]));
            }
            Op::Scale(a, s) => acc(pass, *a, map(up, &|_, g| g * s)),
            Op::AddScalar(a) => acc(pass, *a, up.clone()),
            Op::MatMul(a, b) => {
                // out = a b ; da = up bᵀ ; db = aᵀ up
                let (x, y) = (val(*a), val(*b));
                acc(pass, *a, matmul_nt_into(up, y));
                acc(pass, *b, matmul_into(&transpose(x), up));
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ ; da = up b ; db = upᵀ a
                let (x, y) = (val(*a), val(*b));
                acc(pass, *a, matmul_into(up, y));
                acc(pass, *b, matmul_into(&transpose(up), x));
            }
            Op::Transpose(a) => acc(pass, *a, transpose(up)),
            Op::Gather(a, rows) => {
                let x = val(*a);
                let mut g = Tensor::zeros(x.rows, x.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, src) in g.row_mut(r).iter_mut().zip(up.row(i)) {
                        *dst += src;
                    }
                }
                acc(pass, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = val(p);
                    let n = x.len();
                    let g = Tensor::from_vec(x.rows, x.cols, up.data[offset..offset + n].to_vec());
                    offset += n;
                    acc(pass, p, g);
                }
            }
            Op::Tanh(a) => acc(pass, *a, map(up, &|i, g| g * (1.0 - out.data[i] * out.data[i]))),
            Op::Sigmoid(a) => acc(pass, *a, map(up, &|i, g| g * out.data[i] * (1.0 - out.data[i]))),
            Op::Relu(a) => {
                let x = val(*a);
                acc(pass, *a, map(up, &|i, g| if x.data[i] > 0.0 { g } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let mut g = Tensor::zeros(out.rows, out.cols);
                for r in 0..out.rows {
                    let (y, dy) = (out.row(r), up.row(r));
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    for (c, dst) in g.row_mut(r).iter_mut().enumerate() {
                        *dst = y[c] * (dy[c] - dot);
                    }
                }
                acc(pass, *a, g);
            }
            Op::SoftmaxCrossEntropy { logits, target, probs } => {
                let x = val(*logits);
                let u = up.item();
                let mut data: Vec<f64> = probs.iter().map(|p| p * u).collect();
                data[*target] -= u;
                acc(pass, *logits, Tensor::from_vec(x.rows, x.cols, data));
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(pass, *a, Tensor::from_vec(x.rows, x.cols, vec![up.item(); x.len()]));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let g = up.item() / x.len() as f64;
                acc(pass, *a, Tensor::from_vec(x.rows, x.cols, vec![g; x.len()]));
            }
        }
    }
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    /// Coordinates skipped because a hinge kink lies within `10h`.
    pub excluded: Vec<usize>,
    pub pass: bool,
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(f: F, point: &[f64], h: f64) -> Result<Vec<f64>, NdiffError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NdiffError::NonFinite { coordinate: i });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Below this magnitude both values count as zero: a flat coordinate whose
/// difference quotient is pure rounding noise.
const ZERO_GRADIENT: f64 = 1e-9;

fn relative_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 || a.abs().max(b.abs()) < ZERO_GRADIENT {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

/// Compares `analytic` against central differences of `f`, skipping `excluded` coordinates.
pub fn compare_gradients<F>(
    analytic: &[f64],
    f: F,
    point: &[f64],
    h: f64,
    tol: f64,
    abs_tol: f64,
    excluded: Vec<usize>,
) -> Result<GradCheckReport, NdiffError>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), point.len());
    let numeric = finite_difference_gradient(f, point, h)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: 0,
        excluded,
        pass: true,
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if report.excluded.contains(&i) {
            continue;
        }
        let rel = relative_error(a, n);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
    }
    report.pass = report.max_rel_error <= tol || report.max_abs_error <= abs_tol;
    Ok(report)
}

/// Checks the reverse-mode gradient of a graph-building function at `point`.
///
/// `build` receives a fresh graph and the input as an `n x 1` leaf, and must
/// return a scalar node. Coordinates whose `±10h` perturbation flips any
/// relu/hinge activation are treated as kinks and excluded.
pub fn grad_check<F>(build: F, point: &[f64], h: f64, tol: f64, abs_tol: f64) -> Result<GradCheckReport, NdiffError>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    let run = |x: &[f64]| -> (Graph, Var, Var) {
        let mut g = Graph::new();
        let input = g.leaf(Tensor::column(x.to_vec()));
        let out = build(&mut g, input);
        (g, input, out)
    };
    let (mut g, input, out) = run(point);
    g.backward(out)?;
    let analytic = g.grad(input).into_vec();
    let base_pattern = g.activation_pattern();

    let mut excluded = Vec::new();
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let orig = probe[i];
        for delta in [10.0 * h, -10.0 * h] {
            probe[i] = orig + delta;
            let (pg, _, _) = run(&probe);
            if pg.activation_pattern() != base_pattern {
                excluded.push(i);
                break;
            }
        }
        probe[i] = orig;
    }

    let eval = |x: &[f64]| {
        let (g, _, out) = run(x);
        g.value(out).item()
    };
    compare_gradients(&analytic, eval, point, h, tol, abs_tol, excluded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.leaf(Tensor::scalar(4.0));
        let z = g.mul(x, y);
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).item(), 4.0);
        assert_eq!(g.grad(y).item(), 3.0);
    }

    #[test]
    fn hinge_subgradient() {
        for (x0, expected) in [(-1.0, 0.0), (1.0, 1.0), (-0.5, 0.0)] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::scalar(x0));
            let s = g.add_scalar(x, 0.5);
            let h = g.hinge(s);
            g.backward(h).unwrap();
            assert_eq!(g.grad(x).item(), expected, "at x = {x0}");
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::column(vec![1.0, 2.0]));
        assert_eq!(
            g.backward(x),
            Err(NdiffError::NonScalarRoot { rows: 2, cols: 1 })
        );
        assert_eq!(g.backward(Var(99)), Err(NdiffError::ForeignNode(99)));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.mul(x, x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 8.0);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 4.0);
    }

    #[test]
    fn fd_of_square() {
        let d = finite_difference_gradient(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-6);
        let z = finite_difference_gradient(|_| 7.0, &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert_eq!(z, vec![0.0; 3]);
        let err = finite_difference_gradient(|x| 1.0 / x[0], &[1e-4], 1e-4).unwrap_err();
        assert_eq!(err, NdiffError::NonFinite { coordinate: 0 });
    }

    fn random_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn softmax_cross_entropy_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = random_point(&mut rng, 12);
        let report = grad_check(
            |g, x| {
                let w = g.leaf(Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
                let xm = g.gather_rows(x, &[0, 1, 2, 3]);
                let logits = g.matmul(w, xm);
                let t = g.tanh(logits);
                let e = g.concat_rows(&[t, logits]);
                g.softmax_cross_entropy(e, 2)
            },
            &point,
            1e-4,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn random_composition_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let point = random_point(&mut rng, 12);
            let w1: Vec<f64> = random_point(&mut rng, 16);
            let w2: Vec<f64> = random_point(&mut rng, 16);
            let report = grad_check(
                |g, x| {
                    let a = g.leaf(Tensor::from_vec(4, 4, w1.clone()));
                    let b = g.leaf(Tensor::from_vec(4, 4, w2.clone()));
                    let xs = g.gather_rows(x, &(0..12).collect::<Vec<_>>());
                    let xm = g.transpose(xs);
                    let x3 = g.gather_rows(xs, &[0, 5, 7, 11]);
                    let x3 = g.transpose(x3);
                    let h1 = g.matmul(x3, a);
                    let h1 = g.sigmoid(h1);
                    let h2 = g.matmul_nt(h1, b);
                    let h2 = g.tanh(h2);
                    let att = g.softmax_rows(h2);
                    let z = g.mul(att, h1);
                    let z = g.scale(z, 1.7);
                    let z = g.sub(z, h1);
                    let r = g.relu(z);
                    let r = g.add_scalar(r, 0.2);
                    let p = g.add(r, h2);
                    let s1 = g.sum(p);
                    let s2 = g.mean(xm);
                    let s = g.concat_rows(&[s1, s2]);
                    g.mean(s)
                },
                &point,
                1e-4,
                1e-5,
                1e-10,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5 || report.max_abs_error < 1e-10, "trial {trial}: {report:?}");
        }
    }

    #[test]
    fn kink_coordinates_are_excluded() {
        // relu(x0 - 1e-5): x0 sits within 10h of the kink
        let report = grad_check(
            |g, x| {
                let s = g.add_scalar(x, -1e-5);
                let r = g.relu(s);
                g.sum(r)
            },
            &[0.0, 2.0],
            1e-4,
            1e-5,
            0.0,
        )
        .unwrap();
        assert_eq!(report.excluded, vec![0]);
        assert!(report.pass);
    }

    #[test]
    fn corrupted_jacobian_fails() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let point = [1.5, -2.0];
        let good = compare_gradients(&[3.0, 3.0], f, &point, 1e-4, 1e-5, 1e-9, vec![]).unwrap();
        assert!(good.pass);
        let bad = compare_gradients(&[3.0, 3.3], f, &point, 1e-4, 1e-5, 1e-9, vec![]).unwrap();
        assert!(!bad.pass);
        assert_eq!(bad.worst_coordinate, 1);
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_point(&mut rng, 6);
        let build = |g: &mut Graph| {
            let x = g.leaf(Tensor::from_vec(2, 3, w.clone()));
            let t = g.tanh(x);
            let l1 = g.sum(t);
            let s = g.sigmoid(x);
            let l2 = g.mean(s);
            (x, l1, l2)
        };
        let mut g = Graph::new();
        let (x, l1, l2) = build(&mut g);
        let total = g.add(l1, l2);
        g.backward(total).unwrap();
        let joint = g.grad(x);

        let mut g = Graph::new();
        let (x, l1, l2) = build(&mut g);
        g.backward(l1).unwrap();
        g.backward(l2).unwrap();
        let split = g.grad(x);
        for (a, b) in joint.data().iter().zip(split.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

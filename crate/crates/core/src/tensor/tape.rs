//! Tape-based reverse-mode differentiation over dense 2-D arrays.
//!
//! Every value on the tape is an `Array2<f64>`; scalars are `1×1` and
//! vectors are `1×m` rows or `n×1` columns. A forward pass records one
//! [`Node`] per operation, and [`Tape::backward`] walks the nodes in
//! reverse order accumulating gradients. Recorded values are never mutated
//! after they are pushed.
//!
//! Broadcasting is limited to a row vector or a column vector against a
//! matrix (`add_row`, `add_col`, `mul_row`, `mul_col`); anything else has
//! to be expanded explicitly.

use ndarray::{s, Array2, Axis, Zip};
use std::sync::Arc;

use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-point 2×2 rotation blocks applied to channel pairs.
///
/// `cos` and `sin` are `n × d/2`; pair `i` covers channels `2i, 2i+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRotation {
    pub cos: Array2<f64>,
    pub sin: Array2<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Arc<Array2<f64>>),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Slice(Var, usize, usize),
    LayerNorm { x: Var, inv_std: Array2<f64> },
    Rotate(Var, Arc<PairRotation>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_of(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape_of(&self.nodes[v.0].value)
    }

    /// Accumulated gradient of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(dim_err(format!("matmul: {n}x{k} by {k2}x{m}")));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `a (n×m) + r (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, m) = self.shape(a);
        if self.shape(r) != (1, m) {
            return Err(dim_err(format!("add_row: {:?} vs 1x{m}", self.shape(r))));
        }
        let v = self.value(a) + self.value(r);
        Ok(self.push(v, Op::AddRow(a, r), &[a, r]))
    }

    /// `a (n×m) + c (n×1)` broadcast over columns.
    pub fn add_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (n, _) = self.shape(a);
        if self.shape(c) != (n, 1) {
            return Err(dim_err(format!("add_col: {:?} vs {n}x1", self.shape(c))));
        }
        let v = self.value(a) + self.value(c);
        Ok(self.push(v, Op::AddCol(a, c), &[a, c]))
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, m) = self.shape(a);
        if self.shape(r) != (1, m) {
            return Err(dim_err(format!("mul_row: {:?} vs 1x{m}", self.shape(r))));
        }
        let v = self.value(a) * self.value(r);
        Ok(self.push(v, Op::MulRow(a, r), &[a, r]))
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (n, _) = self.shape(a);
        if self.shape(c) != (n, 1) {
            return Err(dim_err(format!("mul_col: {:?} vs {n}x1", self.shape(c))));
        }
        let v = self.value(a) * self.value(c);
        Ok(self.push(v, Op::MulCol(a, c), &[a, c]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, a: Var, c: Arc<Array2<f64>>) -> Result<Var> {
        if self.shape(a) != c.dim() {
            return Err(dim_err(format!("mul_const: {:?} vs {:?}", self.shape(a), c.dim())));
        }
        let v = self.value(a) * c.as_ref();
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(v, Op::Powf(a, p), &[a])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let mx = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// `n×m → n×1` log-sum-exp of each row.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| lse(x.row(i).iter().copied()));
        self.push(v, Op::LogSumExpRows(a), &[a])
    }

    /// `n×m → 1×m` log-sum-exp of each column.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_shape_fn((1, x.ncols()), |(_, j)| lse(x.column(j).iter().copied()));
        self.push(v, Op::LogSumExpCols(a), &[a])
    }

    /// Concatenate along the channel (column) axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, _) = self.shape(a);
        let (nb, _) = self.shape(b);
        if na != nb {
            return Err(dim_err(format!("concat_cols: {na} rows vs {nb} rows")));
        }
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("row counts checked");
        Ok(self.push(v, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, ma) = self.shape(a);
        let (_, mb) = self.shape(b);
        if ma != mb {
            return Err(dim_err(format!("concat_rows: {ma} cols vs {mb} cols")));
        }
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("column counts checked");
        Ok(self.push(v, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Top-left `rows × cols` block starting at `(r0, c0)`.
    pub fn slice(&mut self, a: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        let (n, m) = self.shape(a);
        if r0 + rows > n || c0 + cols > m {
            return Err(dim_err(format!(
                "slice [{r0}..{}, {c0}..{}] out of {n}x{m}",
                r0 + rows,
                c0 + cols
            )));
        }
        let v = self.value(a).slice(s![r0..r0 + rows, c0..c0 + cols]).to_owned();
        Ok(self.push(v, Op::Slice(a, r0, c0), &[a]))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let m = x.ncols() as f64;
        let mut out = x.clone();
        let mut inv_std = Array2::zeros((x.nrows(), 1));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / m;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / m;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std[[i, 0]] = is;
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    /// Rotate each channel pair of every row by its per-row angle.
    pub fn rotate_pairs(&mut self, a: Var, rot: Arc<PairRotation>) -> Result<Var> {
        let (n, d) = self.shape(a);
        if d % 2 != 0 || rot.cos.dim() != (n, d / 2) {
            return Err(dim_err(format!(
                "rotate_pairs: input {n}x{d}, rotation {:?}",
                rot.cos.dim()
            )));
        }
        let x = self.value(a);
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for p in 0..d / 2 {
                let (c, s) = (rot.cos[[i, p]], rot.sin[[i, p]]);
                let (x0, x1) = (x[[i, 2 * p]], x[[i, 2 * p + 1]]);
                out[[i, 2 * p]] = c * x0 - s * x1;
                out[[i, 2 * p + 1]] = s * x0 + c * x1;
            }
        }
        Ok(self.push(out, Op::Rotate(a, rot), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Back-propagate from a scalar loss.
    ///
    /// Gradients are added to whatever each node already holds, so calling
    /// this twice without [`Tape::zero_grad`] doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => *acc += &g,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    send(*a, g.dot(&val(*b).t()));
                }
                if rg(*b) {
                    send(*b, val(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => send(*a, g.t().to_owned()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g * val(*b));
                }
                if rg(*b) {
                    send(*b, g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                if rg(*r) {
                    send(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddCol(a, c) => {
                send(*a, g.clone());
                if rg(*c) {
                    send(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::MulRow(a, r) => {
                if rg(*a) {
                    send(*a, g * val(*r));
                }
                if rg(*r) {
                    send(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, c) => {
                if rg(*a) {
                    send(*a, g * val(*c));
                }
                if rg(*c) {
                    send(*c, (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, k) => send(*a, g * *k),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MulConst(a, c) => send(*a, g * c.as_ref()),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut out = g.clone();
                Zip::from(&mut out).and(y).for_each(|o, &y| *o *= y * (1.0 - y));
                send(*a, out);
            }
            Op::Relu(a) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(val(*a))
                    .for_each(|o, &x| if x <= 0.0 { *o = 0.0 });
                send(*a, out);
            }
            Op::Exp(a) => send(*a, g * &node.value),
            Op::Ln(a) => send(*a, g / val(*a)),
            Op::Powf(a, p) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(val(*a))
                    .for_each(|o, &x| *o *= p * x.powf(p - 1.0));
                send(*a, out);
            }
            Op::Clamp(a, lo, hi) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(val(*a))
                    .for_each(|o, &x| if x < *lo || x > *hi { *o = 0.0 });
                send(*a, out);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = y * g;
                for (mut orow, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = orow.sum();
                    Zip::from(&mut orow).and(&yrow).for_each(|o, &yv| *o -= yv * dot);
                }
                send(*a, out);
            }
            Op::LogSumExpRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut out = x.clone();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let (yi, gi) = (y[[i, 0]], g[[i, 0]]);
                    row.mapv_inplace(|v| softmax_weight(v, yi) * gi);
                }
                send(*a, out);
            }
            Op::LogSumExpCols(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut out = x.clone();
                for (j, mut col) in out.columns_mut().into_iter().enumerate() {
                    let (yj, gj) = (y[[0, j]], g[[0, j]]);
                    col.mapv_inplace(|v| softmax_weight(v, yj) * gj);
                }
                send(*a, out);
            }
            Op::ConcatCols(a, b) => {
                let ma = val(*a).ncols();
                send(*a, g.slice(s![.., ..ma]).to_owned());
                send(*b, g.slice(s![.., ma..]).to_owned());
            }
            Op::ConcatRows(a, b) => {
                let na = val(*a).nrows();
                send(*a, g.slice(s![..na, ..]).to_owned());
                send(*b, g.slice(s![na.., ..]).to_owned());
            }
            Op::Slice(a, r0, c0) => {
                let mut out = Array2::zeros(val(*a).dim());
                let (rows, cols) = g.dim();
                out.slice_mut(s![*r0..r0 + rows, *c0..c0 + cols]).assign(g);
                send(*a, out);
            }
            Op::LayerNorm { x, inv_std } => {
                // dx = inv_std * (g - mean(g) - y * mean(g * y)), row-wise
                let y = &node.value;
                let m = y.ncols() as f64;
                let mut out = g.clone();
                for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                    let yrow = y.row(i);
                    let gm = row.sum() / m;
                    let gym = row.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / m;
                    let is = inv_std[[i, 0]];
                    Zip::from(&mut row)
                        .and(&yrow)
                        .for_each(|o, &yv| *o = is * (*o - gm - yv * gym));
                }
                send(*x, out);
            }
            Op::Rotate(a, rot) => {
                let (n, d) = g.dim();
                let mut out = Array2::zeros((n, d));
                for i in 0..n {
                    for p in 0..d / 2 {
                        let (c, s) = (rot.cos[[i, p]], rot.sin[[i, p]]);
                        let (g0, g1) = (g[[i, 2 * p]], g[[i, 2 * p + 1]]);
                        out[[i, 2 * p]] = c * g0 + s * g1;
                        out[[i, 2 * p + 1]] = -s * g0 + c * g1;
                    }
                }
                send(*a, out);
            }
            Op::Sum(a) => send(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let x = val(*a);
                send(*a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
            }
        }
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

/// Log-sum-exp; an all `-inf` input yields `-inf`.
pub fn lse(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + it.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn softmax_weight(v: f64, lse: f64) -> f64 {
    if lse == f64::NEG_INFINITY {
        0.0
    } else {
        (v - lse).exp()
    }
}

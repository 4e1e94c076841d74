//! Reverse-mode tape over [`Matrix`] values.
//!
//! A [`Tape`] records primitive operations in execution order. Each node keeps
//! its output and whatever it needs for the vector-Jacobian product, so a
//! single [`Tape::backward`] sweep yields gradients for every leaf that
//! requires them. Tapes are single-threaded; use one tape per node and step.

use crate::error::{Error, Result};

use super::matrix::{check_finite, matmul, Matrix};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Gelu(Var),
    Sqrt(Var),
    ColNorms {
        x: Var,
        min_norm: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
    },
    MeanPoolGroups {
        x: Var,
        group: usize,
    },
    RowNormalize(Var),
    SumAll(Var),
    FrobNorm(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    Detach(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::DivRow(..) => "div_row",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Sqrt(..) => "sqrt",
            Op::ColNorms { .. } => "col_norms",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::MeanPoolGroups { .. } => "mean_pool_groups",
            Op::RowNormalize(..) => "row_normalize",
            Op::SumAll(..) => "sum_all",
            Op::FrobNorm(..) => "frob_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Detach(..) => "detach",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::DivRow(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Sqrt(a)
            | Op::RowNormalize(a)
            | Op::SumAll(a)
            | Op::FrobNorm(a)
            | Op::Detach(a) => vec![a],
            Op::ColNorms { x, .. } | Op::MeanPoolGroups { x, .. } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Node {
    op: Op,
    saved: Vec<Matrix>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Matrix>,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn expect_row(op: &'static str, x: &Matrix, row: &Matrix) -> Result<()> {
    if row.rows() != 1 || row.cols() != x.cols() {
        return Err(shape_err(op, x, row));
    }
    Ok(())
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    Matrix::from_parts(1, m.cols(), out)
}

fn row_broadcast(x: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let c = x.cols();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(v, row.data()[i % c]))
        .collect();
    Matrix::from_parts(x.rows(), c, data)
}

/// Computes the output of `op` and any saved tensors from `values`.
fn eval(op: &Op, values: &[Matrix]) -> Result<(Matrix, Vec<Matrix>)> {
    let v = |x: Var| &values[x.0];
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => (matmul(v(*a), v(*b))?, vec![]),
        Op::Add(a, b) => (v(*a).add(v(*b))?, vec![]),
        Op::Sub(a, b) => (v(*a).sub(v(*b))?, vec![]),
        Op::Mul(a, b) => (v(*a).hadamard(v(*b))?, vec![]),
        Op::Div(a, b) => (v(*a).zip_with(v(*b), "div", |x, y| x / y)?, vec![]),
        Op::Scale(a, c) => (v(*a).map(|x| x * c), vec![]),
        Op::AddRow(x, r) => {
            expect_row("add_row", v(*x), v(*r))?;
            (row_broadcast(v(*x), v(*r), |a, b| a + b), vec![])
        }
        Op::MulRow(x, r) => {
            expect_row("mul_row", v(*x), v(*r))?;
            (row_broadcast(v(*x), v(*r), |a, b| a * b), vec![])
        }
        Op::DivRow(x, r) => {
            expect_row("div_row", v(*x), v(*r))?;
            (row_broadcast(v(*x), v(*r), |a, b| a / b), vec![])
        }
        Op::Transpose(a) => (v(*a).transpose(), vec![]),
        Op::Tanh(a) => (v(*a).map(f64::tanh), vec![]),
        Op::Gelu(a) => (v(*a).map(gelu), vec![]),
        Op::Sqrt(a) => {
            if v(*a).data().iter().any(|&x| x < 0.0) {
                return Err(Error::NonFinite("sqrt of negative value".into()));
            }
            (v(*a).map(f64::sqrt), vec![])
        }
        Op::ColNorms { x, min_norm } => {
            let norms = super::matrix::column_norms(v(*x));
            if let Some((column, &norm)) = norms.iter().enumerate().find(|(_, &n)| n < *min_norm) {
                return Err(Error::DegenerateDirection {
                    context: "col_norms".into(),
                    column,
                    norm,
                });
            }
            (Matrix::from_parts(1, norms.len(), norms), vec![])
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (x, g, b) = (v(*x), v(*gamma), v(*beta));
            expect_row("layer_norm", x, g)?;
            expect_row("layer_norm", x, b)?;
            let (n, m) = x.shape();
            let mut xhat = vec![0.0; n * m];
            let mut rstd = vec![0.0; n];
            let mut out = vec![0.0; n * m];
            for r in 0..n {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / m as f64;
                let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / m as f64;
                if !var.is_finite() {
                    return Err(Error::NonFinite(format!("layer_norm variance of row {r}")));
                }
                let rs = 1.0 / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..m {
                    let h = (row[c] - mean) * rs;
                    xhat[r * m + c] = h;
                    out[r * m + c] = h * g.data()[c] + b.data()[c];
                }
            }
            (
                Matrix::from_parts(n, m, out),
                vec![Matrix::from_parts(n, m, xhat), Matrix::from_parts(n, 1, rstd)],
            )
        }
        Op::Attention {
            q,
            k,
            v: vv,
            seq_len,
            n_heads,
        } => attention_forward(v(*q), v(*k), v(*vv), *seq_len, *n_heads)?,
        Op::MeanPoolGroups { x, group } => {
            let x = v(*x);
            if *group == 0 || x.rows() % group != 0 {
                return Err(Error::Dimension {
                    op: "mean_pool_groups",
                    left: x.shape(),
                    right: (*group, 1),
                });
            }
            let n = x.rows() / group;
            let m = x.cols();
            let mut out = vec![0.0; n * m];
            for s in 0..n {
                for t in 0..*group {
                    for (o, a) in out[s * m..(s + 1) * m].iter_mut().zip(x.row(s * group + t)) {
                        *o += a;
                    }
                }
            }
            let inv = *group as f64;
            out.iter_mut().for_each(|o| *o /= inv);
            (Matrix::from_parts(n, m, out), vec![])
        }
        Op::RowNormalize(a) => {
            let x = v(*a);
            let (n, m) = x.shape();
            let mut norms = vec![0.0; n];
            let mut out = vec![0.0; n * m];
            for r in 0..n {
                let nr = super::matrix::norm(x.row(r));
                if nr.is_nan() || nr <= 0.0 {
                    return Err(Error::DegenerateVector(format!("row {r} has zero norm")));
                }
                norms[r] = nr;
                for c in 0..m {
                    out[r * m + c] = x.get(r, c) / nr;
                }
            }
            (Matrix::from_parts(n, m, out), vec![Matrix::from_parts(n, 1, norms)])
        }
        Op::SumAll(a) => (Matrix::scalar(v(*a).sum()), vec![]),
        Op::FrobNorm(a) => (Matrix::scalar(v(*a).frobenius_norm()), vec![]),
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let z = v(*logits);
            let (n, c) = z.shape();
            if labels.len() != n || n == 0 {
                return Err(Error::Dimension {
                    op: "softmax_cross_entropy",
                    left: z.shape(),
                    right: (labels.len(), 1),
                });
            }
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for r in 0..n {
                let row = z.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..c {
                    let e = (row[j] - max).exp();
                    probs[r * c + j] = e;
                    denom += e;
                }
                for j in 0..c {
                    probs[r * c + j] /= denom;
                }
                let y = labels[r];
                if y >= c {
                    return Err(Error::Evaluation(format!("label {y} >= {c} classes")));
                }
                loss += denom.ln() + max - row[y];
            }
            (Matrix::scalar(loss / n as f64), vec![Matrix::from_parts(n, c, probs)])
        }
        Op::Detach(a) => (v(*a).clone(), vec![]),
    };
    let value = check_finite(out.0, op.name())?;
    Ok((value, out.1))
}

fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    seq_len: usize,
    n_heads: usize,
) -> Result<(Matrix, Vec<Matrix>)> {
    if q.shape() != k.shape() {
        return Err(shape_err("attention", q, k));
    }
    if q.shape() != v.shape() {
        return Err(shape_err("attention", q, v));
    }
    let (rows, d) = q.shape();
    if seq_len == 0 || rows % seq_len != 0 || n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Dimension {
            op: "attention",
            left: q.shape(),
            right: (seq_len, n_heads),
        });
    }
    let n_seq = rows / seq_len;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; n_seq * n_heads * seq_len * seq_len];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut scores = vec![0.0; seq_len];
    for s in 0..n_seq {
        let r0 = s * seq_len;
        for h in 0..n_heads {
            let c0 = h * dh;
            let pbase = (s * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let qi = &qd[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..seq_len {
                    let kj = &kd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                    let sc = super::matrix::dot(qi, kj) * scale;
                    scores[j] = sc;
                    max = max.max(sc);
                }
                let mut denom = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    denom += *sc;
                }
                for j in 0..seq_len {
                    let p = scores[j] / denom;
                    probs[pbase + i * seq_len + j] = p;
                    let vj = &vd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                    let o = &mut out[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                    for (oc, &vc) in o.iter_mut().zip(vj) {
                        *oc += p * vc;
                    }
                }
            }
        }
    }
    Ok((
        Matrix::from_parts(rows, d, out),
        vec![Matrix::from_parts(n_seq * n_heads * seq_len, seq_len, probs)],
    ))
}

/// Vector-Jacobian products of node `op` given upstream gradient `g`.
fn vjp(op: &Op, out: &Matrix, saved: &[Matrix], g: &Matrix, values: &[Matrix]) -> Result<Vec<(Var, Matrix)>> {
    let v = |x: Var| &values[x.0];
    Ok(match op {
        Op::Leaf | Op::Detach(_) => vec![],
        Op::MatMul(a, b) => vec![
            (*a, matmul(g, &v(*b).transpose())?),
            (*b, matmul(&v(*a).transpose(), g)?),
        ],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
        Op::Mul(a, b) => vec![(*a, g.hadamard(v(*b))?), (*b, g.hadamard(v(*a))?)],
        Op::Div(a, b) => {
            let (x, y) = (v(*a), v(*b));
            let da = g.zip_with(y, "div_vjp", |gi, yi| gi / yi)?;
            let mut db = g.hadamard(x)?;
            for (d, &yi) in db.data_mut().iter_mut().zip(y.data()) {
                *d = -*d / (yi * yi);
            }
            vec![(*a, da), (*b, db)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::AddRow(x, r) => vec![(*x, g.clone()), (*r, col_sums(g))],
        Op::MulRow(x, r) => vec![
            (*x, row_broadcast(g, v(*r), |a, b| a * b)),
            (*r, col_sums(&g.hadamard(v(*x))?)),
        ],
        Op::DivRow(x, r) => {
            let row = v(*r);
            let dx = row_broadcast(g, row, |a, b| a / b);
            let mut dr = col_sums(&g.hadamard(v(*x))?);
            for (d, &ri) in dr.data_mut().iter_mut().zip(row.data()) {
                *d = -*d / (ri * ri);
            }
            vec![(*x, dx), (*r, dr)]
        }
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Tanh(a) => vec![(*a, g.zip_with(out, "tanh_vjp", |gi, y| gi * (1.0 - y * y))?)],
        Op::Gelu(a) => vec![(*a, g.zip_with(v(*a), "gelu_vjp", |gi, x| gi * gelu_grad(x))?)],
        Op::Sqrt(a) => vec![(*a, g.zip_with(out, "sqrt_vjp", |gi, y| gi / (2.0 * y))?)],
        Op::ColNorms { x, .. } => {
            let xm = v(*x);
            let scale = row_broadcast(g, out, |gi, n| gi / n);
            vec![(*x, row_broadcast(xm, &scale, |a, s| a * s))]
        }
        Op::LayerNorm { x, gamma, beta, .. } => {
            let (xhat, rstd) = (&saved[0], &saved[1]);
            let gm = v(*gamma);
            let (n, m) = xhat.shape();
            let dgamma = col_sums(&g.hadamard(xhat)?);
            let dbeta = col_sums(g);
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for c in 0..m {
                    let dh = g.get(r, c) * gm.data()[c];
                    mean_d += dh;
                    mean_dx += dh * xhat.get(r, c);
                }
                mean_d /= m as f64;
                mean_dx /= m as f64;
                let rs = rstd.data()[r];
                for c in 0..m {
                    let dh = g.get(r, c) * gm.data()[c];
                    dx[r * m + c] = rs * (dh - mean_d - xhat.get(r, c) * mean_dx);
                }
            }
            vec![(*x, Matrix::from_parts(n, m, dx)), (*gamma, dgamma), (*beta, dbeta)]
        }
        Op::Attention {
            q,
            k,
            v: vv,
            seq_len,
            n_heads,
        } => {
            let (dq, dk, dv) = attention_backward(v(*q), v(*k), v(*vv), &saved[0], g, *seq_len, *n_heads);
            vec![(*q, dq), (*k, dk), (*vv, dv)]
        }
        Op::MeanPoolGroups { x, group } => {
            let (rows, m) = v(*x).shape();
            let mut dx = vec![0.0; rows * m];
            let inv = 1.0 / *group as f64;
            for r in 0..rows {
                let s = r / group;
                for c in 0..m {
                    dx[r * m + c] = g.get(s, c) * inv;
                }
            }
            vec![(*x, Matrix::from_parts(rows, m, dx))]
        }
        Op::RowNormalize(a) => {
            let norms = &saved[0];
            let (n, m) = out.shape();
            let mut dx = vec![0.0; n * m];
            for r in 0..n {
                let y = out.row(r);
                let gr = g.row(r);
                let proj = super::matrix::dot(y, gr);
                let nr = norms.data()[r];
                for c in 0..m {
                    dx[r * m + c] = (gr[c] - y[c] * proj) / nr;
                }
            }
            vec![(*a, Matrix::from_parts(n, m, dx))]
        }
        Op::SumAll(a) => {
            let (n, m) = v(*a).shape();
            vec![(*a, Matrix::filled(n, m, g.data()[0]))]
        }
        Op::FrobNorm(a) => {
            let nrm = out.data()[0];
            let s = g.data()[0] / nrm;
            vec![(*a, v(*a).map(|x| x * s))]
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let mut dz = saved[0].clone();
            let (n, c) = dz.shape();
            let s = g.data()[0] / n as f64;
            let data = dz.data_mut();
            for r in 0..n {
                data[r * c + labels[r]] -= 1.0;
            }
            data.iter_mut().for_each(|x| *x *= s);
            vec![(*logits, dz)]
        }
    })
}

fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &Matrix,
    g: &Matrix,
    seq_len: usize,
    n_heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let (rows, d) = q.shape();
    let n_seq = rows / seq_len;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let (qd, kd, vd, gd, pd) = (q.data(), k.data(), v.data(), g.data(), probs.data());
    let mut dp = vec![0.0; seq_len];
    for s in 0..n_seq {
        let r0 = s * seq_len;
        for h in 0..n_heads {
            let c0 = h * dh;
            let pbase = (s * n_heads + h) * seq_len * seq_len;
            for i in 0..seq_len {
                let gi = &gd[(r0 + i) * d + c0..(r0 + i) * d + c0 + dh];
                let mut weighted = 0.0;
                for j in 0..seq_len {
                    let vj = &vd[(r0 + j) * d + c0..(r0 + j) * d + c0 + dh];
                    dp[j] = super::matrix::dot(gi, vj);
                    weighted += pd[pbase + i * seq_len + j] * dp[j];
                }
                for j in 0..seq_len {
                    let p = pd[pbase + i * seq_len + j];
                    for c in 0..dh {
                        dv[(r0 + j) * d + c0 + c] += p * gi[c];
                    }
                    let ds = p * (dp[j] - weighted) * scale;
                    for c in 0..dh {
                        dq[(r0 + i) * d + c0 + c] += ds * kd[(r0 + j) * d + c0 + c];
                        dk[(r0 + j) * d + c0 + c] += ds * qd[(r0 + i) * d + c0 + c];
                    }
                }
            }
        }
    }
    (
        Matrix::from_parts(rows, d, dq),
        Matrix::from_parts(rows, d, dk),
        Matrix::from_parts(rows, d, dv),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are only accumulated for leaves with
    /// `requires_grad` and everything downstream of them.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            saved: vec![],
            requires_grad,
        });
        self.values.push(value);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.values[v.0]
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].data()[0]
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let (value, saved) = eval(&op, &self.values)?;
        let value = check_finite(value, op.name())?;
        let requires_grad = match op {
            Op::Detach(_) => false,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            saved,
            requires_grad,
        });
        self.values.push(value);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    /// `x + row` with `row` (1×n) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(x, row))
    }

    /// Scales column `j` of `x` by `row[j]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(x, row))
    }

    /// Divides column `j` of `x` by `row[j]`.
    pub fn div_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.push(Op::DivRow(x, row))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    /// Column norms as a 1×n row; fails on any norm below `min_norm`.
    pub fn col_norms(&mut self, x: Var, min_norm: f64) -> Result<Var> {
        self.push(Op::ColNorms { x, min_norm })
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Multi-head softmax self-attention over consecutive blocks of
    /// `seq_len` rows; `q`, `k`, `v` are already projected.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, n_heads: usize) -> Result<Var> {
        self.push(Op::Attention {
            q,
            k,
            v,
            seq_len,
            n_heads,
        })
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        self.push(Op::MeanPoolGroups { x, group })
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNormalize(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    pub fn frob_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::FrobNorm(a))
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.push(Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Detach(a))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.values[loss.0].shape() != (1, 1) {
            return Err(Error::Evaluation(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in vjp(&node.op, &self.values[i], &node.saved, &g, &self.values)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    /// Re-evaluates every recorded node from the leaves.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.values.len());
        for (node, recorded) in self.nodes.iter().zip(&self.values) {
            match node.op {
                Op::Leaf => values.push(recorded.clone()),
                _ => values.push(eval(&node.op, &values)?.0),
            }
        }
        Ok(values)
    }

    /// True when replaying reproduces every recorded value bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        Ok(self.replay()?.iter().zip(&self.values).all(|(a, b)| a.bit_eq(b)))
    }
}

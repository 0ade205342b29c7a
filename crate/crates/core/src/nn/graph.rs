//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every evaluation: parameters enter as
//! leaves via [`Graph::param`], inputs via [`Graph::constant`], and every op
//! records its parents. [`Graph::backward`] walks the node list in reverse
//! and returns a [`Gradients`] table indexed by [`Var`].
//!
//! Only nodes reachable from a parameter carry gradients, so frozen
//! networks (the teacher) cost a forward pass and nothing more.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::tensor::{ParamSet, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An op implemented outside this module.
///
/// `backward` receives the parent values, the forward output and the output
/// gradient and returns one optional gradient per parent.
pub trait CustomOp: fmt::Debug {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<usize>,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<usize>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    PairwiseAdd(Var, Var),
    Reshape(Var),
    RowNormalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    RowNorm(Var),
    RowDot(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Variables bound for every tensor of a [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .map(|i| self.vars[i].1)
            .map_err(|_| Error::input(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, Var)> {
        self.vars.iter()
    }

    /// View of the variables under `prefix`, prefix stripped.
    pub fn scoped(&self, prefix: &str) -> ParamVars {
        let vars = self
            .vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n[prefix.len()..].to_string(), *v))
            .collect();
        ParamVars { vars }
    }
}

/// Output gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes the gradient of every bound parameter into `params`
    /// (zeros for parameters the loss does not touch).
    pub fn write_into(&self, params: &mut ParamSet, vars: &ParamVars) {
        for (name, var) in vars.iter() {
            if let Some(t) = params.get_mut(name) {
                let g = match self.get(*var) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; t.len()],
                };
                t.grad = Some(g);
            }
        }
    }
}

fn matmul_into(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents m×k, k×n, m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

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

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds every tensor of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamSet) -> ParamVars {
        let vars = params
            .iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.grad = None;
                (n.clone(), self.param(t))
            })
            .collect();
        ParamVars { vars }
    }

    /// Binds `params` as constants (no gradients flow into them).
    pub fn bind_frozen(&mut self, params: &ParamSet) -> ParamVars {
        let vars = params
            .iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.grad = None;
                (n.clone(), self.constant(t))
            })
            .collect();
        ParamVars { vars }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::input(format!("{what}: shape {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::input(format!("matmul: {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            m,
            k,
            n,
            (self.value(a).data(), k as isize, 1),
            (self.value(b).data(), n as isize, 1),
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a` (r×c) plus the broadcast row `b` (1×c).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(b) != (1, c) {
            return Err(Error::input(format!(
                "add_row: {r}x{c} with {:?}",
                self.dims(b)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&bias).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, data), Op::AddRow(a, b), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data), Op::LogSoftmaxRows(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data), Op::SoftmaxRows(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(Error::input("layer_norm: gain/bias width mismatch"));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention applied independently
    /// within each segment of rows. `segments` holds row offsets
    /// `[0, t1, t1+t2, ..., total]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[usize], heads: usize) -> Result<Var> {
        let (rows, width) = self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        check_segments(segments, rows)?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::input(format!(
                "attention: width {width} not divisible by {heads} heads"
            )));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rows * width];
        let mut probs = Vec::new();
        for w in segments.windows(2) {
            let (s, e) = (w[0], w[1]);
            let t = e - s;
            for h in 0..heads {
                let off = h * dh;
                let base = probs.len();
                probs.resize(base + t * t, 0.0);
                let p = &mut probs[base..];
                for i in 0..t {
                    let qi = &qv[(s + i) * width + off..(s + i) * width + off + dh];
                    for j in 0..t {
                        let kj = &kv[(s + j) * width + off..(s + j) * width + off + dh];
                        p[i * t + j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut p[i * t..(i + 1) * t]);
                    let o = &mut out[(s + i) * width + off..(s + i) * width + off + dh];
                    for j in 0..t {
                        let pij = p[i * t + j];
                        let vj = &vv[(s + j) * width + off..(s + j) * width + off + dh];
                        o.iter_mut().zip(vj).for_each(|(a, b)| *a += pij * b);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(rows, width, out),
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean of the rows within each segment; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims(x);
        check_segments(segments, rows)?;
        let xv = self.value(x).data();
        let n = segments.len() - 1;
        let mut out = vec![0.0; n * c];
        for (s, w) in segments.windows(2).enumerate() {
            let inv = 1.0 / (w[1] - w[0]) as f64;
            for r in w[0]..w[1] {
                for j in 0..c {
                    out[s * c + j] += xv[r * c + j] * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(n, c, out),
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            rg,
        ))
    }

    /// Row lookup: output row `r` is `table[idx[r]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(table);
        if idx.is_empty() {
            return Err(Error::input("gather: empty index list"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::input(format!("gather: index {bad} out of range {n}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, out),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// All-pairs sum: row `i*B2 + j` equals `a[i] + b[j]`.
    pub fn pairwise_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n1, c) = self.dims(a);
        let (n2, c2) = self.dims(b);
        if c != c2 {
            return Err(Error::input("pairwise_add: width mismatch"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n1 * n2 * c];
        for i in 0..n1 {
            for j in 0..n2 {
                let o = &mut out[(i * n2 + j) * c..(i * n2 + j + 1) * c];
                for t in 0..c {
                    o[t] = av[i * c + t] + bv[j * c + t];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n1 * n2, c, out), Op::PairwiseAdd(a, b), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(Error::input(format!(
                "reshape: {} values into {rows}x{cols}",
                t.len()
            )));
        }
        let data = t.data().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(rows, cols, data), Op::Reshape(a), rg))
    }

    /// Each row divided by its Euclidean norm plus `eps`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let n = dot(row, row).sqrt();
            norms.push(n);
            let s = 1.0 / (n + eps);
            for j in 0..c {
                out[i * c + j] = row[j] * s;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, c, out), Op::RowNormalize { x, eps, norms }, rg)
    }

    /// Euclidean norm of each row, as an r×1 column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xv = self.value(x).data();
        let out = (0..r)
            .map(|i| {
                let row = &xv[i * c..(i + 1) * c];
                dot(row, row).sqrt()
            })
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, 1, out), Op::RowNorm(x), rg)
    }

    /// Row-wise inner products, as an r×1 column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "row_dot")?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..r)
            .map(|i| dot(&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, 1, out), Op::RowDot(a, b), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(Error::input(format!("slice_rows {start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(end - start, c, data), Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::input("concat_rows: no inputs"));
        };
        let c = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, cc) = self.dims(p);
            if cc != c {
                return Err(Error::input("concat_rows: width mismatch"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Records a node whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&p| self.rg(p));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::input("backward: loss must be a scalar"));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::numeric("backward: non-finite loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_into(m, n, k, (g, n as isize, 1), (bv, 1, n as isize), ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_into(k, m, n, (av, 1, k as isize), (g, n as isize, 1), gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, b) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Offset(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let x = av[i];
                        let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::Tanh(a) => {
                let ov = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - ov[i] * ov[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let ov = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * ov[i];
                    }
                }
            }
            Op::Ln(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                let ov = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..c {
                            ga[r * c + j] += grow[j] - ov[r * c + j].exp() * gs;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let ov = out.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let p = &ov[r * c..(r + 1) * c];
                        let inner = dot(grow, p);
                        for j in 0..c {
                            ga[r * c + j] += p[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            gg[j] += grow[j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for grow in g.chunks(c) {
                        gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let cf = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (r, grow) in g.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, xh);
                        let is = inv_std[r];
                        for j in 0..c {
                            gx[r * c + j] += is / cf * (cf * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads),
            Op::SegmentMean { x, segments } => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (s, w) in segments.windows(2).enumerate() {
                        let inv = 1.0 / (w[1] - w[0]) as f64;
                        for r in w[0]..w[1] {
                            for j in 0..c {
                                gx[r * c + j] += g[s * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                let c = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt[i * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::PairwiseAdd(a, b) => {
                let c = out.cols();
                let n1 = self.dims(*a).0;
                let n2 = self.dims(*b).0;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..n1 {
                        for j in 0..n2 {
                            for t in 0..c {
                                ga[i * c + t] += g[(i * n2 + j) * c + t];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..n1 {
                        for j in 0..n2 {
                            for t in 0..c {
                                gb[j * c + t] += g[(i * n2 + j) * c + t];
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::RowNormalize { x, eps, norms } => {
                let c = out.cols();
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let xr = &xv[r * c..(r + 1) * c];
                        let n = norms[r];
                        let s = n + eps;
                        let proj = if n > 0.0 { dot(xr, grow) / (s * s * n) } else { 0.0 };
                        for j in 0..c {
                            gx[r * c + j] += grow[j] / s - xr[j] * proj;
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x).data();
                let c = self.dims(*x).1;
                let ov = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..ov.len() {
                        if ov[r] > 0.0 {
                            for j in 0..c {
                                gx[r * c + j] += g[r] * xv[r * c + j] / ov[r];
                            }
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = self.dims(*a).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..g.len() {
                        for j in 0..c {
                            ga[r * c + j] += g[r] * bv[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..g.len() {
                        for j in 0..c {
                            gb[r * c + j] += g[r] * av[r * c + j];
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let off = start * c;
                    gx[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let parts = op.backward(&vals, out, g);
                for (&v, part) in inputs.iter().zip(parts) {
                    if let (Some(part), Some(gv)) = (part, self.acc(grads, v)) {
                        gv.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[usize],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, width) = self.dims(q);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; rows * width];
        let mut dk = vec![0.0; rows * width];
        let mut dv = vec![0.0; rows * width];
        let mut pbase = 0;
        let mut ds = Vec::new();
        for w in segments.windows(2) {
            let (s, e) = (w[0], w[1]);
            let t = e - s;
            for h in 0..heads {
                let off = h * dh;
                let p = &probs[pbase..pbase + t * t];
                pbase += t * t;
                ds.clear();
                ds.resize(t * t, 0.0);
                for i in 0..t {
                    let go = &g[(s + i) * width + off..(s + i) * width + off + dh];
                    for j in 0..t {
                        let vj = &vv[(s + j) * width + off..(s + j) * width + off + dh];
                        ds[i * t + j] = dot(go, vj);
                        let pij = p[i * t + j];
                        let dvj = &mut dv[(s + j) * width + off..(s + j) * width + off + dh];
                        dvj.iter_mut().zip(go).for_each(|(a, b)| *a += pij * b);
                    }
                    let row = &mut ds[i * t..(i + 1) * t];
                    let inner = dot(row, &p[i * t..(i + 1) * t]);
                    for j in 0..t {
                        row[j] = p[i * t + j] * (row[j] - inner) * scale;
                    }
                }
                for i in 0..t {
                    for j in 0..t {
                        let d = ds[i * t + j];
                        if d == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[(s + i) * width + off + c] += d * kv[(s + j) * width + off + c];
                            dk[(s + j) * width + off + c] += d * qv[(s + i) * width + off + c];
                        }
                    }
                }
            }
        }
        for (var, part) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                gv.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn check_segments(segments: &[usize], rows: usize) -> Result<()> {
    if segments.len() < 2 || segments[0] != 0 || *segments.last().unwrap() != rows {
        return Err(Error::input(format!(
            "segments must run from 0 to {rows}, got {segments:?}"
        )));
    }
    if segments.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::input("segments must be strictly increasing"));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Graph, Var) -> Var, x0: Tensor) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y).unwrap();
        let analytic = grads.get(x).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |d: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += d;
                let mut g = Graph::new();
                let x = g.constant(t);
                let y = build(&mut g, x);
                g.scalar_value(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-8);
            assert!(err < 1e-5, "coord {i}: analytic {} fd {fd}", analytic[i]);
        }
    }

    fn sample(r: usize, c: usize) -> Tensor {
        let data = (0..r * c).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        Tensor::matrix(r, c, data)
    }

    #[test]
    fn matmul_gradients() {
        let w = sample(3, 2);
        fd_check(
            move |g, x| {
                let w = g.constant(w.clone());
                let y = g.matmul(x, w).unwrap();
                let y = g.tanh(y);
                g.sum(y)
            },
            sample(4, 3),
        );
    }

    #[test]
    fn layer_norm_gradients() {
        fd_check(
            |g, x| {
                let gamma = g.constant(Tensor::row(vec![1.0, 0.5, -2.0, 0.3]));
                let beta = g.constant(Tensor::row(vec![0.1, 0.0, 0.2, -0.4]));
                let y = g.layer_norm(x, gamma, beta).unwrap();
                let y = g.gelu(y);
                let w = g.constant(sample(3, 4));
                let y = g.mul(y, w).unwrap();
                g.sum(y)
            },
            sample(3, 4),
        );
    }

    #[test]
    fn attention_gradients() {
        fd_check(
            |g, x| {
                let k = g.scale(x, 0.7);
                let v = g.tanh(x);
                let y = g.attention(x, k, v, &[0, 2, 5], 2).unwrap();
                let w = g.constant(sample(5, 4));
                let y = g.mul(y, w).unwrap();
                g.sum(y)
            },
            sample(5, 4),
        );
    }

    #[test]
    fn row_ops_gradients() {
        fd_check(
            |g, x| {
                let n = g.row_normalize(x, 1e-12);
                let m = g.row_norm(x);
                let d = g.row_dot(n, x).unwrap();
                let p = g.pairwise_add(x, n).unwrap();
                let p = g.tanh(p);
                let s = g.segment_mean(p, &[0, 4, 9]).unwrap();
                let ls = g.log_softmax_rows(s);
                let a = g.sum(m);
                let b = g.sum(d);
                let c = g.mean(ls);
                let ab = g.add(a, b).unwrap();
                g.add(ab, c).unwrap()
            },
            sample(3, 3),
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(sample(4, 5));
        let p = g.softmax_rows(x);
        for r in 0..4 {
            let s: f64 = g.value(p).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(sample(2, 2));
        let b = g.constant(sample(2, 2));
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::new();
        let a = g.constant(sample(2, 3));
        let b = g.constant(sample(2, 3));
        assert!(g.matmul(a, b).is_err());
        assert!(g.gather(a, &[5]).is_err());
        assert!(g.segment_mean(a, &[0, 1]).is_err());
    }
}

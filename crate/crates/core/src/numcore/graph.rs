//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node ids are already a topological
//! order and `backward` is a single reverse sweep.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::{Error, Result};

/// Floor inside the log of mixture probabilities.
pub const MIXTURE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sparse observations for [`Graph::mixture_loglik`].
///
/// Row `b` of `theta` is a document observed at time `doc_time[b]`; entries
/// are `(b, term, count)` triples.
#[derive(Clone, Debug, Default)]
pub struct MixtureBatch {
    pub doc_time: Vec<usize>,
    pub entries: Vec<(usize, usize, f64)>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    BiasAdd(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    Concat(Vec<usize>, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Dropout(usize, Rc<Vec<f64>>),
    Sum(usize),
    SliceCols(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    DiagEmbed(usize),
    Reshape(usize),
    Mixture {
        theta: usize,
        beta: usize,
        num_times: usize,
        batch: Rc<MixtureBatch>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn binary_shape_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn matrix_shape(t: &Tensor) -> Vec<usize> {
    vec![t.rows(), t.cols()]
}

/// Stride layout for a reduction along `axis` of a matrix view:
/// (number of independent groups, group length, element stride, group stride fn).
fn axis_groups(t: &Tensor, axis: usize) -> Result<(usize, usize, usize, usize)> {
    let (r, c) = (t.rows(), t.cols());
    match axis {
        // groups are rows: start = g*c, stride 1
        1 => Ok((r, c, 1, c)),
        // groups are columns: start = g, stride c
        0 => Ok((c, r, c, 1)),
        _ => Err(Error::shape("softmax", format!("axis {axis} not in {{0,1}}"))),
    }
}

fn softmax_groups(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (groups, len, stride, gstride) = axis_groups(x, axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for g in 0..groups {
        let base = g * gstride;
        let idx = |i: usize| base + i * stride;
        let max = (0..len)
            .map(|i| src[idx(i)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..len {
            z += (src[idx(i)] - max).exp();
        }
        let lz = z.ln();
        for i in 0..len {
            let shifted = src[idx(i)] - max;
            out[idx(i)] = if log { shifted - lz } else { shifted.exp() / z };
        }
    }
    Tensor::new(x.shape(), out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Constant input.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable input.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a.0]);
        self.push(out, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        binary_shape_check("add", &x, &y)?;
        let out = x.zip_map(&y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        binary_shape_check("sub", &x, &y)?;
        let out = x.zip_map(&y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        binary_shape_check("mul", &x, &y)?;
        let out = x.zip_map(&y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a.0))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Transpose(a.0), rg)
    }

    /// `a (n x m) + b (1 x m)` broadcast over rows. The only broadcast rule.
    pub fn bias_add(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if y.rows() != 1 || y.cols() != x.cols() {
            return Err(Error::shape(
                "bias_add",
                format!("{:?} + {:?}", x.shape(), y.shape()),
            ));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + y.data()[i % c])
            .collect();
        let out = Tensor::new(&matrix_shape(&x), data)?;
        Ok(self.push(out, Op::BiasAdd(a.0, b.0), self.rg(&[a.0, b.0])))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a.0, lo, hi))
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = match axis {
            0 => {
                let c = vals[0].cols();
                if vals.iter().any(|v| v.cols() != c) {
                    return Err(Error::shape(
                        "concat",
                        format!(
                            "column counts differ: {:?}",
                            vals.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()
                        ),
                    ));
                }
                let rows = vals.iter().map(|v| v.rows()).sum::<usize>();
                let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                Tensor::new(&[rows, c], data)?
            }
            1 => {
                let r = vals[0].rows();
                if vals.iter().any(|v| v.rows() != r) {
                    return Err(Error::shape(
                        "concat",
                        format!(
                            "row counts differ: {:?}",
                            vals.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()
                        ),
                    ));
                }
                let cols = vals.iter().map(|v| v.cols()).sum::<usize>();
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for v in &vals {
                        data.extend_from_slice(v.row_slice(i));
                    }
                }
                Tensor::new(&[r, cols], data)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis}"))),
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Concat(ids, axis), rg))
    }

    /// Softmax along `axis` of the matrix view, with max shift.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_groups(&self.value(a), axis, false)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Softmax(a.0, axis), rg))
    }

    pub fn log_softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_groups(&self.value(a), axis, true)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::LogSoftmax(a.0, axis), rg))
    }

    /// Inverted dropout. Identity when `training` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let x = self.value(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor::new(
            x.shape(),
            x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Dropout(a.0, Rc::new(mask)), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a.0]);
        self.push(out, Op::Sum(a.0), rg)
    }

    /// Columns `start..end` of the matrix view.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", x.shape()),
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let out = Tensor::new(&[x.rows(), end - start], data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::SliceCols(a.0, start), rg))
    }

    /// `out[i] = a[idx[i]]` over rows of the matrix view.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {:?}", x.shape()),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            data.extend_from_slice(x.row_slice(i));
        }
        let out = Tensor::new(&[idx.len(), x.cols()], data)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::GatherRows(a.0, Rc::new(idx.to_vec())), rg))
    }

    /// Square diagonal matrix from a vector.
    pub fn diag_embed(&self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len();
        let mut out = Tensor::zeros(&[n, n]);
        for (i, &v) in x.data().iter().enumerate() {
            out.set(i, i, v);
        }
        let rg = self.rg(&[a.0]);
        self.push(out, Op::DiagEmbed(a.0), rg)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(a)).clone().reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Marginal log-likelihood of sparse term counts under a topic mixture:
    /// `sum_(b,v,c) c * ln(sum_k theta[b,k] * beta[k*T + t_b, v] + eps)`.
    ///
    /// `beta` rows are indexed `k * num_times + t`.
    pub fn mixture_loglik(
        &self,
        theta: Var,
        beta: Var,
        num_times: usize,
        batch: Rc<MixtureBatch>,
    ) -> Result<Var> {
        let th = self.value(theta);
        let be = self.value(beta);
        let (nb, k) = (th.rows(), th.cols());
        if be.rows() != k * num_times || batch.doc_time.len() != nb {
            return Err(Error::shape(
                "mixture_loglik",
                format!(
                    "theta {:?}, beta {:?}, T={num_times}, {} doc times",
                    th.shape(),
                    be.shape(),
                    batch.doc_time.len()
                ),
            ));
        }
        let v = be.cols();
        let mut probs = Vec::with_capacity(batch.entries.len());
        let mut total = 0.0;
        for &(b, term, count) in &batch.entries {
            if b >= nb || term >= v || batch.doc_time[b] >= num_times {
                return Err(Error::shape(
                    "mixture_loglik",
                    format!("entry ({b}, {term}) outside theta {nb} x beta {v}"),
                ));
            }
            let t = batch.doc_time[b];
            let p: f64 = (0..k)
                .map(|j| th.get(b, j) * be.get(j * num_times + t, term))
                .sum();
            total += count * (p + MIXTURE_EPS).ln();
            probs.push(p);
        }
        let rg = self.rg(&[theta.0, beta.0]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Mixture {
                theta: theta.0,
                beta: beta.0,
                num_times,
                batch,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", root_val.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));

        let acc = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=root.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            let y = &nodes[id].value;
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, gy.map(|x| -x));
                    acc(&mut grads, *a, gy.clone());
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, gy.zip_map(xb, |g, v| g * v));
                    acc(&mut grads, *b, gy.zip_map(xa, |g, v| g * v));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gy.map(|g| g * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, gy.clone()),
                Op::MatMul(a, b) => {
                    let (xa, xb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (xa.rows(), xa.cols(), xb.cols());
                    // Accumulates straight into an existing gradient when there is one.
                    if nodes[*a].requires_grad {
                        let slot = grads[*a].get_or_insert_with(|| Tensor::zeros(xa.shape()));
                        gemm(m, n, k, gy.data(), false, xb.data(), true, slot.data_mut(), 1.0);
                    }
                    if nodes[*b].requires_grad {
                        let slot = grads[*b].get_or_insert_with(|| Tensor::zeros(xb.shape()));
                        gemm(k, m, n, xa.data(), true, gy.data(), false, slot.data_mut(), 1.0);
                    }
                }
                Op::Transpose(a) => {
                    let g = gy.transpose().reshape(nodes[*a].value.shape())?;
                    acc(&mut grads, *a, g);
                }
                Op::BiasAdd(a, b) => {
                    let c = gy.cols();
                    let mut db = vec![0.0; c];
                    for r in 0..gy.rows() {
                        for (d, g) in db.iter_mut().zip(gy.row_slice(r)) {
                            *d += g;
                        }
                    }
                    acc(&mut grads, *b, Tensor::new(nodes[*b].value.shape(), db)?);
                    acc(&mut grads, *a, gy.reshape(nodes[*a].value.shape())?);
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    acc(
                        &mut grads,
                        *a,
                        gy.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 }),
                    );
                }
                Op::Tanh(a) => acc(&mut grads, *a, gy.zip_map(y, |g, t| g * (1.0 - t * t))),
                Op::Sigmoid(a) => acc(&mut grads, *a, gy.zip_map(y, |g, s| g * s * (1.0 - s))),
                Op::Exp(a) => acc(&mut grads, *a, gy.zip_map(y, |g, e| g * e)),
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    acc(&mut grads, *a, gy.zip_map(x, |g, v| g / v));
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[*a].value;
                    acc(
                        &mut grads,
                        *a,
                        gy.zip_map(x, |g, v| if v >= *lo && v <= *hi { g } else { 0.0 }),
                    );
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let shape = nodes[p].value.shape().to_vec();
                        let (pr, pc) = (nodes[p].value.rows(), nodes[p].value.cols());
                        let g = if *axis == 0 {
                            let c = gy.cols();
                            let d = gy.data()[offset * c..(offset + pr) * c].to_vec();
                            offset += pr;
                            d
                        } else {
                            let mut d = Vec::with_capacity(pr * pc);
                            for r in 0..pr {
                                d.extend_from_slice(&gy.row_slice(r)[offset..offset + pc]);
                            }
                            offset += pc;
                            d
                        };
                        acc(&mut grads, p, Tensor::new(&shape, g)?);
                    }
                }
                Op::Softmax(a, axis) => {
                    let (groups, len, stride, gstride) = axis_groups(y, *axis)?;
                    let mut dx = vec![0.0; y.len()];
                    for g in 0..groups {
                        let base = g * gstride;
                        let dot: f64 = (0..len)
                            .map(|i| gy.data()[base + i * stride] * y.data()[base + i * stride])
                            .sum();
                        for i in 0..len {
                            let j = base + i * stride;
                            dx[j] = y.data()[j] * (gy.data()[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape(), dx)?);
                }
                Op::LogSoftmax(a, axis) => {
                    let (groups, len, stride, gstride) = axis_groups(y, *axis)?;
                    let mut dx = vec![0.0; y.len()];
                    for g in 0..groups {
                        let base = g * gstride;
                        let total: f64 = (0..len).map(|i| gy.data()[base + i * stride]).sum();
                        for i in 0..len {
                            let j = base + i * stride;
                            dx[j] = gy.data()[j] - y.data()[j].exp() * total;
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape(), dx)?);
                }
                Op::Dropout(a, mask) => {
                    let d = gy.data().iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                    acc(&mut grads, *a, Tensor::new(y.shape(), d)?);
                }
                Op::Sum(a) => {
                    let g = gy.item();
                    acc(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), g));
                }
                Op::SliceCols(a, start) => {
                    let x = &nodes[*a].value;
                    let mut d = Tensor::zeros(x.shape());
                    let w = gy.cols();
                    for r in 0..gy.rows() {
                        d.row_slice_mut(r)[*start..*start + w].copy_from_slice(gy.row_slice(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::GatherRows(a, idx) => {
                    let x = &nodes[*a].value;
                    let mut d = Tensor::zeros(x.shape());
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, g) in d.row_slice_mut(src).iter_mut().zip(gy.row_slice(i)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::DiagEmbed(a) => {
                    let x = &nodes[*a].value;
                    let n = x.len();
                    let d = (0..n).map(|i| gy.get(i, i)).collect();
                    acc(&mut grads, *a, Tensor::new(x.shape(), d)?);
                }
                Op::Reshape(a) => acc(&mut grads, *a, gy.reshape(nodes[*a].value.shape())?),
                Op::Mixture {
                    theta,
                    beta,
                    num_times,
                    batch,
                    probs,
                } => {
                    let g = gy.item();
                    let th = &nodes[*theta].value;
                    let be = &nodes[*beta].value;
                    let k = th.cols();
                    let mut dth = Tensor::zeros(th.shape());
                    let mut dbe = Tensor::zeros(be.shape());
                    for (&(b, term, count), &p) in batch.entries.iter().zip(probs) {
                        let t = batch.doc_time[b];
                        let w = g * count / (p + MIXTURE_EPS);
                        for j in 0..k {
                            let row = j * num_times + t;
                            let bv = be.get(row, term);
                            let tv = th.get(b, j);
                            dth.data_mut()[b * k + j] += w * bv;
                            let cols = be.cols();
                            dbe.data_mut()[row * cols + term] += w * tv;
                        }
                    }
                    acc(&mut grads, *theta, dth);
                    acc(&mut grads, *beta, dbe);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let s = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clips_negatives() {
        let g = Graph::new();
        let x = g.constant(Tensor::row(vec![-1.0, 2.0]));
        assert_eq!(g.value(g.relu(x)).data(), &[0.0, 2.0]);
    }

    #[test]
    fn square_derivative() {
        let g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]"), "{err}");
        assert!(g.matmul(a, a).unwrap_err().to_string().contains("matmul"));
        assert!(g.bias_add(a, b).is_err());
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let g = Graph::new();
        let mut rng = rand::rng();
        let x = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        use rand::SeedableRng;
        let g = Graph::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(Tensor::full(&[1, 1000], 1.0));
        let y = g.dropout(x, 0.1, true, &mut rng).unwrap();
        let v = g.value(y);
        assert!(v.data().iter().all(|&e| e == 0.0 || (e - 1.0 / 0.9).abs() < 1e-15));
        let dropped = v.data().iter().filter(|&&e| e == 0.0).count();
        assert!((50..150).contains(&dropped), "{dropped}");
    }

    #[test]
    fn column_softmax_normalizes_columns() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap());
        let s = g.value(g.softmax(x, 0).unwrap());
        assert_abs_diff_eq!(s.get(0, 0) + s.get(1, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 1) + s.get(1, 1), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn log_softmax_is_finite_for_extreme_inputs() {
        let g = Graph::new();
        let x = g.constant(Tensor::row(vec![-1e4, 0.0, 1e4]));
        let l = g.value(g.log_softmax(x, 1).unwrap());
        assert!(l.all_finite());
        assert_abs_diff_eq!(l.data()[2], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gather_scatter_accumulates_duplicates() {
        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let y = g.gather_rows(x, &[1, 1, 0]).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}

//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every model component builds its forward pass on a [`Graph`]; a single
//! [`Graph::backward`] call then yields gradients for every leaf. The op set is
//! deliberately small: the pipeline only needs what is listed in [`Op`].

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    /// `[.., C] + [C]`, bias repeated over rows.
    AddRow(Var, Var),
    /// `[.., C] * [C]`, per-channel factor repeated over rows.
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// `bound * tanh(x)`, kept strictly inside `(-bound, bound)` after rounding.
    BoundedTanh { x: Var, bound: f64 },
    Square(Var),
    /// Square root with the derivative at 0 taken as 0.
    Sqrt(Var),
    Sum(Var),
    /// Mean over one axis; the axis is removed from the shape.
    MeanAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, normalized: Tensor, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    /// Concatenation along the first axis.
    ConcatRows(Vec<Var>),
    /// Concatenation along the last axis.
    ConcatCols(Vec<Var>),
    /// Gather along the first axis.
    SelectRows { x: Var, rows: Vec<usize> },
    /// Hard clamp; gradient passes only where `lo <= x <= hi`.
    Clamp { x: Var, lo: f64, hi: f64 },
    /// Linear interpolation of rows of `frames` at 1-based positions `idx`.
    Interp { frames: Var, idx: Var, lo: Vec<usize>, hi: Vec<usize>, frac: Vec<f64> },
    /// Min-max rescaling of a vector to [0, 1]; a constant vector maps to 0.
    MinMax { x: Var, argmin: usize, argmax: usize, degenerate: bool },
}

impl Op {
    fn any_input(&self, mut f: impl FnMut(Var) -> bool) -> bool {
        use Op::*;
        match self {
            Leaf => false,
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) | MatMul(a, b) => f(*a) || f(*b),
            Scale(x, _) | Transpose(x) | Reshape(x) | Sigmoid(x) | Tanh(x) | Square(x) | Sqrt(x) | Sum(x)
            | Softmax(x) | LogSoftmax(x) => f(*x),
            BoundedTanh { x, .. }
            | MeanAxis { x, .. }
            | SumAxis { x, .. }
            | L2NormalizeRows { x, .. }
            | SelectRows { x, .. }
            | Clamp { x, .. }
            | MinMax { x, .. } => f(*x),
            LayerNorm { x, gain, bias, .. } => f(*x) || f(*gain) || f(*bias),
            ConcatRows(parts) | ConcatCols(parts) => parts.iter().any(|&p| f(p)),
            Interp { frames, idx, .. } => f(*frames) || f(*idx),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any leaf (as opposed to a constant) feeds this node.
    tracked: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients for every node of a graph, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; zeros if `v` did not influence it.
    pub fn get(&self, v: Var, shape: &[usize]) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Axis split `[outer, axis_len, inner]` of a shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
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
        let tracked = op.any_input(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Input node. Gradients are reported for every leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never needs a gradient; work feeding only from constants is skipped in
    /// the backward pass.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    fn row_op(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, r) = (self.value(a), self.value(b));
        let c = x.last_dim();
        if r.shape() != [c] {
            return Err(Error::dim(op, x.shape(), r.shape()));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r.data()[i % c]))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.row_op(x, bias, "add_row", |a, b| a + b)?;
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn mul_row(&mut self, x: Var, factor: Var) -> Result<Var> {
        let v = self.row_op(x, factor, "mul_row", |a, b| a * b)?;
        Ok(self.push(v, Op::MulRow(x, factor)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = numerics::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = numerics::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = numerics::sigmoid(self.value(a));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = numerics::tanh(self.value(a));
        self.push(v, Op::Tanh(a))
    }

    pub fn bounded_tanh(&mut self, a: Var, bound: f64) -> Var {
        let inside = bound.next_down();
        let v = self.value(a).map(|x| (bound * x.tanh()).clamp(-inside, inside));
        self.push(v, Op::BoundedTanh { x: a, bound })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0).sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn axis_reduce(&self, x: Var, axis: usize, op: &'static str) -> Result<(Tensor, usize)> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim(op, t.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += t.data()[base + i];
                }
            }
        }
        Ok((Tensor::new(removed_axis(t.shape(), axis), out)?, len))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (v, _) = self.axis_reduce(x, axis, "sum_axis")?;
        Ok(self.push(v, Op::SumAxis { x, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (v, len) = self.axis_reduce(x, axis, "mean_axis")?;
        let v = v.scale(1.0 / len as f64);
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = numerics::softmax(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = numerics::log_softmax(self.value(a));
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (v, cache) =
            numerics::layer_norm_cached(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: cache.normalized,
                inv_std: cache.inv_std,
            },
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (v, norms) = numerics::l2_normalize_rows(self.value(x))?;
        Ok(self.push(v, Op::L2NormalizeRows { x, norms }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let tail: Vec<usize> = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::dim("concat_rows", first.shape(), t.shape()));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let inner = self.shape(parts[0]).to_vec();
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend(self.shape(p));
            if self.shape(p) != inner.as_slice() {
                return Err(Error::dim("stack", &inner, self.shape(p)));
            }
            lifted.push(self.reshape(p, &s)?);
        }
        self.concat_rows(&lifted)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), s));
            }
            width += self.value(p).last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let stride = t.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    op: "select_rows",
                    index: r as i64,
                    lo: 0,
                    hi: n as i64 - 1,
                });
            }
            data.extend_from_slice(&t.data()[r * stride..(r + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::SelectRows { x, rows: rows.to_vec() }))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.push(v, Op::Clamp { x, lo, hi })
    }

    /// Samples rows of `frames` (`[T, F]`) at 1-based fractional positions `idx` in `[1, T]`.
    ///
    /// Row `i` is `(1 - g) * frames[lo] + g * frames[lo + 1]` with `g` the fractional
    /// part. At an integer position the right neighbour is paired with `g = 0`, so the
    /// value equals that frame exactly while the derivative w.r.t. the position is the
    /// right-hand slope; at `T` the pair is `(T - 1, T)` with `g = 1`.
    pub fn interp(&mut self, frames: Var, idx: Var) -> Result<Var> {
        let f = self.value(frames);
        if f.rank() != 2 {
            return Err(Error::dim("interp", f.shape(), &[0, 0]));
        }
        let (t, width) = (f.shape()[0], f.shape()[1]);
        let positions = self.value(idx).data().to_vec();
        let mut lo = Vec::with_capacity(positions.len());
        let mut hi = Vec::with_capacity(positions.len());
        let mut frac = Vec::with_capacity(positions.len());
        let mut data = Vec::with_capacity(positions.len() * width);
        for &p in &positions {
            if !(p >= 1.0 && p <= t as f64) {
                return Err(Error::Index {
                    op: "interp",
                    index: p.floor() as i64,
                    lo: 1,
                    hi: t as i64,
                });
            }
            let (l, g) = if t == 1 {
                (1, 0.0)
            } else if p >= t as f64 {
                (t - 1, 1.0)
            } else {
                let fl = p.floor();
                (fl as usize, p - fl)
            };
            let h = (l + 1).min(t);
            let (rl, rh) = (f.row(l - 1), f.row(h - 1));
            data.extend(rl.iter().zip(rh).map(|(a, b)| (1.0 - g) * a + g * b));
            lo.push(l - 1);
            hi.push(h - 1);
            frac.push(g);
        }
        let v = Tensor::new(vec![positions.len(), width], data)?;
        Ok(self.push(v, Op::Interp { frames, idx, lo, hi, frac }))
    }

    /// Min-max rescaling to [0, 1]. A constant (or numerically constant) input maps to zeros.
    pub fn min_max(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in t.data().iter().enumerate() {
            if v < t.data()[argmin] {
                argmin = i;
            }
            if v > t.data()[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (t.data()[argmin], t.data()[argmax]);
        let range = hi - lo;
        let degenerate = !(range > 1e-12 * hi.abs().max(lo.abs()));
        let v = if degenerate {
            Tensor::zeros(t.shape())
        } else {
            t.map(|a| (a - lo) / range)
        };
        self.push(v, Op::MinMax { x, argmin, argmax, degenerate })
    }

    /// Gradients of scalar `output` w.r.t. every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a.0], g.mul(val(*b)).expect("shape"));
                accumulate(&mut grads[b.0], g.mul(val(*a)).expect("shape"));
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
            Op::AddRow(x, b) => {
                let c = g.last_dim();
                let mut gb = vec![0.0; c];
                for (k, &v) in g.data().iter().enumerate() {
                    gb[k % c] += v;
                }
                accumulate(&mut grads[x.0], g.clone());
                accumulate(&mut grads[b.0], Tensor::vector(gb));
            }
            Op::MulRow(x, f) => {
                let (xv, fv) = (val(*x), val(*f));
                let c = g.last_dim();
                let mut gf = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for (k, &gv) in g.data().iter().enumerate() {
                    gf[k % c] += gv * xv.data()[k];
                    gx[k] = gv * fv.data()[k % c];
                }
                accumulate(&mut grads[x.0], Tensor::new(g.shape().to_vec(), gx).expect("shape"));
                accumulate(&mut grads[f.0], Tensor::vector(gf));
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].tracked {
                    accumulate(&mut grads[a.0], numerics::matmul_nt(g, val(*b)).expect("shape"));
                }
                if self.nodes[b.0].tracked {
                    accumulate(&mut grads[b.0], numerics::matmul_tn(val(*a), g).expect("shape"));
                }
            }
            Op::Transpose(a) => {
                accumulate(&mut grads[a.0], numerics::transpose(g).expect("matrix"));
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.reshape(val(*a).shape()).expect("shape"));
            }
            Op::Sigmoid(a) => {
                let gx = g.zip_map(&node.value, "sigmoid", |gv, s| gv * s * (1.0 - s)).expect("shape");
                accumulate(&mut grads[a.0], gx);
            }
            Op::Tanh(a) => {
                let gx = g.zip_map(&node.value, "tanh", |gv, t| gv * (1.0 - t * t)).expect("shape");
                accumulate(&mut grads[a.0], gx);
            }
            Op::BoundedTanh { x, bound } => {
                let gx = g
                    .zip_map(val(*x), "bounded_tanh", |gv, a| {
                        let t = a.tanh();
                        gv * bound * (1.0 - t * t)
                    })
                    .expect("shape");
                accumulate(&mut grads[x.0], gx);
            }
            Op::Square(a) => {
                let gx = g.zip_map(val(*a), "square", |gv, x| 2.0 * gv * x).expect("shape");
                accumulate(&mut grads[a.0], gx);
            }
            Op::Sqrt(a) => {
                let gx = g
                    .zip_map(&node.value, "sqrt", |gv, r| if r > 0.0 { gv * 0.5 / r } else { 0.0 })
                    .expect("shape");
                accumulate(&mut grads[a.0], gx);
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a.0], Tensor::filled(val(*a).shape(), g.data()[0]));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let shape = val(*x).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let s = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / len as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for k in 0..inner {
                            gx[(o * len + a) * inner + k] = s * g.data()[o * inner + k];
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(shape.to_vec(), gx).expect("shape"));
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let c = s.last_dim();
                let mut gx = vec![0.0; s.len()];
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        gx[r * c + j] = sr[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], Tensor::new(s.shape().to_vec(), gx).expect("shape"));
            }
            Op::LogSoftmax(a) => {
                let ls = &node.value;
                let c = ls.last_dim();
                let mut gx = vec![0.0; ls.len()];
                for r in 0..ls.rows() {
                    let (lr, gr) = (ls.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[r * c + j] = gr[j] - lr[j].exp() * total;
                    }
                }
                accumulate(&mut grads[a.0], Tensor::new(ls.shape().to_vec(), gx).expect("shape"));
            }
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let c = g.last_dim();
                let gain_v = val(*gain).data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..g.rows() {
                    let (gr, nr) = (g.row(r), normalized.row(r));
                    let mut dn = vec![0.0; c];
                    for j in 0..c {
                        gg[j] += gr[j] * nr[j];
                        gb[j] += gr[j];
                        dn[j] = gr[j] * gain_v[j];
                    }
                    let mean_dn = dn.iter().sum::<f64>() / c as f64;
                    let mean_dn_n = dn.iter().zip(nr).map(|(d, n)| d * n).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[r * c + j] = inv_std[r] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(g.shape().to_vec(), gx).expect("shape"));
                accumulate(&mut grads[gain.0], Tensor::vector(gg));
                accumulate(&mut grads[bias.0], Tensor::vector(gb));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        gx[r * c + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), gx).expect("shape"));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let t = val(*p);
                    let slice = g.data()[offset..offset + t.len()].to_vec();
                    offset += t.len();
                    accumulate(&mut grads[p.0], Tensor::new(t.shape().to_vec(), slice).expect("shape"));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut col = 0;
                for p in parts {
                    let t = val(*p);
                    let w = t.last_dim();
                    let mut gp = Vec::with_capacity(t.len());
                    for r in 0..rows {
                        gp.extend_from_slice(&g.row(r)[col..col + w]);
                    }
                    col += w;
                    accumulate(&mut grads[p.0], Tensor::new(t.shape().to_vec(), gp).expect("shape"));
                }
            }
            Op::SelectRows { x, rows } => {
                let t = val(*x);
                let stride = t.len() / t.shape()[0];
                let mut gx = vec![0.0; t.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..stride {
                        gx[r * stride + j] += g.data()[k * stride + j];
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(t.shape().to_vec(), gx).expect("shape"));
            }
            Op::Clamp { x, lo, hi } => {
                let gx = g
                    .zip_map(val(*x), "clamp", |gv, a| if a >= *lo && a <= *hi { gv } else { 0.0 })
                    .expect("shape");
                accumulate(&mut grads[x.0], gx);
            }
            Op::Interp { frames, idx, lo, hi, frac } => {
                let f = val(*frames);
                let width = f.last_dim();
                let mut gf = vec![0.0; f.len()];
                let mut gi = vec![0.0; lo.len()];
                for k in 0..lo.len() {
                    let gr = g.row(k);
                    let (rl, rh) = (f.row(lo[k]), f.row(hi[k]));
                    let mut d = 0.0;
                    for j in 0..width {
                        gf[lo[k] * width + j] += (1.0 - frac[k]) * gr[j];
                        gf[hi[k] * width + j] += frac[k] * gr[j];
                        d += gr[j] * (rh[j] - rl[j]);
                    }
                    gi[k] = d;
                }
                accumulate(&mut grads[frames.0], Tensor::new(f.shape().to_vec(), gf).expect("shape"));
                let ishape = val(*idx).shape().to_vec();
                accumulate(&mut grads[idx.0], Tensor::new(ishape, gi).expect("shape"));
            }
            Op::MinMax { x, argmin, argmax, degenerate } => {
                let t = val(*x);
                if *degenerate {
                    accumulate(&mut grads[x.0], Tensor::zeros(t.shape()));
                } else {
                    let (lo, hi) = (t.data()[*argmin], t.data()[*argmax]);
                    let range = hi - lo;
                    let mut gx: Vec<f64> = g.data().iter().map(|gv| gv / range).collect();
                    // y_i = (x_i - lo) / range; lo and hi depend on x[argmin], x[argmax].
                    let mut d_lo = 0.0;
                    let mut d_hi = 0.0;
                    for (k, &gv) in g.data().iter().enumerate() {
                        let y = node.value.data()[k];
                        d_lo += gv * (y - 1.0) / range;
                        d_hi += -gv * y / range;
                    }
                    gx[*argmin] += d_lo;
                    gx[*argmax] += d_hi;
                    accumulate(&mut grads[x.0], Tensor::new(t.shape().to_vec(), gx).expect("shape"));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interp_integer_and_midpoint() {
        let mut g = Graph::new();
        let frames = g.leaf(Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 8.0]]).unwrap());
        let idx = g.leaf(Tensor::vector(vec![1.0, 2.5, 3.0]));
        let out = g.interp(frames, idx).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 1.0, 3.0, 5.5, 4.0, 8.0]);
    }

    #[test]
    fn interp_rejects_out_of_range() {
        let mut g = Graph::new();
        let frames = g.leaf(Tensor::zeros(&[4, 2]));
        let idx = g.leaf(Tensor::vector(vec![0.5]));
        assert!(matches!(g.interp(frames, idx), Err(Error::Index { .. })));
    }

    #[test]
    fn min_max_degenerate_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(&[5], 2.0));
        let y = g.min_max(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(x, &[5]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sqrt_at_zero_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 4.0]));
        let y = g.sqrt(x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x, &[2]).data(), &[0.0, 0.25]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.leaf(Tensor::scalar(5.0));
        let y = g.square(a);
        let grads = g.backward(y);
        assert_eq!(grads.get(a, &[1]).data(), &[4.0]);
        assert!(grads.try_get(b).is_none());
    }
}

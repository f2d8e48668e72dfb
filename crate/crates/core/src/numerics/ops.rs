//! Plain forward kernels shared by the tape and the public API.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    if n > 0 {
        for (arow, orow) in a.data().chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)) {
            for (&aip, brow) in arow.iter().zip(b.data().chunks_exact(n)) {
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a b^T` without materializing the transpose; same summation order as
/// `matmul(a, transpose(b))`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (n, k2) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for (arow, orow) in ad.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
        // Four independent accumulators per pass; each output keeps a plain left-to-right sum.
        let mut j = 0;
        while j + 4 <= n {
            let rows = [&bd[j * k..], &bd[(j + 1) * k..], &bd[(j + 2) * k..], &bd[(j + 3) * k..]];
            let mut acc = [0.0; 4];
            for (p, &x) in arow.iter().enumerate() {
                for q in 0..4 {
                    acc[q] += x * rows[q][p];
                }
            }
            orow[j..j + 4].copy_from_slice(&acc);
            j += 4;
        }
        for (jj, o) in orow.iter_mut().enumerate().skip(j) {
            let brow = &bd[jj * k..(jj + 1) * k];
            *o = arow.iter().zip(brow).fold(0.0, |acc, (x, y)| acc + x * y);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T b` without materializing the transpose; same summation order as
/// `matmul(transpose(a), b)`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (m2, n) = require_matrix("matmul", b)?;
    if m != m2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let brow = &b.data()[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = require_matrix("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Normalized activations and per-row inverse std, kept for the backward pass.
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_cached(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 {
        return Err(Error::param("eps", "must be positive"));
    }
    let c = x.last_dim();
    if gain.shape() != [c] {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    if bias.shape() != [c] {
        return Err(Error::dim("layer_norm", x.shape(), bias.shape()));
    }
    let rows = x.rows();
    let mut normalized = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let n = (row[j] - mean) * is;
            normalized[r * c + j] = n;
            out[r * c + j] = n * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache {
            normalized: Tensor::new(x.shape().to_vec(), normalized)?,
            inv_std,
        },
    ))
}

/// Normalizes over the last axis, then applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_cached(x, gain, bias, eps).map(|(y, _)| y)
}

fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        softmax_slice(x.row(r), &mut out[r * c..(r + 1) * c]);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub fn log_softmax(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        log_softmax_slice(x.row(r), &mut out[r * c..(r + 1) * c]);
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_sim", a.shape(), b.shape()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::degenerate("cosine_sim", "zero-norm argument"));
    }
    Ok((a.dot(b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// Scales each row (last axis) to unit L2 norm.
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let c = x.last_dim();
    let mut out = vec![0.0; x.len()];
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::degenerate("l2_normalize", format!("row {r} has norm {n}")));
        }
        for j in 0..c {
            out[r * c + j] = row[j] / n;
        }
        norms.push(n);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, norms))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

//! Motion Aggregation Block: gated fusion of the dynamic and global streams.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, LAYER_NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// `[3C, C]`, consuming `[X_D * X_G, X_D, X_G]`.
    pub w_g: Tensor,
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w_g: Var,
    pub gain: Var,
    pub bias: Var,
}

impl GateParams {
    /// Zero gate weights (gate = 0.5 everywhere) and an identity layer norm affine.
    pub fn new(channels: usize) -> Self {
        Self {
            w_g: Tensor::zeros(&[3 * channels, channels]),
            gain: Tensor::filled(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.w_g, &self.gain, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_g, &mut self.gain, &mut self.bias]
    }

    pub fn register(&self, g: &mut Graph) -> GateVars {
        GateVars {
            w_g: g.leaf(self.w_g.clone()),
            gain: g.leaf(self.gain.clone()),
            bias: g.leaf(self.bias.clone()),
        }
    }
}

/// Pre-sigmoid gate logits, `[N, C]`, for position-flattened streams.
fn gate_logits(g: &mut Graph, xd: Var, xg: Var, w_g: Var) -> Result<Var> {
    let prod = g.mul(xd, xg)?;
    let cat = g.concat_cols(&[prod, xd, xg])?;
    g.matmul(cat, w_g)
}

/// `LayerNorm(X_D + sigmoid(W_g [X_D * X_G, X_D, X_G]) * X_G)`, position-wise over
/// `T' x H x W` with a channel-wise gate.
pub fn fuse_forward(g: &mut Graph, x_dynamic: Var, x_global: Var, p: &GateVars) -> Result<Var> {
    let shape = g.shape(x_dynamic).to_vec();
    if g.shape(x_global) != shape.as_slice() {
        return Err(Error::dim("fuse", &shape, g.shape(x_global)));
    }
    let c = *shape.last().expect("non-empty shape");
    if g.shape(p.w_g) != [3 * c, c] {
        return Err(Error::dim("fuse", &shape, g.shape(p.w_g)));
    }
    let n = g.value(x_dynamic).len() / c;
    let xd = g.reshape(x_dynamic, &[n, c])?;
    let xg = g.reshape(x_global, &[n, c])?;
    let logits = gate_logits(g, xd, xg, p.w_g)?;
    let gate = g.sigmoid(logits);
    let gated = g.mul(gate, xg)?;
    let mixed = g.add(xd, gated)?;
    let normed = g.layer_norm(mixed, p.gain, p.bias, LAYER_NORM_EPS)?;
    g.reshape(normed, &shape)
}

pub fn fuse(x_dynamic: &Tensor, x_global: &Tensor, p: &GateParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let xd = g.leaf(x_dynamic.clone());
    let xg = g.leaf(x_global.clone());
    let pv = p.register(&mut g);
    let y = fuse_forward(&mut g, xd, xg, &pv)?;
    Ok(g.value(y).clone())
}

/// Gate activations `sigmoid(W_g [..])` as a `[N, C]` tensor, for inspection.
pub fn gate_values(x_dynamic: &Tensor, x_global: &Tensor, p: &GateParams) -> Result<Tensor> {
    let c = p.channels();
    let n = x_dynamic.len() / c;
    let mut g = Graph::new();
    let xd = g.leaf(x_dynamic.reshape(&[n, c])?);
    let xg = g.leaf(x_global.reshape(&[n, c])?);
    let w = g.leaf(p.w_g.clone());
    let logits = gate_logits(&mut g, xd, xg, w)?;
    let gate = g.sigmoid(logits);
    Ok(g.value(gate).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, DEFAULT_STEP};
    use crate::numerics::{layer_norm, RngStream};

    fn ln(x: &Tensor, c: usize) -> Tensor {
        let flat = x.reshape(&[x.len() / c, c]).unwrap();
        layer_norm(&flat, &Tensor::filled(&[c], 1.0), &Tensor::zeros(&[c]), LAYER_NORM_EPS)
            .unwrap()
            .reshape(x.shape())
            .unwrap()
    }

    #[test]
    fn zero_context_reduces_to_layer_norm() {
        let mut s = RngStream::new(1, 0).generator();
        let xd = s.gaussian(&[4, 2, 2, 6], 1.0);
        let mut p = GateParams::new(6);
        p.w_g = s.gaussian(&[18, 6], 1.0);
        let out = fuse(&xd, &Tensor::zeros(xd.shape()), &p).unwrap();
        let want = ln(&xd, 6);
        assert!(out.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn zero_gate_is_half() {
        let mut s = RngStream::new(2, 0).generator();
        let xd = s.gaussian(&[4, 1, 2, 5], 1.0);
        let xg = s.gaussian(&[4, 1, 2, 5], 1.0);
        let out = fuse(&xd, &xg, &GateParams::new(5)).unwrap();
        let want = ln(&xd.add(&xg.scale(0.5)).unwrap(), 5);
        assert!(out.sub(&want).unwrap().max_abs() < 1e-12);
        assert_eq!(out.shape(), xd.shape());
        let gates = gate_values(&xd, &xg, &GateParams::new(5)).unwrap();
        assert!(gates.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shape_mismatch() {
        let p = GateParams::new(3);
        assert!(matches!(
            fuse(&Tensor::zeros(&[2, 1, 1, 3]), &Tensor::zeros(&[4, 1, 1, 3]), &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fuse_gradcheck() {
        let mut s = RngStream::new(3, 0).generator();
        let params = vec![
            s.gaussian(&[2, 1, 2, 4], 1.0),
            s.gaussian(&[2, 1, 2, 4], 1.0),
            s.gaussian(&[12, 4], 0.5),
            s.gaussian(&[4], 1.0),
            s.gaussian(&[4], 1.0),
            s.gaussian(&[2, 1, 2, 4], 1.0),
        ];
        let r = check_gradient(
            "fuse",
            |g, v| {
                let p = GateVars { w_g: v[2], gain: v[3], bias: v[4] };
                let y = fuse_forward(g, v[0], v[1], &p)?;
                let w = g.mul(y, v[5])?;
                Ok(g.sum(w))
            },
            &params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn residual_keeps_dynamic_gradient_under_saturated_gate() {
        let mut s = RngStream::new(4, 0).generator();
        let xd = s.gaussian(&[2, 1, 1, 4], 1.0).map(|v| v.abs() + 0.1);
        let xg = s.gaussian(&[2, 1, 1, 4], 1.0).map(|v| v.abs() + 0.1);
        let mut p = GateParams::new(4);
        // Positive inputs and large negative weights push every gate to ~0.
        p.w_g = Tensor::filled(&[12, 4], -40.0);
        assert!(gate_values(&xd, &xg, &p).unwrap().max_abs() < 1e-10);
        let w = s.gaussian(&[2, 1, 1, 4], 1.0);
        let mut g = Graph::new();
        let (xdv, xgv) = (g.leaf(xd), g.leaf(xg));
        let pv = p.register(&mut g);
        let y = fuse_forward(&mut g, xdv, xgv, &pv).unwrap();
        let wv = g.leaf(w);
        let yw = g.mul(y, wv).unwrap();
        let loss = g.sum(yw);
        let grads = g.backward(loss);
        assert!(grads.get(xdv, &[2, 1, 1, 4]).max_abs() > 1e-3);
    }

    #[test]
    fn gate_monotone_in_logit() {
        // One channel, one position: raising the X_G weight row raises the logit.
        let xd = Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap();
        let xg = Tensor::new(vec![1, 1, 1, 1], vec![1.3]).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..10 {
            let mut p = GateParams::new(1);
            p.w_g.data_mut()[2] = -2.0 + 0.5 * k as f64;
            let gate = gate_values(&xd, &xg, &p).unwrap().data()[0];
            let contribution = (gate * xg.data()[0]).abs();
            assert!(contribution > prev);
            prev = contribution;
        }
    }
}

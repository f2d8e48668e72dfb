//! Frozen-backbone simulator and the shared Dual Adapter.
//!
//! Videos are synthesized directly in feature space: every frame is a class
//! prototype plus Gaussian noise, and designated motion frames are displaced
//! by a random vector of fixed norm. The [`DualAdapter`] is the only trainable
//! piece here and is shared by the visual and textual token streams.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Sampler, Tensor};

/// Per-video feature block `X` of shape `[T, H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    x: Tensor,
}

impl FrameFeatures {
    pub fn new(x: Tensor) -> Result<Self> {
        let [t, _, _, _] = x.shape() else {
            return Err(Error::dim("FrameFeatures", x.shape(), &[0, 0, 0, 0]));
        };
        if *t < 4 || t % 2 != 0 {
            return Err(Error::param("T", format!("frame count {t} must be even and >= 4")));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: "FrameFeatures".into(),
            });
        }
        Ok(Self { x })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.x
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[3]
    }

    /// Spatial positions per frame (`H * W`).
    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideoSpec {
    /// 0-based class index into the prototype matrix.
    pub class_id: usize,
    /// 1-based frame numbers that receive a motion displacement.
    pub motion_frames: Vec<usize>,
    pub motion_amplitude: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

/// Synthesizes one video. Draw order is fixed (noise, then one direction per motion
/// frame) so the amplitude only rescales the displacement for a given stream.
pub fn generate_video(
    spec: &SyntheticVideoSpec,
    class_prototypes: &Tensor,
    dims: VideoDims,
    rng: RngStream,
) -> Result<FrameFeatures> {
    let [k, c] = class_prototypes.shape() else {
        return Err(Error::dim("generate_video", class_prototypes.shape(), &[0, 0]));
    };
    let (k, c) = (*k, *c);
    if spec.class_id >= k {
        return Err(Error::Index {
            op: "generate_video",
            index: spec.class_id as i64,
            lo: 0,
            hi: k as i64 - 1,
        });
    }
    if spec.noise_sigma < 0.0 || spec.motion_amplitude < 0.0 {
        return Err(Error::param("spec", "noise_sigma and motion_amplitude must be >= 0"));
    }
    let t = dims.frames;
    if let Some(&bad) = spec.motion_frames.iter().find(|&&f| f < 1 || f > t) {
        return Err(Error::Index {
            op: "generate_video",
            index: bad as i64,
            lo: 1,
            hi: t as i64,
        });
    }
    let hw = dims.height * dims.width;
    let proto = class_prototypes.row(spec.class_id);
    let mut sampler = rng.generator();
    let mut data = Vec::with_capacity(t * hw * c);
    for _ in 0..t * hw {
        for &p in proto {
            data.push(p + spec.noise_sigma * sampler.normal());
        }
    }
    for &f in &spec.motion_frames {
        let d = sampler.sphere(c, 1.0);
        for pos in 0..hw {
            let base = ((f - 1) * hw + pos) * c;
            for (j, dj) in d.iter().enumerate() {
                data[base + j] += spec.motion_amplitude * dj;
            }
        }
    }
    FrameFeatures::new(Tensor::new(vec![t, dims.height, dims.width, c], data)?)
}

/// Residual self-attention followed by a residual bottleneck MLP over `[N, D]` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAdapter {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub down: Tensor,
    pub up: Tensor,
}

/// Graph handles for one registration of a [`DualAdapter`].
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub down: Var,
    pub up: Var,
}

impl DualAdapter {
    pub fn bottleneck_width(dim: usize) -> usize {
        (dim / 4).max(1)
    }

    pub fn zeros(dim: usize) -> Self {
        let b = Self::bottleneck_width(dim);
        Self {
            query: Tensor::zeros(&[dim, dim]),
            key: Tensor::zeros(&[dim, dim]),
            value: Tensor::zeros(&[dim, dim]),
            output: Tensor::zeros(&[dim, dim]),
            down: Tensor::zeros(&[dim, b]),
            up: Tensor::zeros(&[b, dim]),
        }
    }

    /// Random input-side projections, zero output and up projections: the map starts
    /// as the identity but every weight receives gradient.
    pub fn identity_init(dim: usize, sampler: &mut Sampler) -> Self {
        let b = Self::bottleneck_width(dim);
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            query: sampler.gaussian(&[dim, dim], std),
            key: sampler.gaussian(&[dim, dim], std),
            value: sampler.gaussian(&[dim, dim], std),
            output: Tensor::zeros(&[dim, dim]),
            down: sampler.gaussian(&[dim, b], std),
            up: Tensor::zeros(&[b, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.shape()[0]
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.query, &self.key, &self.value, &self.output, &self.down, &self.up]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.down,
            &mut self.up,
        ]
    }

    pub fn register(&self, g: &mut Graph) -> AdapterVars {
        AdapterVars {
            query: g.leaf(self.query.clone()),
            key: g.leaf(self.key.clone()),
            value: g.leaf(self.value.clone()),
            output: g.leaf(self.output.clone()),
            down: g.leaf(self.down.clone()),
            up: g.leaf(self.up.clone()),
        }
    }
}

/// `h = x + softmax(x Wq (x Wk)^T / sqrt(D)) x Wv Wo`, then `h + tanh(h Wdown) Wup`.
pub fn adapter_forward(g: &mut Graph, w: &AdapterVars, tokens: Var) -> Result<Var> {
    let d = g.shape(w.query)[0];
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[1] != d {
        return Err(Error::dim("apply_dual_adapter", &shape, &[shape[0], d]));
    }
    let q = g.matmul(tokens, w.query)?;
    let k = g.matmul(tokens, w.key)?;
    let v = g.matmul(tokens, w.value)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scores);
    let mixed = g.matmul(attn, v)?;
    let projected = g.matmul(mixed, w.output)?;
    let h = g.add(tokens, projected)?;
    let down = g.matmul(h, w.down)?;
    let act = g.tanh(down);
    let up = g.matmul(act, w.up)?;
    g.add(h, up)
}

/// Applies the adapter to a `[N, D]` token block; the input is not modified.
pub fn apply_dual_adapter(adapter: &DualAdapter, tokens: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = adapter.register(&mut g);
    let x = g.leaf(tokens.clone());
    let y = adapter_forward(&mut g, &w, x)?;
    Ok(g.value(y).clone())
}

/// Mean over every leading axis of `[.., C]` features, then `[1, C] x [C, D]`.
pub fn pool_forward(g: &mut Graph, features: Var, projection: Var) -> Result<Var> {
    let c = *g.shape(features).last().expect("non-empty shape");
    let n = g.value(features).len() / c;
    let flat = g.reshape(features, &[n, c])?;
    let mean = g.mean_axis(flat, 0)?;
    let row = g.reshape(mean, &[1, c])?;
    let out = g.matmul(row, projection)?;
    let d = g.shape(projection)[1];
    g.reshape(out, &[d])
}

/// Produces the video embedding `e^V` from fused features `[T', H, W, C]`.
pub fn pool_video_embedding(fused: &Tensor, projection: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(fused.clone());
    let p = g.leaf(projection.clone());
    let y = pool_forward(&mut g, x, p)?;
    Ok(g.value(y).clone())
}

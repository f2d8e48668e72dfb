//! Motion Separation Module.
//!
//! Per-frame embeddings yield two motion statistics (squared deviation from
//! the clip mean, and a central-difference magnitude). Their clip-normalized
//! combination is the saliency `m`, which a pair of small MLPs maps to bounded
//! temporal offsets. Global anchors sit at odd frames `2i - 1`, dynamic anchors
//! at even frames `2i` (1-based); each anchor is shifted by its offset, clamped
//! to `[1, T]`, and the clip is resampled there by linear interpolation.

use crate::autograd::{Graph, Var};
use crate::backbone_sim::FrameFeatures;
use crate::error::{Error, Result};
use crate::numerics::{Sampler, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.75;
pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_MAX_OFFSET: f64 = 1.5;
pub const OFFSET_HIDDEN: usize = 8;
/// Distance from an integer sampling position or a clamp bound treated as a kink.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyProfile {
    pub e: Tensor,
    pub mu: Tensor,
    pub v: Tensor,
    pub c: Tensor,
    pub v_norm: Tensor,
    pub c_norm: Tensor,
    pub m: Tensor,
}

/// `1 -> hidden -> 1` MLP with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ScalarMlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ScalarMlp {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[1, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
            b2: Tensor::zeros(&[1]),
        }
    }

    /// Random hidden layer, zero output layer: outputs 0 until trained.
    pub fn zero_output_init(hidden: usize, sampler: &mut Sampler) -> Self {
        Self {
            w1: sampler.gaussian(&[1, hidden], 1.0),
            b1: sampler.gaussian(&[hidden], 0.5),
            ..Self::zeros(hidden)
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn register(&self, g: &mut Graph) -> ScalarMlpVars {
        ScalarMlpVars {
            w1: g.leaf(self.w1.clone()),
            b1: g.leaf(self.b1.clone()),
            w2: g.leaf(self.w2.clone()),
            b2: g.leaf(self.b2.clone()),
        }
    }
}

fn scalar_mlp_forward(g: &mut Graph, w: &ScalarMlpVars, input: Var) -> Result<Var> {
    let n = g.value(input).len();
    let col = g.reshape(input, &[n, 1])?;
    let h = g.matmul(col, w.w1)?;
    let h = g.add_row(h, w.b1)?;
    let h = g.tanh(h);
    let o = g.matmul(h, w.w2)?;
    let o = g.add_row(o, w.b2)?;
    g.reshape(o, &[n])
}

/// Offset generators for the global and dynamic anchors, bounded by `max_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetHead {
    pub global: ScalarMlp,
    pub dynamic: ScalarMlp,
    pub max_offset: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OffsetHeadVars {
    pub global: ScalarMlpVars,
    pub dynamic: ScalarMlpVars,
    pub max_offset: f64,
}

impl OffsetHead {
    pub fn zeros(max_offset: f64) -> Self {
        Self {
            global: ScalarMlp::zeros(OFFSET_HIDDEN),
            dynamic: ScalarMlp::zeros(OFFSET_HIDDEN),
            max_offset,
        }
    }

    pub fn zero_output_init(max_offset: f64, sampler: &mut Sampler) -> Self {
        Self {
            global: ScalarMlp::zero_output_init(OFFSET_HIDDEN, sampler),
            dynamic: ScalarMlp::zero_output_init(OFFSET_HIDDEN, sampler),
            max_offset,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.global.tensors().into_iter().chain(self.dynamic.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.global
            .tensors_mut()
            .into_iter()
            .chain(self.dynamic.tensors_mut())
            .collect()
    }

    pub fn register(&self, g: &mut Graph) -> OffsetHeadVars {
        OffsetHeadVars {
            global: self.global.register(g),
            dynamic: self.dynamic.register(g),
            max_offset: self.max_offset,
        }
    }
}

/// `e^(t)`: spatial mean of each frame, `[T, H, W, C] -> [T, C]`.
pub fn frame_embed_forward(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [t, h, w, c] = s[..] else {
        return Err(Error::dim("frame_embed", &s, &[0, 0, 0, 0]));
    };
    let grouped = g.reshape(x, &[t, h * w, c])?;
    g.mean_axis(grouped, 1)
}

pub fn frame_embed(x: &FrameFeatures) -> Tensor {
    let mut g = Graph::new();
    let xv = g.leaf(x.tensor().clone());
    let e = frame_embed_forward(&mut g, xv).expect("FrameFeatures is rank 4");
    g.value(e).clone()
}

/// Graph handles for the motion statistics.
#[derive(Debug, Clone, Copy)]
pub struct MotionStatVars {
    pub mu: Var,
    pub v: Var,
    pub c: Var,
}

/// Central-difference neighbour pairs (0-based) and weights for `T` frames.
fn central_pairs(t: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut next = Vec::with_capacity(t);
    let mut prev = Vec::with_capacity(t);
    let mut weight = Vec::with_capacity(t);
    for i in 0..t {
        if i == 0 {
            next.push(1);
            prev.push(0);
            weight.push(1.0);
        } else if i == t - 1 {
            next.push(t - 1);
            prev.push(t - 2);
            weight.push(1.0);
        } else {
            next.push(i + 1);
            prev.push(i - 1);
            weight.push(0.5);
        }
    }
    (next, prev, weight)
}

/// `v^(t) = ||e^(t) - mu||^2` and the one-sided/halved central difference `c^(t)`.
pub fn motion_stats_forward(g: &mut Graph, e: Var) -> Result<MotionStatVars> {
    let shape = g.shape(e).to_vec();
    if shape.len() != 2 {
        return Err(Error::dim("motion_stats", &shape, &[0, 0]));
    }
    let t = shape[0];
    if t < 2 {
        return Err(Error::degenerate("motion_stats", format!("clip has {t} frame(s), need >= 2")));
    }
    // Shifted by the first frame so identical frames give an exact zero deviation.
    let d = shape[1];
    let first = g.select_rows(e, &[0])?;
    let first = g.reshape(first, &[d])?;
    let neg_first = g.scale(first, -1.0);
    let shifted = g.add_row(e, neg_first)?;
    let shift_mean = g.mean_axis(shifted, 0)?;
    let mu = g.add(first, shift_mean)?;
    let neg_mean = g.scale(shift_mean, -1.0);
    let centered = g.add_row(shifted, neg_mean)?;
    let sq = g.square(centered);
    let v = g.sum_axis(sq, 1)?;

    let (next, prev, weight) = central_pairs(t);
    let a = g.select_rows(e, &next)?;
    let b = g.select_rows(e, &prev)?;
    let d = g.sub(a, b)?;
    let dsq = g.square(d);
    let dn = g.sum_axis(dsq, 1)?;
    let norm = g.sqrt(dn);
    let w = g.leaf(Tensor::vector(weight));
    let c = g.mul(norm, w)?;
    Ok(MotionStatVars { mu, v, c })
}

/// Profile with `v` and `c` filled; normalized fields and `m` are left at zero.
pub fn motion_stats(e: &Tensor) -> Result<SaliencyProfile> {
    let mut g = Graph::new();
    let ev = g.leaf(e.clone());
    let s = motion_stats_forward(&mut g, ev)?;
    let t = e.shape()[0];
    Ok(SaliencyProfile {
        e: e.clone(),
        mu: g.value(s.mu).clone(),
        v: g.value(s.v).clone(),
        c: g.value(s.c).clone(),
        v_norm: Tensor::zeros(&[t]),
        c_norm: Tensor::zeros(&[t]),
        m: Tensor::zeros(&[t]),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SaliencyVars {
    pub v_norm: Var,
    pub c_norm: Var,
    pub m: Var,
}

pub fn saliency_forward(g: &mut Graph, v: Var, c: Var, alpha: f64, beta: f64) -> Result<SaliencyVars> {
    if alpha < 0.0 || beta < 0.0 {
        return Err(Error::param("alpha/beta", "saliency weights must be >= 0"));
    }
    let v_norm = g.min_max(v);
    let c_norm = g.min_max(c);
    let a = g.scale(v_norm, alpha);
    let b = g.scale(c_norm, beta);
    let m = g.add(a, b)?;
    Ok(SaliencyVars { v_norm, c_norm, m })
}

/// `m = alpha * minmax(v) + beta * minmax(c)`; a constant statistic normalizes to 0.
pub fn saliency(v: &Tensor, c: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vv, cv) = (g.leaf(v.clone()), g.leaf(c.clone()));
    let s = saliency_forward(&mut g, vv, cv, alpha, beta)?;
    Ok(g.value(s.m).clone())
}

/// Full saliency profile of one clip.
pub fn saliency_profile(x: &FrameFeatures, alpha: f64, beta: f64) -> Result<SaliencyProfile> {
    let e = frame_embed(x);
    let mut p = motion_stats(&e)?;
    let mut g = Graph::new();
    let (vv, cv) = (g.leaf(p.v.clone()), g.leaf(p.c.clone()));
    let s = saliency_forward(&mut g, vv, cv, alpha, beta)?;
    p.v_norm = g.value(s.v_norm).clone();
    p.c_norm = g.value(s.c_norm).clone();
    p.m = g.value(s.m).clone();
    Ok(p)
}

fn bounded_offset(g: &mut Graph, w: &ScalarMlpVars, m: Var, max_offset: f64) -> Result<Var> {
    let raw = scalar_mlp_forward(g, w, m)?;
    Ok(g.bounded_tanh(raw, max_offset))
}

/// `Delta^(t) = delta * tanh(f(m^(t)))` for both heads, over all `T` frames.
pub fn offsets_forward(g: &mut Graph, head: &OffsetHeadVars, m: Var) -> Result<(Var, Var)> {
    let dg = bounded_offset(g, &head.global, m, head.max_offset)?;
    let dd = bounded_offset(g, &head.dynamic, m, head.max_offset)?;
    Ok((dg, dd))
}

pub fn compute_offsets(m: &Tensor, head: &OffsetHead) -> Result<(Tensor, Tensor)> {
    if !(head.max_offset > 0.0) {
        return Err(Error::param("max_offset", "must be > 0"));
    }
    let mut g = Graph::new();
    let hv = head.register(&mut g);
    let mv = g.leaf(m.clone());
    let (dg, dd) = offsets_forward(&mut g, &hv, mv)?;
    Ok((g.value(dg).clone(), g.value(dd).clone()))
}

/// 1-based global anchors `2i - 1` and dynamic anchors `2i`.
pub fn anchors(t: usize) -> (Vec<usize>, Vec<usize>) {
    let half = t / 2;
    ((1..=half).map(|i| 2 * i - 1).collect(), (1..=half).map(|i| 2 * i).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamPair {
    pub x_global: Tensor,
    pub x_dynamic: Tensor,
    pub idx_global: Tensor,
    pub idx_dynamic: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct StreamVars {
    pub x_global: Var,
    pub x_dynamic: Var,
    pub idx_global: Var,
    pub idx_dynamic: Var,
    /// Unclamped `anchor + offset` positions, for kink detection.
    pub raw_global: Var,
    pub raw_dynamic: Var,
}

fn sample_one(g: &mut Graph, frames: Var, offsets: Var, anchor: &[usize], t: usize) -> Result<(Var, Var, Var)> {
    let rows: Vec<usize> = anchor.iter().map(|a| a - 1).collect();
    let at_anchor = g.select_rows(offsets, &rows)?;
    let base = g.leaf(Tensor::vector(anchor.iter().map(|&a| a as f64).collect()));
    let raw = g.add(base, at_anchor)?;
    let idx = g.clamp(raw, 1.0, t as f64);
    let sampled = g.interp(frames, idx)?;
    Ok((sampled, idx, raw))
}

/// Resamples `[T, H, W, C]` features at the offset anchors.
pub fn sample_streams_forward(g: &mut Graph, x: Var, delta_global: Var, delta_dynamic: Var) -> Result<StreamVars> {
    let s = g.shape(x).to_vec();
    let [t, h, w, c] = s[..] else {
        return Err(Error::dim("sample_streams", &s, &[0, 0, 0, 0]));
    };
    if t % 2 != 0 {
        return Err(Error::param("T", format!("frame count {t} must be even")));
    }
    for d in [delta_global, delta_dynamic] {
        if g.shape(d) != [t] {
            return Err(Error::dim("sample_streams", g.shape(d), &[t]));
        }
    }
    let frames = g.reshape(x, &[t, h * w * c])?;
    let (ga, da) = anchors(t);
    let (xg, ig, rg) = sample_one(g, frames, delta_global, &ga, t)?;
    let (xd, id, rd) = sample_one(g, frames, delta_dynamic, &da, t)?;
    let out = [t / 2, h, w, c];
    Ok(StreamVars {
        x_global: g.reshape(xg, &out)?,
        x_dynamic: g.reshape(xd, &out)?,
        idx_global: ig,
        idx_dynamic: id,
        raw_global: rg,
        raw_dynamic: rd,
    })
}

/// Fixed odd/even split without offsets: a plain frame gather.
pub fn fixed_split_forward(g: &mut Graph, x: Var) -> Result<StreamVars> {
    let s = g.shape(x).to_vec();
    let [t, h, w, c] = s[..] else {
        return Err(Error::dim("fixed_split", &s, &[0, 0, 0, 0]));
    };
    if t % 2 != 0 {
        return Err(Error::param("T", format!("frame count {t} must be even")));
    }
    let frames = g.reshape(x, &[t, h * w * c])?;
    let (ga, da) = anchors(t);
    let out = [t / 2, h, w, c];
    let rows_g: Vec<usize> = ga.iter().map(|a| a - 1).collect();
    let rows_d: Vec<usize> = da.iter().map(|a| a - 1).collect();
    let xg = g.select_rows(frames, &rows_g)?;
    let xd = g.select_rows(frames, &rows_d)?;
    let ig = g.leaf(Tensor::vector(ga.iter().map(|&a| a as f64).collect()));
    let id = g.leaf(Tensor::vector(da.iter().map(|&a| a as f64).collect()));
    Ok(StreamVars {
        x_global: g.reshape(xg, &out)?,
        x_dynamic: g.reshape(xd, &out)?,
        idx_global: ig,
        idx_dynamic: id,
        raw_global: ig,
        raw_dynamic: id,
    })
}

pub fn sample_streams(x: &FrameFeatures, delta_global: &Tensor, delta_dynamic: &Tensor) -> Result<StreamPair> {
    let mut g = Graph::new();
    let xv = g.leaf(x.tensor().clone());
    let dg = g.leaf(delta_global.clone());
    let dd = g.leaf(delta_dynamic.clone());
    let s = sample_streams_forward(&mut g, xv, dg, dd)?;
    Ok(StreamPair {
        x_global: g.value(s.x_global).clone(),
        x_dynamic: g.value(s.x_dynamic).clone(),
        idx_global: g.value(s.idx_global).clone(),
        idx_dynamic: g.value(s.idx_dynamic).clone(),
    })
}

/// True if any raw position is within [`KINK_MARGIN`] of an integer or of a clamp
/// bound, or lies outside `[1, T]`.
pub fn near_kink(raw_positions: &[f64], t: usize) -> bool {
    raw_positions.iter().any(|&p| {
        let frac = p - p.floor();
        frac < KINK_MARGIN
            || frac > 1.0 - KINK_MARGIN
            || p < 1.0 + KINK_MARGIN
            || p > t as f64 - KINK_MARGIN
    })
}

/// Graph handles for a full MSM pass.
#[derive(Debug, Clone, Copy)]
pub struct MsmVars {
    pub v: Var,
    pub c: Var,
    pub saliency: SaliencyVars,
    pub delta_global: Var,
    pub delta_dynamic: Var,
    pub streams: StreamVars,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsmSettings {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MsmSettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

/// Frame embedding, statistics, saliency, offsets and stream sampling in one pass.
pub fn msm_forward(g: &mut Graph, head: &OffsetHeadVars, x: Var, settings: MsmSettings) -> Result<MsmVars> {
    let e = frame_embed_forward(g, x)?;
    let stats = motion_stats_forward(g, e)?;
    let sal = saliency_forward(g, stats.v, stats.c, settings.alpha, settings.beta)?;
    let (dg, dd) = offsets_forward(g, head, sal.m)?;
    let streams = sample_streams_forward(g, x, dg, dd)?;
    Ok(MsmVars {
        v: stats.v,
        c: stats.c,
        saliency: sal,
        delta_global: dg,
        delta_dynamic: dd,
        streams,
    })
}

/// One row of the per-frame MSM inspection export.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FrameInspection {
    pub t: usize,
    pub v: f64,
    pub c: f64,
    pub v_norm: f64,
    pub c_norm: f64,
    pub m: f64,
    pub delta_global: f64,
    pub delta_dynamic: f64,
    /// Sampling position when frame `t` is a global anchor.
    pub idx_global: Option<f64>,
    /// Sampling position when frame `t` is a dynamic anchor.
    pub idx_dynamic: Option<f64>,
}

pub fn inspect(x: &FrameFeatures, head: &OffsetHead, settings: MsmSettings) -> Result<Vec<FrameInspection>> {
    let mut g = Graph::new();
    let hv = head.register(&mut g);
    let xv = g.leaf(x.tensor().clone());
    let out = msm_forward(&mut g, &hv, xv, settings)?;
    let t = x.frames();
    let val = |v: Var, i: usize| g.value(v).data()[i];
    Ok((0..t)
        .map(|i| FrameInspection {
            t: i + 1,
            v: val(out.v, i),
            c: val(out.c, i),
            v_norm: val(out.saliency.v_norm, i),
            c_norm: val(out.saliency.c_norm, i),
            m: val(out.saliency.m, i),
            delta_global: val(out.delta_global, i),
            delta_dynamic: val(out.delta_dynamic, i),
            idx_global: (i % 2 == 0).then(|| val(out.streams.idx_global, i / 2)),
            idx_dynamic: (i % 2 == 1).then(|| val(out.streams.idx_dynamic, i / 2)),
        })
        .collect())
}

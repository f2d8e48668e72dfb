//! Registry of gradient checks run by the `gradcheck` subcommand.
//!
//! Every case reduces its op's output to a scalar with a random weighting, so
//! each output element contributes a distinct, O(1) gradient. Cases whose draw
//! lands within a kink margin (interp at an integer position, a clamp bound, a
//! min/max tie) decline the draw and are re-sampled.

use super::{check_gradient, GradReport, DEFAULT_STEP};
use crate::autograd::{Graph, Var};
use crate::backbone_sim::{adapter_forward, apply_dual_adapter, pool_forward, AdapterVars, DualAdapter};
use crate::error::{Error, Result};
use crate::harness::config::{Architecture, ExperimentConfig};
use crate::harness::dataset::build_dataset;
use crate::harness::model::{video_forward, Model, ModelVars};
use crate::losses::{
    clip_consistency_forward, complement_targets, contrastive_forward, objective_forward, one_hot,
    projection_forward, soft_cross_entropy, LossSettings, ObjectiveInputs,
};
use crate::mab::{fuse_forward, GateVars};
use crate::msm::{
    anchors, compute_offsets, frame_embed_forward, motion_stats_forward, near_kink, offsets_forward,
    saliency_forward, saliency_profile, sample_streams_forward, OffsetHead, OffsetHeadVars, ScalarMlpVars,
    DEFAULT_ALPHA, DEFAULT_BETA,
};
use crate::numerics::{RngStream, Sampler, Tensor, LAYER_NORM_EPS};
use crate::backbone_sim::FrameFeatures;
use crate::text_space::{cosine_matrix, encode_forward, PromptVars};

/// Draws per seed before a case is declared unsatisfiable.
pub const MAX_ATTEMPTS: u64 = 64;
/// Minimum spacing between the extreme values of a min-max input and their runners-up.
pub const TIE_MARGIN: f64 = 1e-3;

/// One draw: `Ok(None)` means the draw sits near a kink and should be re-sampled.
pub type Case = fn(&mut Sampler) -> Result<Option<GradReport>>;

fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.leaf(w.reshape(g.shape(y))?);
    let prod = g.mul(y, wv)?;
    Ok(g.sum(prod))
}

fn weights_for(s: &mut Sampler, len: usize) -> Tensor {
    s.gaussian(&[len], 1.0)
}

fn check<F>(name: &str, f: F, params: &[Tensor]) -> Result<Option<GradReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_gradient(name, f, params, DEFAULT_STEP).map(Some)
}

fn has_tie(xs: &[f64]) -> bool {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    n >= 2 && (s[1] - s[0] < TIE_MARGIN || s[n - 1] - s[n - 2] < TIE_MARGIN)
}

fn case_elementwise(s: &mut Sampler) -> Result<Option<GradReport>> {
    let a = s.gaussian(&[3, 4], 1.0);
    let b = s.gaussian(&[3, 4], 1.0);
    let w = weights_for(s, 12);
    check(
        "add/sub/mul/scale",
        move |g, p| {
            let x = g.add(p[0], p[1])?;
            let y = g.sub(p[0], p[1])?;
            let z = g.mul(x, y)?;
            let z = g.scale(z, 0.7);
            let z = g.mul(z, p[1])?;
            weighted(g, z, &w)
        },
        &[a, b],
    )
}

fn case_matmul(s: &mut Sampler) -> Result<Option<GradReport>> {
    let a = s.gaussian(&[5, 7], 1.0);
    let b = s.gaussian(&[7, 3], 1.0);
    let w = weights_for(s, 15);
    check(
        "matmul",
        move |g, p| {
            let y = g.matmul(p[0], p[1])?;
            weighted(g, y, &w)
        },
        &[a, b],
    )
}

fn case_shape_ops(s: &mut Sampler) -> Result<Option<GradReport>> {
    let a = s.gaussian(&[4, 3], 1.0);
    let b = s.gaussian(&[2, 3], 1.0);
    let bias = s.gaussian(&[3], 1.0);
    let w = weights_for(s, 3 * 4);
    check(
        "transpose/reshape/concat/select",
        move |g, p| {
            let cat = g.concat_rows(&[p[0], p[1]])?;
            let picked = g.select_rows(cat, &[5, 0, 2, 2])?;
            let shifted = g.add_row(picked, p[2])?;
            let scaled = g.mul_row(shifted, p[2])?;
            let t = g.transpose(scaled)?;
            let side = g.concat_cols(&[t, t])?;
            let r = g.reshape(side, &[4, 6])?;
            let m = g.mean_axis(r, 1)?;
            let m2 = g.sum_axis(r, 0)?;
            let st = g.stack(&[m, m])?;
            let flat = g.reshape(st, &[8])?;
            let head = g.reshape(m2, &[6])?;
            let joined = g.concat_rows(&[flat, head])?;
            let out = g.select_rows(joined, &[0, 3, 5, 7, 8, 9, 10, 11, 12, 13, 1, 2])?;
            weighted(g, out, &w)
        },
        &[a, b, bias],
    )
}

fn case_activations(s: &mut Sampler) -> Result<Option<GradReport>> {
    let x = s.gaussian(&[10], 1.2);
    let pos = s.uniform_tensor(&[10], 0.2, 3.0);
    let w = weights_for(s, 10);
    check(
        "sigmoid/tanh/square/sqrt",
        move |g, p| {
            let a = g.sigmoid(p[0]);
            let b = g.tanh(p[0]);
            let c = g.bounded_tanh(p[0], 1.5);
            let d = g.square(p[0]);
            let e = g.sqrt(p[1]);
            let ab = g.mul(a, b)?;
            let cd = g.add(c, d)?;
            let x = g.add(ab, cd)?;
            let y = g.mul(x, e)?;
            weighted(g, y, &w)
        },
        &[x, pos],
    )
}

fn case_softmax(s: &mut Sampler) -> Result<Option<GradReport>> {
    let x = s.gaussian(&[3, 5], 1.5);
    let w = weights_for(s, 15);
    let w2 = weights_for(s, 15);
    check(
        "softmax/log_softmax",
        move |g, p| {
            let a = g.softmax(p[0]);
            let b = g.log_softmax(p[0]);
            let fa = weighted(g, a, &w)?;
            let fb = weighted(g, b, &w2)?;
            g.add(fa, fb)
        },
        &[x],
    )
}

fn case_layer_norm(s: &mut Sampler) -> Result<Option<GradReport>> {
    let x = s.gaussian(&[4, 6], 1.0);
    let gain = s.gaussian(&[6], 1.0);
    let bias = s.gaussian(&[6], 1.0);
    let w = weights_for(s, 24);
    check(
        "layer_norm",
        move |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], LAYER_NORM_EPS)?;
            weighted(g, y, &w)
        },
        &[x, gain, bias],
    )
}

fn case_cosine(s: &mut Sampler) -> Result<Option<GradReport>> {
    let a = s.gaussian(&[4, 6], 1.0);
    let b = s.gaussian(&[3, 6], 1.0);
    let w = weights_for(s, 12);
    check(
        "l2_normalize/cosine",
        move |g, p| {
            let y = cosine_matrix(g, p[0], p[1])?;
            weighted(g, y, &w)
        },
        &[a, b],
    )
}

fn case_min_max(s: &mut Sampler) -> Result<Option<GradReport>> {
    let x = s.gaussian(&[8], 1.0);
    if has_tie(x.data()) {
        return Ok(None);
    }
    let w = weights_for(s, 8);
    check(
        "min_max",
        move |g, p| {
            let y = g.min_max(p[0]);
            weighted(g, y, &w)
        },
        &[x],
    )
}

fn case_clamp_interp(s: &mut Sampler) -> Result<Option<GradReport>> {
    let t = 6;
    let frames = s.gaussian(&[t, 3], 1.0);
    let idx = s.uniform_tensor(&[5], 0.0, t as f64 + 1.0);
    if near_kink(idx.data(), t) {
        return Ok(None);
    }
    let w = weights_for(s, 15);
    check(
        "clamp/interp",
        move |g, p| {
            let c = g.clamp(p[1], 1.0, t as f64);
            let y = g.interp(p[0], c)?;
            weighted(g, y, &w)
        },
        &[frames, idx],
    )
}

fn random_clip(s: &mut Sampler, t: usize, h: usize, w: usize, c: usize) -> Tensor {
    s.gaussian(&[t, h, w, c], 1.0)
}

fn case_motion_stats(s: &mut Sampler) -> Result<Option<GradReport>> {
    let x = random_clip(s, 8, 2, 1, 3);
    let wv = weights_for(s, 8);
    let wc = weights_for(s, 8);
    check(
        "frame_embed/motion_stats",
        move |g, p| {
            let e = frame_embed_forward(g, p[0])?;
            let st = motion_stats_forward(g, e)?;
            let a = weighted(g, st.v, &wv)?;
            let b = weighted(g, st.c, &wc)?;
            g.add(a, b)
        },
        &[x],
    )
}

fn case_saliency(s: &mut Sampler) -> Result<Option<GradReport>> {
    let v = s.uniform_tensor(&[8], 0.0, 4.0);
    let c = s.uniform_tensor(&[8], 0.0, 2.0);
    if has_tie(v.data()) || has_tie(c.data()) {
        return Ok(None);
    }
    let w = weights_for(s, 8);
    check(
        "saliency",
        move |g, p| {
            let sal = saliency_forward(g, p[0], p[1], DEFAULT_ALPHA, DEFAULT_BETA)?;
            weighted(g, sal.m, &w)
        },
        &[v, c],
    )
}

fn random_head(s: &mut Sampler, max_offset: f64) -> OffsetHead {
    let mut head = OffsetHead::zero_output_init(max_offset, s);
    for t in head.tensors_mut() {
        let noise = s.gaussian(t.shape(), 0.5);
        *t = t.add(&noise).expect("same shape");
    }
    head
}

fn head_vars(p: &[Var], max_offset: f64) -> OffsetHeadVars {
    let mlp = |q: &[Var]| ScalarMlpVars {
        w1: q[0],
        b1: q[1],
        w2: q[2],
        b2: q[3],
    };
    OffsetHeadVars {
        global: mlp(&p[0..4]),
        dynamic: mlp(&p[4..8]),
        max_offset,
    }
}

fn case_offsets(s: &mut Sampler) -> Result<Option<GradReport>> {
    let head = random_head(s, 1.5);
    let m = s.uniform_tensor(&[8], 0.0, 1.0);
    let wg = weights_for(s, 8);
    let wd = weights_for(s, 8);
    let mut params: Vec<Tensor> = head.tensors().into_iter().cloned().collect();
    params.push(m);
    check(
        "offset_heads",
        move |g, p| {
            let hv = head_vars(p, 1.5);
            let (dg, dd) = offsets_forward(g, &hv, p[8])?;
            let a = weighted(g, dg, &wg)?;
            let b = weighted(g, dd, &wd)?;
            g.add(a, b)
        },
        &params,
    )
}

fn raw_positions(delta_g: &Tensor, delta_d: &Tensor, t: usize) -> Vec<f64> {
    let (ga, da) = anchors(t);
    let mut out: Vec<f64> = ga.iter().map(|&a| a as f64 + delta_g.data()[a - 1]).collect();
    out.extend(da.iter().map(|&a| a as f64 + delta_d.data()[a - 1]));
    out
}

fn case_sample_streams(s: &mut Sampler) -> Result<Option<GradReport>> {
    let t = 8;
    let x = random_clip(s, t, 1, 2, 2);
    let dg = s.uniform_tensor(&[t], -1.4, 1.4);
    let dd = s.uniform_tensor(&[t], -1.4, 1.4);
    if near_kink(&raw_positions(&dg, &dd, t), t) {
        return Ok(None);
    }
    let w1 = weights_for(s, t / 2 * 4);
    let w2 = weights_for(s, t / 2 * 4);
    check(
        "sample_streams",
        move |g, p| {
            let st = sample_streams_forward(g, p[0], p[1], p[2])?;
            let a = weighted(g, st.x_global, &w1)?;
            let b = weighted(g, st.x_dynamic, &w2)?;
            g.add(a, b)
        },
        &[x, dg, dd],
    )
}

fn case_msm_pipeline(s: &mut Sampler) -> Result<Option<GradReport>> {
    let t = 8;
    let head = random_head(s, 1.5);
    let x = random_clip(s, t, 1, 2, 3);
    let clip = FrameFeatures::new(x.clone())?;
    let prof = saliency_profile(&clip, DEFAULT_ALPHA, DEFAULT_BETA)?;
    if has_tie(prof.v.data()) || has_tie(prof.c.data()) {
        return Ok(None);
    }
    let (dg, dd) = compute_offsets(&prof.m, &head)?;
    if near_kink(&raw_positions(&dg, &dd, t), t) {
        return Ok(None);
    }
    let w1 = weights_for(s, t / 2 * 6);
    let w2 = weights_for(s, t / 2 * 6);
    let mut params = vec![x];
    params.extend(head.tensors().into_iter().cloned());
    check(
        "msm_end_to_end",
        move |g, p| {
            let hv = head_vars(&p[1..], 1.5);
            let out = crate::msm::msm_forward(g, &hv, p[0], Default::default())?;
            let a = weighted(g, out.streams.x_global, &w1)?;
            let b = weighted(g, out.streams.x_dynamic, &w2)?;
            g.add(a, b)
        },
        &params,
    )
}

fn case_fuse(s: &mut Sampler) -> Result<Option<GradReport>> {
    let c = 4;
    let xd = random_clip(s, 2, 1, 2, c);
    let xg = random_clip(s, 2, 1, 2, c);
    let wg = s.gaussian(&[3 * c, c], 0.5);
    let gain = s.gaussian(&[c], 1.0);
    let bias = s.gaussian(&[c], 1.0);
    let w = weights_for(s, 2 * 2 * c);
    check(
        "mab_fuse",
        move |g, p| {
            let gv = GateVars {
                w_g: p[2],
                gain: p[3],
                bias: p[4],
            };
            let y = fuse_forward(g, p[0], p[1], &gv)?;
            weighted(g, y, &w)
        },
        &[xd, xg, wg, gain, bias],
    )
}

fn random_adapter(s: &mut Sampler, d: usize) -> DualAdapter {
    let mut a = DualAdapter::identity_init(d, s);
    a.output = s.gaussian(&[d, d], 0.3);
    a.up = s.gaussian(a.up.shape(), 0.3);
    a
}

fn adapter_vars(p: &[Var]) -> AdapterVars {
    AdapterVars {
        query: p[0],
        key: p[1],
        value: p[2],
        output: p[3],
        down: p[4],
        up: p[5],
    }
}

fn case_adapter(s: &mut Sampler) -> Result<Option<GradReport>> {
    let d = 8;
    let a = random_adapter(s, d);
    let tokens = s.gaussian(&[5, d], 1.0);
    let w = weights_for(s, 5 * d);
    let mut params: Vec<Tensor> = a.tensors().into_iter().cloned().collect();
    params.push(tokens);
    check(
        "dual_adapter",
        move |g, p| {
            let y = adapter_forward(g, &adapter_vars(p), p[6])?;
            weighted(g, y, &w)
        },
        &params,
    )
}

fn case_pool(s: &mut Sampler) -> Result<Option<GradReport>> {
    let x = random_clip(s, 4, 2, 1, 3);
    let proj = s.gaussian(&[3, 5], 1.0);
    let w = weights_for(s, 5);
    check(
        "pool_video_embedding",
        move |g, p| {
            let y = pool_forward(g, p[0], p[1])?;
            weighted(g, y, &w)
        },
        &[x, proj],
    )
}

fn case_encode(s: &mut Sampler) -> Result<Option<GradReport>> {
    let (k, m, d) = (3, 2, 8);
    let a = random_adapter(s, d);
    let ctx = s.gaussian(&[k, m, d], 0.5);
    let desc = s.gaussian(&[k, d], 1.0);
    let neg = s.gaussian(&[k, d], 1.0);
    let wt = weights_for(s, k * d);
    let wn = weights_for(s, k * d);
    let mut params: Vec<Tensor> = a.tensors().into_iter().cloned().collect();
    params.extend([ctx, desc, neg]);
    check(
        "encode_prompts",
        move |g, p| {
            let av = adapter_vars(p);
            let bank = PromptVars {
                context: Some(p[6]),
                desc: p[7],
                neg_desc: p[8],
            };
            let (et, en) = encode_forward(g, &bank, Some(&av))?;
            let a = weighted(g, et, &wt)?;
            let b = weighted(g, en, &wn)?;
            g.add(a, b)
        },
        &params,
    )
}

fn labels(s: &mut Sampler, b: usize, k: usize) -> Vec<usize> {
    (0..b).map(|i| if i < k { i } else { s.below(k) }).collect()
}

fn case_ce(s: &mut Sampler) -> Result<Option<GradReport>> {
    let e_v = s.gaussian(&[5, 6], 1.0);
    let e_t = s.gaussian(&[3, 6], 1.0);
    let y = labels(s, 5, 3);
    check(
        "loss_ce_seen",
        move |g, p| {
            let cos = cosine_matrix(g, p[0], p[1])?;
            soft_cross_entropy(g, cos, &one_hot(&y, 3))
        },
        &[e_v, e_t],
    )
}

fn case_contrastive(s: &mut Sampler) -> Result<Option<GradReport>> {
    let e_v = s.gaussian(&[5, 6], 1.0);
    let e_t = s.gaussian(&[3, 6], 1.0);
    let y = labels(s, 5, 3);
    check(
        "loss_contrastive",
        move |g, p| contrastive_forward(g, p[0], p[1], &y, 0.07),
        &[e_v, e_t],
    )
}

fn case_clip(s: &mut Sampler) -> Result<Option<GradReport>> {
    let e_v = s.gaussian(&[5, 6], 1.0);
    let reference = s.gaussian(&[3, 6], 1.0);
    let y = labels(s, 5, 3);
    check(
        "loss_clip_consistency",
        move |g, p| clip_consistency_forward(g, p[0], p[1], &y),
        &[e_v, reference],
    )
}

fn case_projection(s: &mut Sampler) -> Result<Option<GradReport>> {
    let e_p = s.gaussian(&[3, 6], 1.0);
    let anchor = s.gaussian(&[3, 6], 1.0);
    check(
        "loss_projection",
        move |g, p| projection_forward(g, p[0], p[1]),
        &[e_p, anchor],
    )
}

fn case_negative(s: &mut Sampler) -> Result<Option<GradReport>> {
    let e_v = s.gaussian(&[5, 6], 1.0);
    let e_n = s.gaussian(&[3, 6], 1.0);
    let y = labels(s, 5, 3);
    check(
        "loss_negative_prompt",
        move |g, p| {
            let cos = cosine_matrix(g, p[0], p[1])?;
            soft_cross_entropy(g, cos, &complement_targets(&y, 3)?)
        },
        &[e_v, e_n],
    )
}

fn case_objective(s: &mut Sampler) -> Result<Option<GradReport>> {
    let e_v = s.gaussian(&[5, 6], 1.0);
    let e_t = s.gaussian(&[3, 6], 1.0);
    let e_n = s.gaussian(&[3, 6], 1.0);
    let reference = s.gaussian(&[3, 6], 1.0);
    let y = labels(s, 5, 3);
    check(
        "total_loss",
        move |g, p| {
            let obj = objective_forward(
                g,
                ObjectiveInputs {
                    e_v: p[0],
                    e_t: p[1],
                    e_n: p[2],
                    reference: p[3],
                },
                &y,
                &LossSettings::default(),
            )?;
            Ok(obj.total)
        },
        &[e_v, e_t, e_n, reference],
    )
}

/// Small full-model configuration: every module on, every loss on.
fn pipeline_config() -> ExperimentConfig {
    ExperimentConfig {
        seeds: vec![0],
        k_seen: 3,
        k_unseen: 2,
        videos_per_class: 1,
        frames: 4,
        height: 1,
        width: 2,
        channels: 8,
        embed_dim: 8,
        context_len: 2,
        // Frames that differ clearly keep the offset-head gradients well above the
        // central-difference roundoff floor.
        noise_sigma: 1.0,
        motion_amplitude: 3.0,
        modality_gap: 1.0,
        background: 1.0,
        intra_class_std: 0.0,
        architecture: Architecture::FULL,
        ..ExperimentConfig::default()
    }
}

/// Moves every parameter off its identity start. The gate weights get a smaller
/// kick: its inputs include `X_D * X_G`, and a saturated sigmoid leaves gradients
/// below the finite-difference noise floor.
fn perturbed_model(cfg: &ExperimentConfig, s: &mut Sampler) -> Model {
    let mut model = Model::init(cfg, cfg.k_seen, RngStream::new(s.below(1 << 30) as u64, 1));
    let gate_w = model.gate.w_g.shape().to_vec();
    for t in model.trainable_mut() {
        let std = if t.shape() == gate_w.as_slice() { 0.02 } else { 0.3 };
        let noise = s.gaussian(t.shape(), std);
        *t = t.add(&noise).expect("same shape");
    }
    model
}

fn split_vars(model: &Model, p: &[Var]) -> (ModelVars, Var) {
    let mut i = 0;
    let mut take = |n: usize| {
        let out = &p[i..i + n];
        i += n;
        out.to_vec()
    };
    let adapter = adapter_vars(&take(6));
    let offsets = head_vars(&take(8), model.offsets.max_offset);
    let gq = take(3);
    let gate = GateVars {
        w_g: gq[0],
        gain: gq[1],
        bias: gq[2],
    };
    let projection = take(1)[0];
    let context = take(1)[0];
    (
        ModelVars {
            adapter: Some(adapter),
            offsets: Some(offsets),
            gate: Some(gate),
            projection,
        },
        context,
    )
}

fn case_pipeline(s: &mut Sampler) -> Result<Option<GradReport>> {
    let cfg = pipeline_config();
    let ds = build_dataset(&cfg, s.below(1 << 30) as u64)?;
    let model = perturbed_model(&cfg, s);
    let t = cfg.frames;
    for v in &ds.train.videos {
        let (th, c) = (t * v.positions(), v.channels());
        let tokens = apply_dual_adapter(&model.adapter, &v.tensor().reshape(&[th, c])?)?;
        let adapted = FrameFeatures::new(tokens.reshape(v.tensor().shape())?)?;
        let prof = saliency_profile(&adapted, cfg.alpha, cfg.beta)?;
        if has_tie(prof.v.data()) || has_tie(prof.c.data()) {
            return Ok(None);
        }
        let (dg, dd) = compute_offsets(&prof.m, &model.offsets)?;
        if near_kink(&raw_positions(&dg, &dd, t), t) {
            return Ok(None);
        }
    }
    let params: Vec<Tensor> = model.trainable().into_iter().cloned().collect();
    let clips: Vec<Tensor> = ds.train.videos.iter().map(|v| v.tensor().clone()).collect();
    let y = ds.train.labels.clone();
    let desc = ds.train.classes.semantic.clone();
    let neg = ds.train.classes.negative.clone();
    let reference = desc.scale(0.9);
    let settings = cfg.loss_settings();
    check(
        "end_to_end_total_loss",
        move |g, p| {
            let (vars, context) = split_vars(&model, p);
            let bank = PromptVars {
                context: Some(context),
                desc: g.leaf(desc.clone()),
                neg_desc: g.leaf(neg.clone()),
            };
            let (e_t, e_n) = encode_forward(g, &bank, vars.adapter.as_ref())?;
            let mut rows = Vec::new();
            for c in &clips {
                let x = g.leaf(c.clone());
                rows.push(video_forward(g, &model, &vars, x)?);
            }
            let e_v = g.stack(&rows)?;
            let r = g.leaf(reference.clone());
            let obj = objective_forward(
                g,
                ObjectiveInputs {
                    e_v,
                    e_t,
                    e_n,
                    reference: r,
                },
                &y,
                &settings,
            )?;
            Ok(obj.total)
        },
        &params,
    )
}

/// Every registered case, by name.
pub const CASES: &[(&str, Case)] = &[
    ("add/sub/mul/scale", case_elementwise),
    ("matmul", case_matmul),
    ("transpose/reshape/concat/select", case_shape_ops),
    ("sigmoid/tanh/square/sqrt", case_activations),
    ("softmax/log_softmax", case_softmax),
    ("layer_norm", case_layer_norm),
    ("l2_normalize/cosine", case_cosine),
    ("min_max", case_min_max),
    ("clamp/interp", case_clamp_interp),
    ("frame_embed/motion_stats", case_motion_stats),
    ("saliency", case_saliency),
    ("offset_heads", case_offsets),
    ("sample_streams", case_sample_streams),
    ("msm_end_to_end", case_msm_pipeline),
    ("mab_fuse", case_fuse),
    ("dual_adapter", case_adapter),
    ("pool_video_embedding", case_pool),
    ("encode_prompts", case_encode),
    ("loss_ce_seen", case_ce),
    ("loss_contrastive", case_contrastive),
    ("loss_clip_consistency", case_clip),
    ("loss_projection", case_projection),
    ("loss_negative_prompt", case_negative),
    ("total_loss", case_objective),
    ("end_to_end_total_loss", case_pipeline),
];

fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Runs one case over `seeds` seeds and merges the reports.
pub fn run_case(name: &str, case: Case, seeds: u64) -> Result<GradReport> {
    let mut total = GradReport {
        op_name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked_params: 0,
    };
    for seed in 0..seeds {
        let stream = RngStream::new(seed, name_key(name));
        let mut done = false;
        for attempt in 0..MAX_ATTEMPTS {
            if let Some(r) = case(&mut stream.derive(attempt).generator())? {
                total.merge(&r);
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::degenerate(
                "gradcheck",
                format!("{name}: no kink-free draw in {MAX_ATTEMPTS} attempts for seed {seed}"),
            ));
        }
    }
    Ok(total)
}

pub fn run_suite(seeds: u64) -> Result<Vec<GradReport>> {
    CASES.iter().map(|(name, case)| run_case(name, *case, seeds)).collect()
}

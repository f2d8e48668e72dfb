//! Trainable parameters and the video/text forward paths.

use super::config::{Architecture, ExperimentConfig, Splitting};
use super::dataset::identity_projection;
use crate::autograd::{Graph, Var};
use crate::backbone_sim::{adapter_forward, pool_forward, AdapterVars, DualAdapter};
use crate::error::Result;
use crate::mab::{fuse_forward, GateParams, GateVars};
use crate::msm::{fixed_split_forward, msm_forward, MsmSettings, OffsetHead, OffsetHeadVars, StreamVars};
use crate::numerics::{RngStream, Tensor};
use crate::text_space::{encode_forward, PromptBank, PromptVars};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub msm: MsmSettings,
    pub adapter: DualAdapter,
    pub offsets: OffsetHead,
    pub gate: GateParams,
    /// `[C, D]` pooling projection.
    pub projection: Tensor,
    /// `[K_seen, M, D]` learned context tokens.
    pub context: Option<Tensor>,
}

/// Per-graph handles for every model parameter.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub adapter: Option<AdapterVars>,
    pub offsets: Option<OffsetHeadVars>,
    pub gate: Option<GateVars>,
    pub projection: Var,
}

impl Model {
    /// Identity-start initialization: adapter output paths, offset output layers and
    /// the gate weights are zero and the projection is the identity.
    pub fn init(cfg: &ExperimentConfig, k_seen: usize, rng: RngStream) -> Self {
        let mut s = rng.generator();
        let d = cfg.embed_dim;
        let adapter = DualAdapter::identity_init(d, &mut s);
        let offsets = OffsetHead::zero_output_init(cfg.max_offset, &mut s);
        let context = (cfg.context_len > 0).then(|| s.gaussian(&[k_seen, cfg.context_len, d], cfg.context_init_std));
        Self {
            arch: cfg.architecture,
            msm: MsmSettings {
                alpha: cfg.alpha,
                beta: cfg.beta,
            },
            adapter,
            offsets,
            gate: GateParams::new(cfg.channels),
            projection: identity_projection(cfg.channels, d),
            context,
        }
    }

    /// Whether the offset heads receive updates.
    pub fn offsets_trainable(&self) -> bool {
        self.arch.msm && self.arch.splitting == Splitting::Offsets
    }

    /// Parameters updated by the optimizer, in a fixed order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let offsets_on = self.offsets_trainable();
        if self.arch.da {
            out.extend(self.adapter.tensors_mut());
        }
        if offsets_on {
            out.extend(self.offsets.tensors_mut());
        }
        if self.arch.mab {
            out.extend(self.gate.tensors_mut());
        }
        out.push(&mut self.projection);
        if let Some(c) = &mut self.context {
            out.push(c);
        }
        out
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        if self.arch.da {
            out.extend(self.adapter.tensors());
        }
        if self.offsets_trainable() {
            out.extend(self.offsets.tensors());
        }
        if self.arch.mab {
            out.extend(self.gate.tensors());
        }
        out.push(&self.projection);
        if let Some(c) = &self.context {
            out.push(c);
        }
        out
    }

    /// Registers the visual-side parameters the architecture uses.
    pub fn register(&self, g: &mut Graph) -> ModelVars {
        let uses_offsets = self.arch.msm && self.arch.splitting != Splitting::Fixed;
        ModelVars {
            adapter: self.arch.da.then(|| self.adapter.register(g)),
            offsets: uses_offsets.then(|| self.offsets.register(g)),
            gate: self.arch.mab.then(|| self.gate.register(g)),
            projection: g.leaf(self.projection.clone()),
        }
    }

    /// Gradient handles in the order of [`Model::trainable_mut`].
    pub fn trainable_vars(&self, vars: &ModelVars, context: Option<Var>) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(a) = &vars.adapter {
            out.extend([a.query, a.key, a.value, a.output, a.down, a.up]);
        }
        if self.offsets_trainable() {
            let o = vars.offsets.as_ref().expect("offsets registered");
            for m in [o.global, o.dynamic] {
                out.extend([m.w1, m.b1, m.w2, m.b2]);
            }
        }
        if let Some(gv) = &vars.gate {
            out.extend([gv.w_g, gv.gain, gv.bias]);
        }
        out.push(vars.projection);
        if let Some(c) = context {
            out.push(c);
        }
        out
    }

    /// Context for classes the model never trained on: the mean of the learned contexts.
    pub fn transfer_context(&self, classes: usize) -> Option<Tensor> {
        let ctx = self.context.as_ref()?;
        let (k, m, d) = (ctx.shape()[0], ctx.shape()[1], ctx.shape()[2]);
        let mut mean = vec![0.0; m * d];
        for i in 0..k {
            for (j, x) in ctx.data()[i * m * d..(i + 1) * m * d].iter().enumerate() {
                mean[j] += x;
            }
        }
        for x in &mut mean {
            *x /= k as f64;
        }
        let data = (0..classes).flat_map(|_| mean.iter().copied()).collect();
        Some(Tensor::new(vec![classes, m, d], data).expect("shape"))
    }
}

/// Streams for the fusion stage, or `None` when neither MSM nor MAB runs.
fn split_streams(g: &mut Graph, model: &Model, vars: &ModelVars, x: Var) -> Result<Option<StreamVars>> {
    if model.arch.msm {
        if let Some(head) = &vars.offsets {
            return Ok(Some(msm_forward(g, head, x, model.msm)?.streams));
        }
        return Ok(Some(fixed_split_forward(g, x)?));
    }
    if model.arch.mab {
        return Ok(Some(fixed_split_forward(g, x)?));
    }
    Ok(None)
}

/// `e^V` for one `[T, H, W, C]` clip.
pub fn video_forward(g: &mut Graph, model: &Model, vars: &ModelVars, clip: Var) -> Result<Var> {
    let shape = g.shape(clip).to_vec();
    let x = match &vars.adapter {
        Some(a) => {
            let c = shape[3];
            let tokens = g.reshape(clip, &[shape[0] * shape[1] * shape[2], c])?;
            let adapted = adapter_forward(g, a, tokens)?;
            g.reshape(adapted, &shape)?
        }
        None => clip,
    };
    let fused = match split_streams(g, model, vars, x)? {
        Some(s) => match &vars.gate {
            Some(gate) => fuse_forward(g, s.x_dynamic, s.x_global, gate)?,
            None => g.concat_rows(&[s.x_global, s.x_dynamic])?,
        },
        None => x,
    };
    pool_forward(g, fused, vars.projection)
}

/// `[B, D]` embeddings for a batch of clips.
pub fn batch_forward(g: &mut Graph, model: &Model, vars: &ModelVars, clips: &[&Tensor]) -> Result<Var> {
    let mut rows = Vec::with_capacity(clips.len());
    for clip in clips {
        let x = g.constant((*clip).clone());
        rows.push(video_forward(g, model, vars, x)?);
    }
    g.stack(&rows)
}

/// Positive and negative class embeddings, with the shared adapter when DA is on.
pub fn text_forward(g: &mut Graph, bank: &PromptVars, vars: &ModelVars) -> Result<(Var, Var)> {
    encode_forward(g, bank, vars.adapter.as_ref())
}

/// Prompt bank for `classes` with the given context (frozen fields snapshotted at construction).
pub fn prompt_bank(context: Option<Tensor>, desc: &Tensor, neg: &Tensor) -> Result<PromptBank> {
    PromptBank::new(context, desc.clone(), neg.clone())
}

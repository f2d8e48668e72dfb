//! Prompt bank, surrogate text encoder and cosine classifier.
//!
//! A class prompt is the token sequence `[p_k^1 .. p_k^M, desc_k]`. The frozen
//! text encoder is stood in for by a token mean; the shared Dual Adapter, when
//! enabled, runs on the token sequence first. Negative prompts use the same
//! context tokens with the class's negative description.

use crate::autograd::{Graph, Var};
use crate::backbone_sim::{adapter_forward, AdapterVars, DualAdapter};
use crate::error::{Error, Result};
use crate::numerics::{Sampler, Tensor};

pub const CONTEXT_INIT_STD: f64 = 0.02;
pub const NEGATIVE_NOISE_STD: f64 = 0.1;
pub const DEFAULT_CONTEXT_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// Learnable `[K, M, D]` context tokens; `None` when `M = 0`.
    pub context: Option<Tensor>,
    /// Frozen `[K, D]` description surrogates.
    pub desc_embed: Tensor,
    /// Frozen `[K, D]` negative-description surrogates.
    pub neg_desc_embed: Tensor,
    /// Frozen `[K, D]` reference class embeddings, snapshotted at construction.
    pub ref_embed: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub e_t: Tensor,
    pub e_n: Tensor,
    pub e_p: Tensor,
}

/// `neg_k = -desc_k + N(0, 0.1^2)`: class-dependent and anti-correlated with the positive.
pub fn negative_descriptions(desc: &Tensor, sampler: &mut Sampler) -> Tensor {
    let noise = sampler.gaussian(desc.shape(), NEGATIVE_NOISE_STD);
    desc.scale(-1.0).add(&noise).expect("same shape")
}

impl PromptBank {
    /// Builds a bank and snapshots the frozen encoder's class embeddings as `ref_embed`.
    pub fn new(context: Option<Tensor>, desc_embed: Tensor, neg_desc_embed: Tensor) -> Result<Self> {
        let [k, d] = desc_embed.shape() else {
            return Err(Error::dim("PromptBank", desc_embed.shape(), &[0, 0]));
        };
        if neg_desc_embed.shape() != desc_embed.shape() {
            return Err(Error::dim("PromptBank", desc_embed.shape(), neg_desc_embed.shape()));
        }
        if let Some(ctx) = &context {
            if ctx.rank() != 3 || ctx.shape()[0] != *k || ctx.shape()[2] != *d {
                return Err(Error::dim("PromptBank", ctx.shape(), &[*k, 0, *d]));
            }
        }
        let mut bank = Self {
            context,
            ref_embed: desc_embed.clone(),
            desc_embed,
            neg_desc_embed,
        };
        bank.ref_embed = encode_prompts(&bank, None)?.e_t;
        Ok(bank)
    }

    pub fn random_context(classes: usize, len: usize, dim: usize, sampler: &mut Sampler) -> Option<Tensor> {
        (len > 0).then(|| sampler.gaussian(&[classes, len, dim], CONTEXT_INIT_STD))
    }

    pub fn classes(&self) -> usize {
        self.desc_embed.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.desc_embed.shape()[1]
    }

    pub fn context_len(&self) -> usize {
        self.context.as_ref().map_or(0, |c| c.shape()[1])
    }

    /// Frozen fields, in a fixed order, for hashing.
    pub fn frozen_tensors(&self) -> [&Tensor; 3] {
        [&self.desc_embed, &self.neg_desc_embed, &self.ref_embed]
    }
}

/// Graph handles for one prompt bank.
#[derive(Debug, Clone, Copy)]
pub struct PromptVars {
    pub context: Option<Var>,
    pub desc: Var,
    pub neg_desc: Var,
}

impl PromptBank {
    pub fn register(&self, g: &mut Graph) -> PromptVars {
        PromptVars {
            context: self.context.as_ref().map(|c| g.leaf(c.clone())),
            desc: g.leaf(self.desc_embed.clone()),
            neg_desc: g.leaf(self.neg_desc_embed.clone()),
        }
    }
}

fn encode_rows(g: &mut Graph, context: Option<Var>, rows: Var, adapter: Option<&AdapterVars>) -> Result<Var> {
    let [k, d] = g.shape(rows).to_vec()[..] else {
        return Err(Error::dim("encode_prompts", g.shape(rows), &[0, 0]));
    };
    let flat_ctx = match context {
        Some(c) => {
            let m = g.shape(c)[1];
            Some((g.reshape(c, &[k, m * d])?, m))
        }
        None => None,
    };
    let mut out = Vec::with_capacity(k);
    for class in 0..k {
        let desc = g.select_rows(rows, &[class])?;
        let tokens = match flat_ctx {
            Some((ctx, m)) => {
                let row = g.select_rows(ctx, &[class])?;
                let toks = g.reshape(row, &[m, d])?;
                g.concat_rows(&[toks, desc])?
            }
            None => desc,
        };
        let tokens = match adapter {
            Some(a) => adapter_forward(g, a, tokens)?,
            None => tokens,
        };
        out.push(g.mean_axis(tokens, 0)?);
    }
    g.stack(&out)
}

/// Positive (`e_T`) and negative (`e_N`) class embeddings, both `[K, D]`.
pub fn encode_forward(g: &mut Graph, bank: &PromptVars, adapter: Option<&AdapterVars>) -> Result<(Var, Var)> {
    let e_t = encode_rows(g, bank.context, bank.desc, adapter)?;
    let e_n = encode_rows(g, bank.context, bank.neg_desc, adapter)?;
    Ok((e_t, e_n))
}

pub fn encode_prompts(bank: &PromptBank, adapter: Option<&DualAdapter>) -> Result<ClassEmbeddings> {
    let mut g = Graph::new();
    let pv = bank.register(&mut g);
    let av = adapter.map(|a| a.register(&mut g));
    let (e_t, e_n) = encode_forward(&mut g, &pv, av.as_ref())?;
    let e_t = g.value(e_t).clone();
    let e_n = g.value(e_n).clone();
    for (name, t) in [("e_T", &e_t), ("e_N", &e_n)] {
        for r in 0..t.rows() {
            let n = t.row(r).iter().map(|x| x * x).sum::<f64>();
            if !(n > 0.0) {
                return Err(Error::degenerate("encode_prompts", format!("{name} row {r} has zero norm")));
            }
        }
    }
    Ok(ClassEmbeddings {
        e_p: e_t.clone(),
        e_t,
        e_n,
    })
}

/// Cosine similarity matrix `[B, K]` between rows of `a` (`[B, D]`) and `b` (`[K, D]`).
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    let bt = g.transpose(bn)?;
    g.matmul(an, bt)
}

/// `softmax_k cos(e_V, class_k)`.
pub fn classify(e_v: &Tensor, class_embeds: &Tensor) -> Result<Tensor> {
    let d = e_v.len();
    if class_embeds.rank() != 2 || class_embeds.shape()[1] != d {
        return Err(Error::dim("classify", e_v.shape(), class_embeds.shape()));
    }
    let mut g = Graph::new();
    let v = g.leaf(e_v.reshape(&[1, d])?);
    let c = g.leaf(class_embeds.clone());
    let cos = cosine_matrix(&mut g, v, c)?;
    let p = g.softmax(cos);
    let k = class_embeds.shape()[0];
    Ok(g.value(p).reshape(&[k])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_sim, softmax, RngStream};

    fn bank(k: usize, m: usize, d: usize, seed: u64) -> PromptBank {
        let mut s = RngStream::new(seed, 0).generator();
        let desc = s.gaussian(&[k, d], 1.0);
        let neg = negative_descriptions(&desc, &mut s);
        let ctx = PromptBank::random_context(k, m, d, &mut s);
        PromptBank::new(ctx, desc, neg).unwrap()
    }

    #[test]
    fn no_context_identity_adapter_returns_description() {
        let b = bank(3, 0, 8, 1);
        let e = encode_prompts(&b, Some(&DualAdapter::zeros(8))).unwrap();
        assert_eq!(e.e_t, b.desc_embed);
        assert_eq!(e.e_p, e.e_t);
        assert_eq!(b.ref_embed, b.desc_embed);
    }

    #[test]
    fn zero_adapter_equals_plain_token_mean() {
        let b = bank(3, 4, 8, 2);
        let with = encode_prompts(&b, Some(&DualAdapter::zeros(8))).unwrap();
        let without = encode_prompts(&b, None).unwrap();
        assert_eq!(with, without);
        let ctx = b.context.as_ref().unwrap();
        for k in 0..3 {
            for j in 0..8 {
                let mut s = b.desc_embed.at(&[k, j]);
                for m in 0..4 {
                    s += ctx.at(&[k, m, j]);
                }
                assert!((with.e_t.at(&[k, j]) - s / 5.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn negatives_anticorrelate() {
        let b = bank(4, 2, 16, 3);
        for k in 0..4 {
            let pos = Tensor::vector(b.desc_embed.row(k).to_vec());
            let neg = Tensor::vector(b.neg_desc_embed.row(k).to_vec());
            assert!(cosine_sim(&pos, &neg).unwrap() < -0.9);
        }
    }

    #[test]
    fn zero_norm_embedding_is_degenerate() {
        let desc = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            PromptBank::new(None, desc.clone(), desc),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn classify_cases() {
        let classes = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let p = classify(&Tensor::vector(vec![0.0, 2.0, 0.0]), &classes).unwrap();
        assert_eq!(p.argmax(), 1);

        let mut s = RngStream::new(5, 0).generator();
        let ev = s.gaussian(&[6], 1.0);
        let ce = s.gaussian(&[3, 6], 1.0);
        let p1 = classify(&ev, &ce).unwrap();
        let p10 = classify(&ev.scale(10.0), &ce).unwrap();
        assert!(p1.sub(&p10).unwrap().max_abs() < 1e-12);

        let cos: Vec<f64> = (0..3)
            .map(|k| cosine_sim(&ev, &Tensor::vector(ce.row(k).to_vec())).unwrap())
            .collect();
        let want = softmax(&Tensor::vector(cos));
        assert!(p1.sub(&want).unwrap().max_abs() < 1e-12);

        assert!(matches!(
            classify(&Tensor::zeros(&[6]), &ce),
            Err(Error::Degenerate { .. })
        ));
    }
}

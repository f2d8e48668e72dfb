//! Training objectives: seen-class alignment terms and the negative-prompt loss.
//!
//! All batch reductions are means. The seen-class objective is the unweighted
//! sum of cross-entropy, symmetric InfoNCE, consistency with the frozen
//! reference bank, and the prompt projection penalty; the negative-prompt term
//! is added with weight `lambda_n`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::text_space::cosine_matrix;

pub const DEFAULT_LAMBDA_N: f64 = 0.1;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_s: f64,
    pub cl_s: f64,
    pub clip_s: f64,
    pub proj: f64,
    pub ce_n: f64,
    pub lambda_n: f64,
    pub total: f64,
}

/// Which terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub ce: bool,
    pub cl: bool,
    pub clip: bool,
    pub proj: bool,
    pub neg: bool,
}

impl LossFlags {
    pub const ALL: Self = Self {
        ce: true,
        cl: true,
        clip: true,
        proj: true,
        neg: true,
    };

    pub const CE_ONLY: Self = Self {
        ce: true,
        cl: false,
        clip: false,
        proj: false,
        neg: false,
    };

    /// Short tag like `ce+cl+neg`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.ce, "ce"),
            (self.cl, "cl"),
            (self.neg, "neg"),
            (self.clip, "clip"),
            (self.proj, "proj"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for LossFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub lambda_n: f64,
    pub temperature: f64,
    pub flags: LossFlags,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda_n: DEFAULT_LAMBDA_N,
            temperature: DEFAULT_TEMPERATURE,
            flags: LossFlags::ALL,
        }
    }
}

fn check_labels(op: &'static str, labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(&y) => Err(Error::Index {
            op,
            index: y as i64,
            lo: 0,
            hi: k as i64 - 1,
        }),
        None => Ok(()),
    }
}

pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        t.set(&[i, y], 1.0);
    }
    t
}

/// Uniform mass over every class except the label.
pub fn complement_targets(labels: &[usize], k: usize) -> Result<Tensor> {
    if k < 2 {
        return Err(Error::degenerate("negative_prompt_loss", format!("need >= 2 classes, got {k}")));
    }
    let mut t = Tensor::filled(&[labels.len(), k], 1.0 / (k - 1) as f64);
    for (i, &y) in labels.iter().enumerate() {
        t.set(&[i, y], 0.0);
    }
    Ok(t)
}

/// `-mean_i sum_j targets_ij * log_softmax(logits)_ij`.
pub fn soft_cross_entropy(g: &mut Graph, logits: Var, targets: &Tensor) -> Result<Var> {
    if g.shape(logits) != targets.shape() {
        return Err(Error::dim("cross_entropy", g.shape(logits), targets.shape()));
    }
    let rows = targets.shape()[0] as f64;
    let logp = g.log_softmax(logits);
    let t = g.leaf(targets.clone());
    let weighted = g.mul(logp, t)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, -1.0 / rows))
}

fn soft_cross_entropy_probs(p: &Tensor, targets: &Tensor) -> Result<f64> {
    if p.shape() != targets.shape() {
        return Err(Error::dim("cross_entropy", p.shape(), targets.shape()));
    }
    let rows = p.shape()[0] as f64;
    let s: f64 = p
        .data()
        .iter()
        .zip(targets.data())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&q, &t)| t * q.ln())
        .sum();
    Ok(-s / rows)
}

/// Mean of `-ln P[i, y_i]`.
pub fn ce_seen(p_s: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = p_s.last_dim();
    check_labels("ce_seen", labels, k)?;
    soft_cross_entropy_probs(p_s, &one_hot(labels, k))
}

/// Mean cross-entropy against the complementary "not-class" target.
pub fn negative_prompt_loss(p_n: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = p_n.last_dim();
    let targets = complement_targets(labels, k)?;
    check_labels("negative_prompt_loss", labels, k)?;
    soft_cross_entropy_probs(p_n, &targets)
}

/// Symmetric InfoNCE over cosine similarities scaled by `1 / temperature`.
///
/// Video-to-text is cross-entropy against the label; text-to-video, for each class
/// present in the batch, is cross-entropy over videos with uniform mass on the
/// videos of that class. The two directions are averaged.
pub fn contrastive_forward(g: &mut Graph, e_v: Var, e_t: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::param("temperature", "must be > 0"));
    }
    let k = g.shape(e_t)[0];
    check_labels("contrastive_seen", labels, k)?;
    let b = labels.len();
    let cos = cosine_matrix(g, e_v, e_t)?;
    let logits = g.scale(cos, 1.0 / temperature);
    let v2t = soft_cross_entropy(g, logits, &one_hot(labels, k))?;

    let mut counts = vec![0usize; k];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    let mut targets = Tensor::zeros(&[k, b]);
    for (i, &y) in labels.iter().enumerate() {
        targets.set(&[y, i], 1.0 / counts[y] as f64);
    }
    let lt = g.transpose(logits)?;
    let logp = g.log_softmax(lt);
    let tv = g.leaf(targets);
    let weighted = g.mul(logp, tv)?;
    let s = g.sum(weighted);
    let t2v = g.scale(s, -1.0 / present as f64);
    let both = g.add(v2t, t2v)?;
    Ok(g.scale(both, 0.5))
}

pub fn contrastive_seen(e_v: &Tensor, e_t: &Tensor, labels: &[usize], temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (v, t) = (g.leaf(e_v.clone()), g.leaf(e_t.clone()));
    let l = contrastive_forward(&mut g, v, t, labels, temperature)?;
    Ok(g.scalar(l))
}

/// Cross-entropy of `softmax(cos(e_V, reference))` against the labels.
pub fn clip_consistency_forward(g: &mut Graph, e_v: Var, reference: Var, labels: &[usize]) -> Result<Var> {
    let k = g.shape(reference)[0];
    check_labels("clip_consistency", labels, k)?;
    let cos = cosine_matrix(g, e_v, reference)?;
    soft_cross_entropy(g, cos, &one_hot(labels, k))
}

pub fn clip_consistency(e_v: &Tensor, reference: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let (v, r) = (g.leaf(e_v.clone()), g.leaf(reference.clone()));
    let l = clip_consistency_forward(&mut g, v, r, labels)?;
    Ok(g.scalar(l))
}

/// Mean over classes of `||e_P_k - anchor_k||^2`.
pub fn projection_forward(g: &mut Graph, e_p: Var, anchor: Var) -> Result<Var> {
    let k = g.shape(e_p)[0] as f64;
    let d = g.sub(e_p, anchor)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / k))
}

pub fn projection_loss(e_p: &Tensor, anchor: &Tensor) -> Result<f64> {
    if e_p.shape() != anchor.shape() {
        return Err(Error::dim("projection_loss", e_p.shape(), anchor.shape()));
    }
    let mut g = Graph::new();
    let (p, a) = (g.leaf(e_p.clone()), g.leaf(anchor.clone()));
    let l = projection_forward(&mut g, p, a)?;
    Ok(g.scalar(l))
}

/// Assembles the breakdown with `total = ce_s + cl_s + clip_s + proj + lambda_n * ce_n`.
pub fn total_loss(ce_s: f64, cl_s: f64, clip_s: f64, proj: f64, ce_n: f64, lambda_n: f64) -> Result<LossBreakdown> {
    if lambda_n < 0.0 {
        return Err(Error::param("lambda_n", "must be >= 0"));
    }
    Ok(LossBreakdown {
        ce_s,
        cl_s,
        clip_s,
        proj,
        ce_n,
        lambda_n,
        total: ce_s + cl_s + clip_s + proj + lambda_n * ce_n,
    })
}

/// Inputs to the objective on one graph.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs {
    /// `[B, D]` video embeddings.
    pub e_v: Var,
    /// `[K, D]` positive class embeddings (also the projected embeddings `e_P`).
    pub e_t: Var,
    /// `[K, D]` negative class embeddings.
    pub e_n: Var,
    /// `[K, D]` frozen reference bank.
    pub reference: Var,
}

/// Graph handles for each enabled component and the total.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub ce_s: Option<Var>,
    pub cl_s: Option<Var>,
    pub clip_s: Option<Var>,
    pub proj: Option<Var>,
    pub ce_n: Option<Var>,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn breakdown(&self, g: &Graph, lambda_n: f64) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x));
        LossBreakdown {
            ce_s: v(self.ce_s),
            cl_s: v(self.cl_s),
            clip_s: v(self.clip_s),
            proj: v(self.proj),
            ce_n: v(self.ce_n),
            lambda_n,
            total: g.scalar(self.total),
        }
    }
}

pub fn objective_forward(
    g: &mut Graph,
    inputs: ObjectiveInputs,
    labels: &[usize],
    settings: &LossSettings,
) -> Result<ObjectiveVars> {
    if settings.lambda_n < 0.0 {
        return Err(Error::param("lambda_n", "must be >= 0"));
    }
    let k = g.shape(inputs.e_t)[0];
    check_labels("objective", labels, k)?;
    let f = settings.flags;
    let ce_s = if f.ce {
        let cos = cosine_matrix(g, inputs.e_v, inputs.e_t)?;
        Some(soft_cross_entropy(g, cos, &one_hot(labels, k))?)
    } else {
        None
    };
    let cl_s = if f.cl {
        Some(contrastive_forward(g, inputs.e_v, inputs.e_t, labels, settings.temperature)?)
    } else {
        None
    };
    let clip_s = if f.clip {
        Some(clip_consistency_forward(g, inputs.e_v, inputs.reference, labels)?)
    } else {
        None
    };
    let proj = if f.proj {
        Some(projection_forward(g, inputs.e_t, inputs.reference)?)
    } else {
        None
    };
    let ce_n = if f.neg {
        let cos = cosine_matrix(g, inputs.e_v, inputs.e_n)?;
        Some(soft_cross_entropy(g, cos, &complement_targets(labels, k)?)?)
    } else {
        None
    };
    let mut terms: Vec<Var> = [ce_s, cl_s, clip_s, proj].into_iter().flatten().collect();
    if let Some(n) = ce_n {
        terms.push(g.scale(n, settings.lambda_n));
    }
    let total = match terms.split_first() {
        Some((first, rest)) => {
            let mut acc = *first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
        None => g.leaf(Tensor::scalar(0.0)),
    };
    Ok(ObjectiveVars {
        ce_s,
        cl_s,
        clip_s,
        proj,
        ce_n,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine_sim, RngStream};

    fn row(t: &Tensor, i: usize) -> Tensor {
        Tensor::vector(t.row(i).to_vec())
    }

    fn lse(xs: &[f64]) -> f64 {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn ce_seen_cases() {
        let p = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(ce_seen(&p, &[1, 0]).unwrap(), 0.0);
        let u = Tensor::filled(&[3, 4], 0.25);
        assert!((ce_seen(&u, &[0, 2, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(ce_seen(&u, &[4, 0, 0]), Err(Error::Index { .. })));

        let mut s = RngStream::new(1, 0).generator();
        let logits = s.gaussian(&[5, 3], 1.0);
        let probs = crate::numerics::softmax(&logits);
        let y = [0, 2, 1, 1, 0];
        let want: f64 = y.iter().enumerate().map(|(i, &c)| -probs.at(&[i, c]).ln()).sum::<f64>() / 5.0;
        assert!((ce_seen(&probs, &y).unwrap() - want).abs() < 1e-12);
    }

    /// Direct-summation InfoNCE used as the oracle.
    fn infonce_oracle(e_v: &Tensor, e_t: &Tensor, y: &[usize], tau: f64) -> f64 {
        let (b, k) = (e_v.shape()[0], e_t.shape()[0]);
        let sim = |i: usize, j: usize| cosine_sim(&row(e_v, i), &row(e_t, j)).unwrap() / tau;
        let mut v2t = 0.0;
        for i in 0..b {
            let logits: Vec<f64> = (0..k).map(|j| sim(i, j)).collect();
            v2t += lse(&logits) - logits[y[i]];
        }
        v2t /= b as f64;
        let mut t2v = 0.0;
        let mut present = 0;
        for c in 0..k {
            let members: Vec<usize> = (0..b).filter(|&i| y[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            present += 1;
            let col: Vec<f64> = (0..b).map(|i| sim(i, c)).collect();
            let z = lse(&col);
            t2v += members.iter().map(|&i| z - col[i]).sum::<f64>() / members.len() as f64;
        }
        t2v /= present as f64;
        0.5 * (v2t + t2v)
    }

    #[test]
    fn contrastive_cases() {
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(contrastive_seen(&one, &one, &[0], 0.07).unwrap().abs() < 1e-15);

        let eye = Tensor::eye(3);
        let l = contrastive_seen(&eye, &eye, &[0, 1, 2], 1e-3).unwrap();
        assert!(l < 1e-12, "{l}");

        let mut s = RngStream::new(2, 0).generator();
        let e_v = s.gaussian(&[4, 5], 1.0);
        let e_t = s.gaussian(&[3, 5], 1.0);
        let y = [2, 0, 2, 1];
        let got = contrastive_seen(&e_v, &e_t, &y, 0.07).unwrap();
        assert!((got - infonce_oracle(&e_v, &e_t, &y, 0.07)).abs() < 1e-10);
        assert!(matches!(
            contrastive_seen(&e_v, &e_t, &y, 0.0),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn clip_consistency_cases() {
        let refs = Tensor::eye(3);
        let l = clip_consistency(&Tensor::eye(3), &refs, &[0, 1, 2]).unwrap();
        assert!(l < 3f64.ln());

        let same = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let mut s = RngStream::new(3, 0).generator();
        let e_v = s.gaussian(&[4, 2], 1.0);
        let l = clip_consistency(&e_v, &same, &[0, 1, 2, 0]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);

        let e_v = s.gaussian(&[3, 4], 1.0);
        let refs = s.gaussian(&[2, 4], 1.0);
        let y = [1, 0, 1];
        let mut want = 0.0;
        for i in 0..3 {
            let cos: Vec<f64> = (0..2).map(|k| cosine_sim(&row(&e_v, i), &row(&refs, k)).unwrap()).collect();
            want += lse(&cos) - cos[y[i]];
        }
        let got = clip_consistency(&e_v, &refs, &y).unwrap();
        assert!((got - want / 3.0).abs() < 1e-12);
        assert!(matches!(
            clip_consistency(&Tensor::zeros(&[1, 4]), &refs, &[0]),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn projection_cases() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(projection_loss(&a, &a).unwrap(), 0.0);
        let b = Tensor::from_rows(&[vec![4.0, 6.0]]).unwrap();
        assert_eq!(projection_loss(&b, &a).unwrap(), 25.0);
        assert!(matches!(
            projection_loss(&a, &Tensor::zeros(&[2, 2])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn negative_prompt_cases() {
        let p = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(negative_prompt_loss(&p, &[0]).unwrap(), 0.0);

        let u = Tensor::filled(&[2, 4], 0.25);
        for y in 0..4 {
            let l = negative_prompt_loss(&u, &[y, (y + 1) % 4]).unwrap();
            assert!((l - 4f64.ln()).abs() < 1e-15);
        }

        let own = Tensor::from_rows(&[vec![0.97, 0.01, 0.01, 0.01]]).unwrap();
        assert!(negative_prompt_loss(&own, &[0]).unwrap() > 4f64.ln());
        assert!(matches!(
            negative_prompt_loss(&Tensor::filled(&[1, 1], 1.0), &[0]),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn negative_loss_minimized_at_complement_uniform() {
        // Grid search over the K=3 simplex; label 0.
        let target = [0.0, 0.5, 0.5];
        let at_target = negative_prompt_loss(&Tensor::from_rows(&[target.to_vec()]).unwrap(), &[0]).unwrap();
        let n = 60;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let p0 = i as f64 / n as f64;
                let p1 = j as f64 / n as f64;
                let p2 = 1.0 - p0 - p1;
                if p1 <= 0.0 || p2 <= 0.0 {
                    continue;
                }
                let l = negative_prompt_loss(&Tensor::from_rows(&[vec![p0, p1, p2]]).unwrap(), &[0]).unwrap();
                assert!(l >= at_target - 1e-15, "({p0},{p1},{p2}) gives {l} < {at_target}");
            }
        }
    }

    #[test]
    fn total_cases() {
        let b = total_loss(1.0, 2.0, 3.0, 4.0, 5.0, 0.0).unwrap();
        assert_eq!(b.total, 10.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, 0.1).unwrap().total, 0.0);
        let mut s = RngStream::new(4, 0).generator();
        let c: Vec<f64> = (0..5).map(|_| s.uniform(0.0, 3.0)).collect();
        let b = total_loss(c[0], c[1], c[2], c[3], c[4], 0.1).unwrap();
        assert!((b.total - (c[0] + c[1] + c[2] + c[3] + 0.1 * c[4])).abs() < 1e-15);
        assert!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn flag_labels() {
        assert_eq!(LossFlags::ALL.label(), "ce+cl+neg+clip+proj");
        assert_eq!(LossFlags::CE_ONLY.label(), "ce");
    }
}

//! Gradient-descent training, zero-shot evaluation and the frozen baseline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::dataset::{build_dataset, hex, identity_projection, model_stream, root_stream, Dataset, Split};
use super::model::{batch_forward, text_forward, Model, ModelVars};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{objective_forward, LossBreakdown, LossSettings, ObjectiveInputs};
use crate::numerics::{cosine_sim, Tensor};
use crate::text_space::{cosine_matrix, PromptBank, PromptVars};

const STREAM_BATCHES: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    /// 0 is the untrained model; epoch `e` is the state after `e` passes.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seen_accuracy: f64,
    pub unseen_accuracy: f64,
    /// `confusion[true][predicted]` over the unseen test set.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub model: Model,
    pub evaluation: ZeroShotResult,
    /// Digest of the state training may read.
    pub training_view: String,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

pub fn confusion(predictions: &[usize], labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        m[y][p] += 1;
    }
    m
}

fn row_argmax(t: &Tensor) -> Vec<usize> {
    (0..t.rows()).map(|r| Tensor::vector(t.row(r).to_vec()).argmax()).collect()
}

fn clips(split: &Split) -> Vec<&Tensor> {
    split.videos.iter().map(|v| v.tensor()).collect()
}

/// Zero-shot predictions for `test` using prompts built from its class descriptions
/// and the model's transferred context.
pub fn evaluate_zero_shot(model: &Model, test: &Split) -> Result<ZeroShotResult> {
    let k = test.classes.len();
    let mut g = Graph::new();
    let vars = model.register(&mut g);
    let bank = PromptVars {
        context: model.transfer_context(k).map(|c| g.leaf(c)),
        desc: g.leaf(test.classes.semantic.clone()),
        neg_desc: g.leaf(test.classes.negative.clone()),
    };
    let (e_t, _) = text_forward(&mut g, &bank, &vars)?;
    let e_v = batch_forward(&mut g, model, &vars, &clips(test))?;
    let cos = cosine_matrix(&mut g, e_v, e_t)?;
    let predictions = row_argmax(g.value(cos));
    Ok(ZeroShotResult {
        accuracy: accuracy(&predictions, &test.labels),
        confusion: confusion(&predictions, &test.labels, k),
        predictions,
    })
}

/// Frozen encoders only: mean-pooled raw features through the identity projection,
/// matched by cosine against the class descriptions.
pub fn baseline_predictions(test: &Split) -> Result<Vec<usize>> {
    let d = test.classes.semantic.shape()[1];
    let mut out = Vec::with_capacity(test.len());
    for v in &test.videos {
        let c = v.channels();
        let n = v.tensor().len() / c;
        let mut mean = vec![0.0; c];
        for p in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += v.tensor().data()[p * c + j];
            }
        }
        let pooled: Vec<f64> = mean.iter().map(|m| m / n as f64).collect();
        let proj = identity_projection(c, d);
        let row = Tensor::new(vec![1, c], pooled)?;
        let e_v = crate::numerics::matmul(&row, &proj)?.reshape(&[d])?;
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..test.classes.len() {
            let s = cosine_sim(&e_v, &Tensor::vector(test.classes.semantic.row(k).to_vec()))?;
            if s > best.1 {
                best = (k, s);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Digest of every frozen input: both splits and the seen bank's frozen fields.
pub fn frozen_digest(ds: &Dataset, bank: &PromptBank) -> String {
    let mut h = Sha256::new();
    h.update(ds.train.digest().as_bytes());
    h.update(ds.test.digest().as_bytes());
    h.update(ds.world.mixing.to_bytes());
    h.update(ds.world.background.to_bytes());
    for t in bank.frozen_tensors() {
        h.update(t.to_bytes());
    }
    hex(&h.finalize())
}

struct Step {
    graph: Graph,
    total: Var,
    loss: LossBreakdown,
    seen_predictions: Vec<usize>,
    params: Vec<Var>,
}

fn forward_step(model: &Model, bank: &PromptBank, split: &Split, batch: &[usize], settings: &LossSettings) -> Result<Step> {
    let mut g = Graph::new();
    let vars: ModelVars = model.register(&mut g);
    let context = model.context.as_ref().map(|c| g.leaf(c.clone()));
    let prompts = PromptVars {
        context,
        desc: g.constant(bank.desc_embed.clone()),
        neg_desc: g.constant(bank.neg_desc_embed.clone()),
    };
    let reference = g.constant(bank.ref_embed.clone());
    let (e_t, e_n) = text_forward(&mut g, &prompts, &vars)?;
    let all = clips(split);
    let batch_clips: Vec<&Tensor> = batch.iter().map(|&i| all[i]).collect();
    let labels: Vec<usize> = batch.iter().map(|&i| split.labels[i]).collect();
    let e_v = batch_forward(&mut g, model, &vars, &batch_clips)?;
    let obj = objective_forward(
        &mut g,
        ObjectiveInputs {
            e_v,
            e_t,
            e_n,
            reference,
        },
        &labels,
        settings,
    )?;
    let loss = obj.breakdown(&g, settings.lambda_n);
    let cos = cosine_matrix(&mut g, e_v, e_t)?;
    let seen_predictions = row_argmax(g.value(cos));
    let params = model.trainable_vars(&vars, context);
    Ok(Step {
        total: obj.total,
        loss,
        seen_predictions,
        params,
        graph: g,
    })
}

fn check_finite(loss: &LossBreakdown, epoch: usize) -> Result<()> {
    let parts = [
        ("ce_s", loss.ce_s),
        ("cl_s", loss.cl_s),
        ("clip_s", loss.clip_s),
        ("proj", loss.proj),
        ("ce_n", loss.ce_n),
        ("total", loss.total),
    ];
    match parts.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, v)) => Err(Error::NonFinite {
            context: format!("epoch {epoch}: loss component {name} = {v}"),
        }),
        None => Ok(()),
    }
}

fn apply_update(model: &mut Model, step: &Step, lr: f64) -> Result<()> {
    let grads = step.graph.backward(step.total);
    let params = model.trainable_mut();
    debug_assert_eq!(params.len(), step.params.len());
    for (p, v) in params.into_iter().zip(&step.params) {
        let grad = grads.get(*v, p.shape());
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                context: "parameter gradient".into(),
            });
        }
        for (x, dx) in p.data_mut().iter_mut().zip(grad.data()) {
            *x -= lr * dx;
        }
    }
    Ok(())
}

fn batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    if size == 0 || size >= n {
        return vec![(0..n).collect()];
    }
    let mut s = root_stream(seed).derive(STREAM_BATCHES).derive(epoch as u64).generator();
    let order = {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, s.below(i + 1));
        }
        idx
    };
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Trains `model` on the seen split, recording metrics after every epoch.
pub fn train_model(cfg: &ExperimentConfig, ds: &Dataset, mut model: Model) -> Result<TrainOutcome> {
    let settings = cfg.loss_settings();
    let seen = &ds.train;
    let bank = PromptBank::new(model.context.clone(), seen.classes.semantic.clone(), seen.classes.negative.clone())?;
    let frozen_before = frozen_digest(ds, &bank);
    let training_view = seen.digest();
    let full: Vec<usize> = (0..seen.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs + 1);
    let mut evaluation = evaluate_zero_shot(&model, &ds.test)?;
    for epoch in 0..=cfg.epochs {
        let step = forward_step(&model, &bank, seen, &full, &settings)?;
        check_finite(&step.loss, epoch)?;
        if epoch > 0 {
            evaluation = evaluate_zero_shot(&model, &ds.test)?;
        }
        records.push(MetricsRecord {
            seed: ds.seed,
            epoch,
            loss: step.loss,
            seen_accuracy: accuracy(&step.seen_predictions, &seen.labels),
            unseen_accuracy: evaluation.accuracy,
            confusion: evaluation.confusion.clone(),
        });
        if epoch == cfg.epochs || cfg.learning_rate == 0.0 {
            continue;
        }
        let plan = batches(seen.len(), cfg.batch_size, ds.seed, epoch);
        if plan.len() == 1 {
            apply_update(&mut model, &step, cfg.learning_rate)?;
        } else {
            drop(step);
            for b in &plan {
                let mini = forward_step(&model, &bank, seen, b, &settings)?;
                check_finite(&mini.loss, epoch)?;
                apply_update(&mut model, &mini, cfg.learning_rate)?;
            }
        }
    }
    let frozen_after = frozen_digest(ds, &bank);
    if frozen_before != frozen_after {
        return Err(Error::Parameter {
            name: "frozen state",
            reason: "frozen inputs changed during training".into(),
        });
    }
    if seen.digest() != training_view {
        return Err(Error::Parameter {
            name: "training view",
            reason: "seen split changed during training".into(),
        });
    }
    Ok(TrainOutcome {
        records,
        model,
        evaluation,
        training_view,
    })
}

/// Builds the dataset and model for `seed` and trains.
pub fn train(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, TrainOutcome)> {
    let ds = build_dataset(cfg, seed)?;
    let model = Model::init(cfg, ds.train.classes.len(), model_stream(seed));
    let out = train_model(cfg, &ds, model)?;
    Ok((ds, out))
}

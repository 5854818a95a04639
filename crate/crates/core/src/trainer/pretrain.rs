use serde::{Deserialize, Serialize};

use super::config::{PretrainConfig, RunConfig};
use super::finetune::pretrain_data;
use super::optim::AdamW;
use crate::backbone::{backward, cross_entropy, forward_with, BackboneWeights, ForwardOptions, GateMode, PeftSet};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numkernel::Rng;
use crate::tasks::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: f64,
    pub steps: usize,
    pub digest: String,
}

/// Backbone-only accuracy on `data`.
pub fn backbone_accuracy(weights: &BackboneWeights, data: &Dataset) -> Result<f64> {
    let peft = PeftSet::empty();
    let opts = ForwardOptions::gates(GateMode::AllOn);
    let mut correct = 0usize;
    for ex in &data.examples {
        let (logits, _) = forward_with(weights, &peft, &ex.tokens, &opts)?;
        correct += usize::from(argmax(&logits) == ex.label);
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy over an empty dataset".into()));
    }
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Full-parameter training of a freshly initialized backbone.
///
/// Zero epochs return the seeded initialization unchanged.
pub fn pretrain(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Result<(BackboneWeights, PretrainReport)> {
    let rng = Rng::new(cfg.pretrain.seed);
    let mut weights = BackboneWeights::init(cfg.dims(), &mut rng.fork(0))?;
    let report = pretrain_from(&mut weights, &cfg.pretrain, train, val, &mut rng.fork(1))?;
    Ok((weights, report))
}

pub fn pretrain_from(
    weights: &mut BackboneWeights,
    pc: &PretrainConfig,
    train: &Dataset,
    val: &Dataset,
    order_rng: &mut Rng,
) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput("pretraining set is empty".into()));
    }
    let peft = PeftSet::empty();
    let opts = ForwardOptions::gates(GateMode::AllOn);
    let sizes: Vec<usize> = weights.tensors().iter().map(|t| t.len()).collect();
    let mut opt = AdamW::new(&sizes, pc.lr, pc.weight_decay);
    let batches_per_epoch = train.len().div_ceil(pc.batch_size);
    let total = (pc.epochs * batches_per_epoch).max(1);
    let mut epoch_losses = Vec::with_capacity(pc.epochs);
    let mut step = 0usize;
    for _ in 0..pc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(pc.batch_size) {
            step += 1;
            let mut grads = weights.zeros_like();
            let mut loss = 0.0;
            let inv_b = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &train.examples[i];
                let (logits, cache) = forward_with(weights, &peft, &ex.tokens, &opts)?;
                let (l, mut dl) = cross_entropy(&logits, ex.label)?;
                loss += l * inv_b;
                dl.iter_mut().for_each(|g| *g *= inv_b);
                let out = backward(weights, &peft, &cache, &dl, true)?;
                let g = out.backbone.expect("backbone gradients requested");
                for (acc, t) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.iter_mut().zip(t).for_each(|(a, b)| *a += b);
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("pretraining loss is {loss}"),
                });
            }
            let lr_mult = 1.0 - (step - 1) as f64 / total as f64;
            opt.step(weights.tensors_mut(), &grads.tensors(), lr_mult)?;
            epoch_loss += loss * batch.len() as f64;
        }
        epoch_losses.push(epoch_loss / train.len() as f64);
    }
    if !weights.is_finite() {
        return Err(Error::Training {
            step,
            reason: "non-finite backbone weights".into(),
        });
    }
    Ok(PretrainReport {
        epoch_losses,
        val_accuracy: backbone_accuracy(weights, val)?,
        steps: step,
        digest: weights.digest(),
    })
}

/// The backbone named by `paths.backbone`, or a fresh pretraining run on the
/// configured base task when none is given.
pub fn load_or_pretrain(cfg: &RunConfig) -> Result<(BackboneWeights, Option<PretrainReport>)> {
    if let Some(path) = &cfg.paths.backbone {
        let ck = Checkpoint::load(path)?;
        if ck.backbone.dims != cfg.dims() {
            return Err(Error::Config(format!(
                "backbone at {} has dims {:?}, config wants {:?}",
                path.display(),
                ck.backbone.dims,
                cfg.dims()
            )));
        }
        return Ok((ck.backbone, None));
    }
    let (train, val) = pretrain_data(cfg)?;
    let (w, report) = pretrain(cfg, &train, &val)?;
    Ok((w, Some(report)))
}

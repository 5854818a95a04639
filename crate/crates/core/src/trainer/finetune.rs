use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Schedule, TauOptimizer};
use super::evaluate::{evaluate, EvalReport};
use super::optim::AdamW;
use crate::backbone::{backward, cross_entropy, forward, BackboneWeights, PeftSet, Site};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numkernel::Rng;
use crate::tasks::{gen_shifted_task, gen_sparse_signal_task, Dataset};
use crate::tau_opt::{token_influence, GateState, TauHyper, ThresholdGradient};
use crate::tsgate::gate_counts;

/// Train/validation split of the base task the backbone learns.
pub fn pretrain_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let t = &cfg.task;
    gen_sparse_signal_task(t.pretrain_seed, t.n_train + t.n_val, &t.params())?.split(t.n_val)
}

/// Train/validation split of the shifted fine-tuning task.
pub fn finetune_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let t = &cfg.task;
    let base = gen_sparse_signal_task(t.finetune_seed, t.n_train + t.n_val, &t.params())?;
    gen_shifted_task(&base, t.finetune_seed, &t.shift)?.split(t.n_val)
}

/// Schedule multiplier for 1-based `step` out of `total`.
pub fn lr_multiplier(schedule: Schedule, step: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => 1.0,
        Schedule::Linear => 1.0 - (step - 1) as f64 / total.max(1) as f64,
    }
}

/// Threshold hyperparameters actually used. With TS disabled they reduce to
/// `s = 0, λ = 0`, which keeps every threshold at 0.
pub fn effective_hyper(cfg: &RunConfig) -> TauHyper {
    let mut h = cfg.ts.hyper();
    if !cfg.ts.enabled {
        h.s = 0.0;
        h.lambda = 0.0;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleStep {
    pub id: String,
    pub layer: usize,
    pub site: Site,
    /// Threshold after this step's update.
    pub tau: f64,
    pub g_k: f64,
    pub batch_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub per_module: Vec<ModuleStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleSummary {
    pub id: String,
    pub layer: usize,
    pub site: Site,
    /// Validation sparsity at the final thresholds.
    pub sparsity: f64,
    pub mean_r: f64,
    pub tau_final: f64,
    pub tau_mean: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Population standard deviation of τ over the last half of the steps.
    pub tau_std_last_half: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub mean_sparsity: f64,
    pub trainable_params: usize,
    pub backbone_digest: String,
    pub modules: Vec<ModuleSummary>,
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    /// Record every training gate mask (see [`FinetuneRun::train_masks`]).
    pub dump_masks: bool,
}

/// Everything a fine-tuning run produces, in memory.
#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
    pub eval: EvalReport,
    /// Per module, τ after every step.
    pub tau_trajectories: Vec<Vec<f64>>,
    /// Lines `step example module bits`; `bits` has one character per
    /// position: `1` on, `0` off, `-` padding.
    pub train_masks: Option<String>,
}

impl FinetuneRun {
    /// One JSON object per step, then `{"summary": ...}`.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        #[derive(Serialize)]
        struct Tail<'a> {
            summary: &'a RunSummary,
        }
        out.push_str(&serde_json::to_string(&Tail { summary: &self.summary }).expect("summary serializes"));
        out.push('\n');
        out
    }
}

pub(crate) fn mask_bits(mask: &[f64], valid: &[f64]) -> String {
    mask.iter()
        .zip(valid)
        .map(|(&m, &v)| match (v != 0.0, m != 0.0) {
            (false, _) => '-',
            (true, true) => '1',
            (true, false) => '0',
        })
        .collect()
}

/// Population mean and standard deviation; `(0, 0)` when empty.
pub fn mean_std_pop(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fine-tunes freshly initialized PEFT modules on `train` against the frozen
/// `weights`.
///
/// Each step runs the batch forward with the current thresholds, updates the
/// PEFT parameters with AdamW, then moves every module's threshold using
/// token influences taken from the same forward pass.
pub fn finetune(
    cfg: &RunConfig,
    weights: &BackboneWeights,
    train: &Dataset,
    val: &Dataset,
    opts: &FinetuneOptions,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    weights.validate()?;
    if weights.dims != cfg.dims() {
        return Err(Error::Config(format!(
            "backbone dims {:?} differ from the configured {:?}",
            weights.dims,
            cfg.dims()
        )));
    }
    if train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let digest = weights.digest();
    let root = Rng::new(cfg.seed);
    let points = cfg.peft.attachment_points(cfg.backbone.layers);
    let mut peft = PeftSet::init(
        weights,
        cfg.peft.variant,
        &points,
        |p| cfg.peft.rank_for(p),
        cfg.peft.scale,
        &mut root.fork(1),
    )?;
    let hyper = effective_hyper(cfg);
    let mut gates: Vec<GateState> = (0..peft.len()).map(|_| GateState::new(hyper)).collect();
    let sizes: Vec<usize> = peft
        .modules()
        .iter()
        .flat_map(|m| m.params.tensors().into_iter().map(|t| t.len()))
        .collect();
    let oc = &cfg.optimizer;
    let mut opt = AdamW::new(&sizes, oc.lr, oc.weight_decay);
    let mut order_rng = root.fork(2);
    let total = oc.epochs * train.len().div_ceil(oc.batch_size);
    let ids: Vec<String> = peft.modules().iter().map(|m| m.point.id()).collect();

    let mut records = Vec::with_capacity(total);
    let mut trajectories = vec![Vec::with_capacity(total); peft.len()];
    let mut masks = opts.dump_masks.then(String::new);
    let mut step = 0usize;
    for _ in 0..oc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        for batch in order.chunks(oc.batch_size) {
            step += 1;
            let lr_mult = lr_multiplier(oc.schedule, step, total);
            let inv_b = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut tgs: Vec<ThresholdGradient> = gates
                .iter()
                .map(|g| ThresholdGradient::new(g.tau, hyper.lambda))
                .collect();
            let mut counts = vec![(0usize, 0usize); peft.len()];
            let mut loss = 0.0;
            for &i in batch {
                let ex = &train.examples[i];
                let (logits, cache) = forward(weights, &peft, &gates, &ex.tokens, cfg.ts.enabled)?;
                let (l, mut dl) = cross_entropy(&logits, ex.label)?;
                loss += l * inv_b;
                dl.iter_mut().for_each(|g| *g *= inv_b);
                let out = backward(weights, &peft, &cache, &dl, false)?;
                let flat = out.peft_grads.iter().flatten();
                for (acc, g) in grads.iter_mut().zip(flat) {
                    acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
                for (m, pc) in cache.points.iter().enumerate() {
                    let mu = token_influence(&out.grad_h[m], &pc.delta, &cache.valid)?;
                    tgs[m].add_sequence(&mu, &pc.r, &cache.valid)?;
                    let (on, n) = gate_counts(&pc.mask, &cache.valid)?;
                    counts[m].0 += on;
                    counts[m].1 += n;
                    if let Some(buf) = masks.as_mut() {
                        let _ = writeln!(buf, "{step} {i} {} {}", ids[m], mask_bits(&pc.mask, &cache.valid));
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    reason: format!("loss is {loss}"),
                });
            }

            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            let params: Vec<&mut [f64]> = peft
                .modules_mut()
                .iter_mut()
                .flat_map(|m| m.params.tensors_mut())
                .collect();
            opt.step(params, &grad_refs, lr_mult)?;

            let mut per_module = Vec::with_capacity(gates.len());
            for (m, gate) in gates.iter_mut().enumerate() {
                let g = tgs[m].value();
                let res = match cfg.ablation.tau_optimizer {
                    TauOptimizer::Adam => gate.adam_step(g, lr_mult),
                    TauOptimizer::PlainSgd => gate.sgd_step(g, lr_mult),
                };
                res.map_err(|e| Error::Optimizer {
                    module: ids[m].clone(),
                    reason: format!("step {step}: {e}"),
                })?;
                if !gate.tau.is_finite() {
                    return Err(Error::Optimizer {
                        module: ids[m].clone(),
                        reason: format!("step {step}: threshold became {}", gate.tau),
                    });
                }
                trajectories[m].push(gate.tau);
                let (on, n) = counts[m];
                let point = peft.modules()[m].point;
                per_module.push(ModuleStep {
                    id: ids[m].clone(),
                    layer: point.layer,
                    site: point.site,
                    tau: gate.tau,
                    g_k: g,
                    batch_sparsity: 1.0 - on as f64 / n as f64,
                });
            }
            records.push(StepRecord {
                step,
                loss,
                lr: oc.lr * lr_mult,
                per_module,
            });
        }
    }

    let checkpoint = Checkpoint::new(weights.clone(), peft, gates, cfg.ts.enabled)?;
    let eval = evaluate(&checkpoint, val, None)?;
    if weights.digest() != digest {
        return Err(Error::Contract("backbone weights changed during fine-tuning".into()));
    }
    let modules = eval
        .modules
        .iter()
        .zip(&trajectories)
        .map(|(me, traj)| {
            let (tau_mean, _) = mean_std_pop(traj);
            let (_, tau_std_last_half) = mean_std_pop(&traj[traj.len() / 2..]);
            ModuleSummary {
                id: me.id.clone(),
                layer: me.layer,
                site: me.site,
                sparsity: me.sparsity,
                mean_r: me.mean_r,
                tau_final: traj.last().copied().unwrap_or(0.0),
                tau_mean,
                tau_min: traj.iter().copied().fold(f64::INFINITY, f64::min).min(0.0),
                tau_max: traj.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0),
                tau_std_last_half,
            }
        })
        .collect();
    let summary = RunSummary {
        steps: step,
        final_train_loss: records.last().map_or(f64::NAN, |r| r.loss),
        val_accuracy: eval.accuracy,
        val_loss: eval.loss,
        mean_sparsity: eval.mean_sparsity,
        trainable_params: checkpoint.peft.param_count(),
        backbone_digest: digest,
        modules,
    };
    Ok(FinetuneRun {
        checkpoint,
        records,
        summary,
        eval,
        tau_trajectories: trajectories,
        train_masks: masks,
    })
}

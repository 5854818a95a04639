use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::finetune::mask_bits;
use super::pretrain::argmax;
use crate::backbone::{cross_entropy, forward, Site};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numkernel::row_l2_norms;
use crate::tasks::Dataset;
use crate::tsgate::gate_counts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleEval {
    pub id: String,
    pub layer: usize,
    pub site: Site,
    pub tau: f64,
    /// `1 − on/valid` over every valid token of the dataset.
    pub sparsity: f64,
    /// Mean of the finite `r_i`.
    pub mean_r: f64,
    /// Mean `‖M(x_i)‖`.
    pub mean_delta_norm: f64,
    pub tokens_on: usize,
    pub tokens_valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: f64,
    /// Unweighted mean of the module sparsities.
    pub mean_sparsity: f64,
    pub modules: Vec<ModuleEval>,
}

/// Scores `data` with the checkpoint's frozen thresholds.
///
/// With `mask_sink`, appends one line `eval example module bits` per module
/// and example, in the format of the training mask dump.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, mut mask_sink: Option<&mut String>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let dims = ck.backbone.dims;
    if data.vocab_size > dims.vocab || data.num_classes != dims.classes {
        return Err(Error::Checkpoint(format!(
            "dataset (vocab {}, {} classes) does not fit the checkpoint (vocab {}, {} classes)",
            data.vocab_size, data.num_classes, dims.vocab, dims.classes
        )));
    }
    let n = ck.peft.len();
    let ids: Vec<String> = ck.peft.modules().iter().map(|m| m.point.id()).collect();
    let mut on = vec![0usize; n];
    let mut valid = vec![0usize; n];
    let mut r_sum = vec![0.0; n];
    let mut r_count = vec![0usize; n];
    let mut norm_sum = vec![0.0; n];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (i, ex) in data.examples.iter().enumerate() {
        let (logits, cache) = forward(&ck.backbone, &ck.peft, &ck.gates, &ex.tokens, ck.gating_enabled)?;
        correct += usize::from(argmax(&logits) == ex.label);
        loss += cross_entropy(&logits, ex.label)?.0;
        for (m, pc) in cache.points.iter().enumerate() {
            let (o, v) = gate_counts(&pc.mask, &cache.valid)?;
            on[m] += o;
            valid[m] += v;
            let norms = row_l2_norms(&pc.delta)?;
            for t in 0..cache.valid.len() {
                if cache.valid[t] == 0.0 {
                    continue;
                }
                norm_sum[m] += norms[t];
                if pc.r[t].is_finite() {
                    r_sum[m] += pc.r[t];
                    r_count[m] += 1;
                }
            }
            if let Some(sink) = mask_sink.as_deref_mut() {
                let _ = writeln!(sink, "eval {i} {} {}", ids[m], mask_bits(&pc.mask, &cache.valid));
            }
        }
    }
    let modules: Vec<ModuleEval> = (0..n)
        .map(|m| {
            let point = ck.peft.modules()[m].point;
            ModuleEval {
                id: ids[m].clone(),
                layer: point.layer,
                site: point.site,
                tau: ck.gates[m].tau,
                sparsity: 1.0 - on[m] as f64 / valid[m] as f64,
                mean_r: if r_count[m] == 0 {
                    0.0
                } else {
                    r_sum[m] / r_count[m] as f64
                },
                mean_delta_norm: norm_sum[m] / valid[m] as f64,
                tokens_on: on[m],
                tokens_valid: valid[m],
            }
        })
        .collect();
    let mean_sparsity = if n == 0 {
        0.0
    } else {
        modules.iter().map(|m| m.sparsity).sum::<f64>() / n as f64
    };
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        mean_sparsity,
        modules,
    })
}

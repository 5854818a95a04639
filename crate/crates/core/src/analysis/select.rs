use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::strategy::{SelectionKind, SelectionStrategy};
use super::table::SparsityTable;
use crate::backbone::{AttachmentPoint, BackboneWeights};
use crate::error::{Error, Result};
use crate::numkernel::Rng;
use crate::tasks::Dataset;
use crate::trainer::{finetune, FinetuneOptions, FinetuneRun, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub strategy: SelectionStrategy,
    /// Most important first.
    pub order: Vec<AttachmentPoint>,
    /// Statistic each module was ordered by, aligned with `order`.
    pub scores: Vec<f64>,
    /// Prefix of `order` that is kept.
    pub selected: Vec<AttachmentPoint>,
}

impl Ranking {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,layer,site,score,selected\n");
        for (i, (p, s)) in self.order.iter().zip(&self.scores).enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{s},{}",
                i + 1,
                p.layer,
                p.site,
                u8::from(i < self.selected.len())
            );
        }
        out
    }
}

/// Orders the modules of `table` by `strategy` and keeps the leading share.
/// Ties fall back to `(layer, site)` order.
pub fn rank_modules(table: &SparsityTable, strategy: &SelectionStrategy) -> Result<Ranking> {
    strategy.validate()?;
    if table.rows.len() < 2 {
        return Err(Error::Selection("ranking needs at least two modules".into()));
    }
    let mut rows: Vec<_> = table.rows.iter().collect();
    rows.sort_by_key(|r| r.point());
    let score = |r: &super::table::SparsityRow| match strategy.kind {
        SelectionKind::SLow | SelectionKind::SHigh | SelectionKind::HalfRank | SelectionKind::Random => r.sparsity,
        SelectionKind::NormRelative => r.mean_r,
        SelectionKind::NormAbs => r.mean_delta_norm,
    };
    match strategy.kind {
        SelectionKind::SLow | SelectionKind::HalfRank => rows.sort_by(|a, b| score(a).total_cmp(&score(b))),
        SelectionKind::SHigh | SelectionKind::NormRelative | SelectionKind::NormAbs => {
            rows.sort_by(|a, b| score(b).total_cmp(&score(a)))
        }
        SelectionKind::Random => Rng::new(strategy.seed).shuffle(&mut rows),
    }
    let order: Vec<AttachmentPoint> = rows.iter().map(|r| r.point()).collect();
    let keep = strategy.keep_count(order.len());
    if keep == 0 {
        return Err(Error::Selection("no module survives rounding".into()));
    }
    Ok(Ranking {
        strategy: *strategy,
        scores: rows.iter().map(|r| score(r)).collect(),
        selected: order[..keep].to_vec(),
        order,
    })
}

/// The config of a plain (ungated) retrain on `selection`; `half_rank`
/// keeps every module and halves each rank.
pub fn retrain_config(base: &RunConfig, ranking: &Ranking) -> Result<RunConfig> {
    if ranking.selected.is_empty() {
        return Err(Error::Selection("empty selection".into()));
    }
    let mut cfg = base.clone();
    cfg.ts.enabled = false;
    if ranking.strategy.kind == SelectionKind::HalfRank {
        let half = |r: usize| {
            if r.is_multiple_of(2) {
                Ok(r / 2)
            } else {
                Err(Error::Selection(format!("half_rank needs even ranks, found {r}")))
            }
        };
        cfg.peft.rank = half(cfg.peft.rank)?;
        if let Some(sched) = cfg.peft.rank_schedule.as_mut() {
            for e in sched {
                e.rank = half(e.rank)?;
            }
        }
    } else {
        let mut sel = ranking.selected.clone();
        sel.sort();
        cfg.peft.points = Some(sel);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fresh plain fine-tune restricted to the ranking's selection.
pub fn select_and_retrain(
    weights: &BackboneWeights,
    train: &Dataset,
    val: &Dataset,
    base: &RunConfig,
    ranking: &Ranking,
) -> Result<FinetuneRun> {
    let cfg = retrain_config(base, ranking)?;
    finetune(&cfg, weights, train, val, &FinetuneOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub percent: f64,
    pub seed: u64,
    pub val_metric: f64,
    pub trainable_params: usize,
    pub modules: Vec<AttachmentPoint>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("percent,seed,val_metric,trainable_params\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.percent, r.seed, r.val_metric, r.trainable_params);
    }
    out
}

/// One lowest-sparsity-first retrain per percentage, in the given order.
/// Every selection is a prefix of the same ordering.
pub fn sweep_percentages(
    weights: &BackboneWeights,
    train: &Dataset,
    val: &Dataset,
    base: &RunConfig,
    table: &SparsityTable,
    percents: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(percents.len());
    for &percent in percents {
        let ranking = rank_modules(table, &SelectionStrategy::new(SelectionKind::SLow, percent))?;
        let run = select_and_retrain(weights, train, val, base, &ranking)?;
        rows.push(SweepRow {
            percent,
            seed: base.seed,
            val_metric: run.summary.val_accuracy,
            trainable_params: run.summary.trainable_params,
            modules: ranking.selected,
        });
    }
    Ok(rows)
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::{AttachmentPoint, Site};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tasks::Dataset;
use crate::trainer::{evaluate, EvalReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub layer: usize,
    pub site: Site,
    /// In `[0, 1]`.
    pub sparsity: f64,
    pub mean_r: f64,
    pub mean_delta_norm: f64,
    pub tokens: usize,
}

impl SparsityRow {
    pub fn point(&self) -> AttachmentPoint {
        AttachmentPoint::new(self.layer, self.site)
    }
}

/// Per-module sparsity with population mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityTable {
    pub rows: Vec<SparsityRow>,
    pub mean: f64,
    pub std: f64,
}

impl SparsityTable {
    pub fn from_rows(mut rows: Vec<SparsityRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("sparsity table needs at least one module".into()));
        }
        if let Some(r) = rows.iter().find(|r| !(0.0..=1.0).contains(&r.sparsity)) {
            return Err(Error::Contract(format!("sparsity {} outside [0, 1]", r.sparsity)));
        }
        rows.sort_by_key(|r| r.point());
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.sparsity).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|r| (r.sparsity - mean) * (r.sparsity - mean))
            .sum::<f64>()
            / n;
        Ok(Self {
            rows,
            mean,
            std: var.sqrt(),
        })
    }

    pub fn from_eval(report: &EvalReport) -> Result<Self> {
        Self::from_rows(
            report
                .modules
                .iter()
                .map(|m| SparsityRow {
                    layer: m.layer,
                    site: m.site,
                    sparsity: m.sparsity,
                    mean_r: m.mean_r,
                    mean_delta_norm: m.mean_delta_norm,
                    tokens: m.tokens_valid,
                })
                .collect(),
        )
    }

    /// Columns `layer,site,sparsity_pct,mean_r,tokens`, then `mean` and `std`
    /// footer rows. The leading comment line states the std convention.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# footer std is the population standard deviation (divide by N)\n");
        out.push_str("layer,site,sparsity_pct,mean_r,tokens\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.layer,
                r.site,
                100.0 * r.sparsity,
                r.mean_r,
                r.tokens
            );
        }
        let (mr, sr) = crate::trainer::mean_std_pop(&self.rows.iter().map(|r| r.mean_r).collect::<Vec<_>>());
        let tokens: usize = self.rows.iter().map(|r| r.tokens).sum();
        let _ = writeln!(out, "mean,,{},{mr},{tokens}", 100.0 * self.mean);
        let _ = writeln!(out, "std,,{},{sr},", 100.0 * self.std);
        out
    }
}

/// Sparsity of every module of a token-selective checkpoint over `data`.
pub fn module_sparsity_table(ck: &Checkpoint, data: &Dataset) -> Result<SparsityTable> {
    if ck.peft.is_empty() || !ck.gating_enabled {
        return Err(Error::Contract("checkpoint has no token-selective modules".into()));
    }
    SparsityTable::from_eval(&evaluate(ck, data, None)?)
}

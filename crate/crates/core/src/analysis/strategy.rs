use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    /// Lowest sparsity first.
    SLow,
    /// Highest sparsity first.
    SHigh,
    /// Largest mean `‖M(x)‖/‖W₀x‖` first.
    NormRelative,
    /// Largest mean `‖M(x)‖` first.
    NormAbs,
    /// Uniform random order.
    Random,
    /// Every module at half rank.
    HalfRank,
}

impl SelectionKind {
    pub fn name(self) -> &'static str {
        match self {
            SelectionKind::SLow => "s_low",
            SelectionKind::SHigh => "s_high",
            SelectionKind::NormRelative => "norm_relative",
            SelectionKind::NormAbs => "norm_abs",
            SelectionKind::Random => "random",
            SelectionKind::HalfRank => "half_rank",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionStrategy {
    pub kind: SelectionKind,
    /// Fraction of modules kept, in `(0, 1]`.
    pub percent: f64,
    /// Only read by [`SelectionKind::Random`].
    #[serde(default)]
    pub seed: u64,
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        Self {
            kind: SelectionKind::SLow,
            percent: 0.5,
            seed: 0,
        }
    }
}

impl SelectionStrategy {
    pub fn new(kind: SelectionKind, percent: f64) -> Self {
        Self { kind, percent, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.percent > 0.0 && self.percent <= 1.0) {
            return Err(Error::Config(format!(
                "selection percent {} must lie in (0, 1]",
                self.percent
            )));
        }
        if self.kind == SelectionKind::HalfRank && self.percent != 1.0 {
            return Err(Error::Config("half_rank keeps every module; percent must be 1".into()));
        }
        Ok(())
    }

    /// Modules kept out of `n`: nearest whole count, at least one.
    pub fn keep_count(&self, n: usize) -> usize {
        ((self.percent * n as f64).round() as usize).clamp(1, n.max(1))
    }
}

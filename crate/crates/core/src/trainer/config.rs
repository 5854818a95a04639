//! Run configuration. Every section has defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::SelectionStrategy;
use crate::backbone::{AttachmentPoint, BackboneDims, Site};
use crate::error::{Error, Result};
use crate::peft::PeftVariant;
use crate::tasks::{ShiftRule, TaskParams};
use crate::tau_opt::TauHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub k_signal: usize,
    pub min_len: Option<usize>,
    pub n_train: usize,
    pub n_val: usize,
    /// Seed of the base task the backbone is pretrained on.
    pub pretrain_seed: u64,
    /// Seed of the fine-tuning task before the shift is applied.
    pub finetune_seed: u64,
    pub shift: ShiftRule,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let p = TaskParams::default();
        Self {
            seq_len: p.seq_len,
            vocab_size: p.vocab_size,
            num_classes: p.num_classes,
            k_signal: p.k_signal,
            min_len: None,
            n_train: 4096,
            n_val: 1024,
            pretrain_seed: 1,
            finetune_seed: 2,
            shift: ShiftRule::PermuteClasses { perm: vec![1, 2, 3, 0] },
        }
    }
}

impl TaskConfig {
    pub fn params(&self) -> TaskParams {
        TaskParams {
            seq_len: self.seq_len,
            vocab_size: self.vocab_size,
            num_classes: self.num_classes,
            k_signal: self.k_signal,
            min_len: self.min_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub ffn: usize,
    pub layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            ffn: 64,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            lr: 5e-3,
            weight_decay: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Static rank override for one module (AdaLoRA-style fixed schedule).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankOverride {
    pub layer: usize,
    pub site: Site,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeftConfig {
    pub variant: PeftVariant,
    /// LoRA/DoRA rank, or adapter bottleneck width.
    pub rank: usize,
    pub scale: f64,
    /// Sites attached in every layer, unless `points` is given.
    pub targets: Vec<Site>,
    pub points: Option<Vec<AttachmentPoint>>,
    pub rank_schedule: Option<Vec<RankOverride>>,
}

impl Default for PeftConfig {
    fn default() -> Self {
        Self {
            variant: PeftVariant::Lora,
            rank: 8,
            scale: 0.5,
            targets: vec![Site::QProj, Site::KProj, Site::VProj, Site::FfnUp, Site::FfnDown],
            points: None,
            rank_schedule: None,
        }
    }
}

impl PeftConfig {
    pub fn attachment_points(&self, layers: usize) -> Vec<AttachmentPoint> {
        match &self.points {
            Some(points) => {
                let mut p = points.clone();
                p.sort();
                p
            }
            None => {
                let mut targets = self.targets.clone();
                targets.sort();
                targets.dedup();
                (0..layers)
                    .flat_map(|l| targets.iter().map(move |&s| AttachmentPoint::new(l, s)))
                    .collect()
            }
        }
    }

    pub fn rank_for(&self, point: &AttachmentPoint) -> usize {
        self.rank_schedule
            .as_ref()
            .and_then(|sched| sched.iter().find(|e| e.layer == point.layer && e.site == point.site))
            .map_or(self.rank, |e| e.rank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Linear decay from the base rate towards zero over the run.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 2,
            schedule: Schedule::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsConfig {
    pub enabled: bool,
    pub s: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TsConfig {
    fn default() -> Self {
        let h = TauHyper::default();
        Self {
            enabled: true,
            s: h.s,
            lambda: h.lambda,
            alpha: h.alpha,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
        }
    }
}

impl TsConfig {
    pub fn hyper(&self) -> TauHyper {
        TauHyper {
            s: self.s,
            lambda: self.lambda,
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauOptimizer {
    #[default]
    Adam,
    PlainSgd,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub tau_optimizer: TauOptimizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub strategy: SelectionStrategy,
    pub percents: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            strategy: SelectionStrategy::default(),
            percents: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Pretrained backbone checkpoint; pretrained in-process when absent.
    pub backbone: Option<PathBuf>,
    /// Fine-tuned checkpoint for `evaluate` and the analysis commands.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds PEFT initialization and batch order.
    pub seed: u64,
    pub task: TaskConfig,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub peft: PeftConfig,
    pub optimizer: OptimizerConfig,
    pub ts: TsConfig,
    pub ablation: AblationConfig,
    pub analysis: AnalysisConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving relative input paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut cfg.paths.backbone, &mut cfg.paths.checkpoint]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dims(&self) -> BackboneDims {
        BackboneDims {
            vocab: self.task.vocab_size,
            hidden: self.backbone.hidden,
            ffn: self.backbone.ffn,
            layers: self.backbone.layers,
            classes: self.task.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.params().validate()?;
        self.dims().validate()?;
        if self.task.n_train == 0 || self.task.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be positive".into()));
        }
        if self.optimizer.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for (name, v) in [
            ("optimizer.lr", self.optimizer.lr),
            ("optimizer.weight_decay", self.optimizer.weight_decay),
            ("pretrain.lr", self.pretrain.lr),
            ("pretrain.weight_decay", self.pretrain.weight_decay),
            ("peft.scale", self.peft.scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        if self.peft.rank == 0 {
            return Err(Error::Config("peft.rank must be at least 1".into()));
        }
        if let Some(sched) = &self.peft.rank_schedule {
            if sched.iter().any(|e| e.rank == 0) {
                return Err(Error::Config("rank_schedule entries must have rank ≥ 1".into()));
            }
        }
        let points = self.peft.attachment_points(self.backbone.layers);
        if points.is_empty() {
            return Err(Error::Config("no PEFT attachment points".into()));
        }
        if points.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate PEFT attachment point".into()));
        }
        if let Some(p) = points.iter().find(|p| p.layer >= self.backbone.layers) {
            return Err(Error::Config(format!("attachment {} beyond the last layer", p.id())));
        }
        self.ts.hyper().validate()?;
        self.analysis.strategy.validate()?;
        if self.analysis.percents.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Config("sweep percents must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(cfg.peft.attachment_points(2).len(), 10);
        assert_eq!((cfg.ts.beta1, cfg.ts.beta2, cfg.ts.alpha), (0.9, 0.98, 1.0));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 3}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"ts": {"lamda": 0.1}}"#),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_json(r#"{"seed": 3, "ts": {"lambda": 0.1}}"#).is_ok());
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            r#"{"ts": {"beta1": 1.0}}"#,
            r#"{"optimizer": {"batch_size": 0}}"#,
            r#"{"task": {"k_signal": 40}}"#,
            r#"{"peft": {"points": [{"layer": 9, "site": "q_proj"}]}}"#,
            r#"{"peft": {"targets": []}}"#,
        ] {
            assert!(RunConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn rank_schedule_overrides() {
        let cfg = RunConfig::from_json(
            r#"{"peft": {"rank": 8, "rank_schedule": [{"layer": 1, "site": "ffn_up", "rank": 2}]}}"#,
        )
        .unwrap();
        assert_eq!(cfg.peft.rank_for(&AttachmentPoint::new(1, Site::FfnUp)), 2);
        assert_eq!(cfg.peft.rank_for(&AttachmentPoint::new(0, Site::FfnUp)), 8);
    }
}

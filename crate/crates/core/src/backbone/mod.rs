//! Small pre-norm transformer encoder classifier.
//!
//! Each layer is single-head attention followed by a GELU feed-forward block,
//! both with residual connections. The classifier reads the final-layer
//! representation mean-pooled over non-padding tokens. PEFT modules attach to
//! the six linear sites of a layer.

mod backward;
mod forward;
mod weights;

pub use backward::{backward, cross_entropy, BackwardOutput};
pub use forward::{forward, forward_with, ForwardCache, ForwardOptions, GateMode, Perturbation, PointCache};
pub use weights::{BackboneDims, BackboneWeights, LayerWeights};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Rng;
use crate::peft::{PeftParams, PeftVariant};

/// Linear sites of a layer that can host a PEFT module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    QProj,
    KProj,
    VProj,
    OProj,
    FfnUp,
    FfnDown,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::QProj,
        Site::KProj,
        Site::VProj,
        Site::OProj,
        Site::FfnUp,
        Site::FfnDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::QProj => "q_proj",
            Site::KProj => "k_proj",
            Site::VProj => "v_proj",
            Site::OProj => "o_proj",
            Site::FfnUp => "ffn_up",
            Site::FfnDown => "ffn_down",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown site {s:?}")))
    }
}

/// A (layer, site) pair. Orders by layer, then by site declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttachmentPoint {
    pub layer: usize,
    pub site: Site,
}

impl AttachmentPoint {
    pub fn new(layer: usize, site: Site) -> Self {
        Self { layer, site }
    }

    pub fn id(&self) -> String {
        format!("layers.{}.{}", self.layer, self.site)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftModule {
    pub point: AttachmentPoint,
    pub params: PeftParams,
}

/// The PEFT modules attached to a backbone, at most one per point.
///
/// Every mutable access bumps a version number that forward caches record,
/// so a backward pass can refuse a cache built from older parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftSet {
    modules: Vec<PeftModule>,
    #[serde(skip)]
    version: u64,
}

impl PeftSet {
    pub fn empty() -> Self {
        Self {
            modules: Vec::new(),
            version: 0,
        }
    }

    pub fn new(modules: Vec<PeftModule>) -> Result<Self> {
        let mut points: Vec<_> = modules.iter().map(|m| m.point).collect();
        points.sort();
        if let Some(w) = points.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("two PEFT modules at {}", w[0].id())));
        }
        Ok(Self { modules, version: 0 })
    }

    /// Fresh modules at `points`; `rank_of` gives the rank (or adapter
    /// bottleneck) per point.
    pub fn init(
        weights: &BackboneWeights,
        variant: PeftVariant,
        points: &[AttachmentPoint],
        rank_of: impl Fn(&AttachmentPoint) -> usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut modules = Vec::with_capacity(points.len());
        for point in points {
            weights.check_point(point)?;
            let w0 = weights.site_weight(point);
            let params = PeftParams::init(variant, w0, rank_of(point), scale, rng)?;
            modules.push(PeftModule { point: *point, params });
        }
        Self::new(modules)
    }

    pub fn modules(&self) -> &[PeftModule] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [PeftModule] {
        self.version += 1;
        &mut self.modules
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn index_of(&self, point: &AttachmentPoint) -> Option<usize> {
        self.modules.iter().position(|m| m.point == *point)
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(|m| m.params.param_count()).sum()
    }

    pub fn validate_against(&self, weights: &BackboneWeights) -> Result<()> {
        for m in &self.modules {
            weights.check_point(&m.point)?;
            let (d_in, d_out) = weights.site_weight(&m.point).shape();
            let ok = match &m.params {
                PeftParams::Lora(p) => p.a.cols() == d_in && p.b.rows() == d_out && p.a.rows() == p.b.cols(),
                PeftParams::Dora(p) => {
                    p.a.cols() == d_in && p.b.rows() == d_out && p.a.rows() == p.b.cols() && p.magnitude.len() == d_out
                }
                PeftParams::Adapter(p) => p.down.cols() == d_in && p.up.rows() == d_out && p.down.rows() == p.up.cols(),
            };
            if !ok {
                return Err(Error::Shape(format!(
                    "PEFT module at {} does not fit the site",
                    m.point.id()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;

//! Single-document JSON checkpoints.
//!
//! Floats are written as the shortest decimal that parses back to the same
//! bits, so a save/load round trip is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneWeights, PeftSet};
use crate::error::{Error, Result};
use crate::tau_opt::GateState;

pub const SCHEMA_VERSION: u32 = 1;
pub const FLOAT_ENCODING: &str = "shortest-roundtrip-decimal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub float_encoding: String,
    pub backbone: BackboneWeights,
    pub peft: PeftSet,
    /// One per PEFT module, same order.
    pub gates: Vec<GateState>,
    pub gating_enabled: bool,
}

impl Checkpoint {
    pub fn new(backbone: BackboneWeights, peft: PeftSet, gates: Vec<GateState>, gating_enabled: bool) -> Result<Self> {
        let ck = Self {
            schema_version: SCHEMA_VERSION,
            float_encoding: FLOAT_ENCODING.into(),
            backbone,
            peft,
            gates,
            gating_enabled,
        };
        ck.validate()?;
        Ok(ck)
    }

    /// A backbone with no PEFT modules.
    pub fn backbone_only(backbone: BackboneWeights) -> Result<Self> {
        Self::new(backbone, PeftSet::empty(), Vec::new(), false)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.float_encoding != FLOAT_ENCODING {
            return bad(format!("unknown float encoding {:?}", self.float_encoding));
        }
        if self.gates.len() != self.peft.len() {
            return bad(format!(
                "{} gate states for {} PEFT modules",
                self.gates.len(),
                self.peft.len()
            ));
        }
        let wrap = |e: Error| Error::Checkpoint(e.to_string());
        self.backbone.validate().map_err(wrap)?;
        PeftSet::new(self.peft.modules().to_vec()).map_err(wrap)?;
        self.peft.validate_against(&self.backbone).map_err(wrap)?;
        for (g, m) in self.gates.iter().zip(self.peft.modules()) {
            if !g.tau.is_finite() || !(g.v >= 0.0) {
                return bad(format!("invalid gate state at {}", m.point.id()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

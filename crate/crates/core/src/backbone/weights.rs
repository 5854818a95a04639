use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttachmentPoint, Site};
use crate::error::{Error, Result};
use crate::numkernel::{seeded_init, InitScheme, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneDims {
    pub vocab: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub layers: usize,
    pub classes: usize,
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.hidden == 0 || self.ffn == 0 || self.layers == 0 || self.classes < 2 {
            return Err(Error::Config(format!("invalid backbone dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    /// `[H × F]`
    pub w_up: Matrix,
    /// `[F × H]`
    pub w_down: Matrix,
}

impl LayerWeights {
    pub fn site(&self, site: Site) -> &Matrix {
        match site {
            Site::QProj => &self.wq,
            Site::KProj => &self.wk,
            Site::VProj => &self.wv,
            Site::OProj => &self.wo,
            Site::FfnUp => &self.w_up,
            Site::FfnDown => &self.w_down,
        }
    }

    pub fn site_mut(&mut self, site: Site) -> &mut Matrix {
        match site {
            Site::QProj => &mut self.wq,
            Site::KProj => &mut self.wk,
            Site::VProj => &mut self.wv,
            Site::OProj => &mut self.wo,
            Site::FfnUp => &mut self.w_up,
            Site::FfnDown => &mut self.w_down,
        }
    }
}

/// Frozen backbone parameters. Also used as the gradient container during
/// pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneWeights {
    pub dims: BackboneDims,
    /// `[vocab × H]`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Vec<f64>,
    pub final_bias: Vec<f64>,
    /// `[H × classes]`
    pub head: Matrix,
    pub head_bias: Vec<f64>,
}

impl BackboneWeights {
    /// Seeded initialization: unit-variance embeddings, `1/sqrt(fan_in)`
    /// normal projections, identity layer norms, zero biases.
    pub fn init(dims: BackboneDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let (h, f) = (dims.hidden, dims.ffn);
        let normal =
            |rows, cols, fan_in, rng: &mut Rng| seeded_init(rows, cols, rng, InitScheme::ScaledNormal { fan_in });
        let embedding = normal(dims.vocab, h, 1, rng)?;
        let mut layers = Vec::with_capacity(dims.layers);
        for _ in 0..dims.layers {
            layers.push(LayerWeights {
                ln1_gain: vec![1.0; h],
                ln1_bias: vec![0.0; h],
                wq: normal(h, h, h, rng)?,
                wk: normal(h, h, h, rng)?,
                wv: normal(h, h, h, rng)?,
                wo: normal(h, h, h, rng)?,
                ln2_gain: vec![1.0; h],
                ln2_bias: vec![0.0; h],
                w_up: normal(h, f, h, rng)?,
                w_down: normal(f, h, f, rng)?,
            });
        }
        Ok(Self {
            dims,
            embedding,
            layers,
            final_gain: vec![1.0; h],
            final_bias: vec![0.0; h],
            head: normal(h, dims.classes, h, rng)?,
            head_bias: vec![0.0; dims.classes],
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn check_point(&self, point: &AttachmentPoint) -> Result<()> {
        if point.layer >= self.layers.len() {
            return Err(Error::Config(format!(
                "attachment {} but the backbone has {} layers",
                point.id(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    /// Panics if `point.layer` is out of range; see [`Self::check_point`].
    pub fn site_weight(&self, point: &AttachmentPoint) -> &Matrix {
        self.layers[point.layer].site(point.site)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.data()];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain[..],
                &l.ln1_bias[..],
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.ln2_gain[..],
                &l.ln2_bias[..],
                l.w_up.data(),
                l.w_down.data(),
            ]);
        }
        out.extend([
            &self.final_gain[..],
            &self.final_bias[..],
            self.head.data(),
            &self.head_bias[..],
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.data_mut()];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain[..],
                &mut l.ln1_bias[..],
                l.wq.data_mut(),
                l.wk.data_mut(),
                l.wv.data_mut(),
                l.wo.data_mut(),
                &mut l.ln2_gain[..],
                &mut l.ln2_bias[..],
                l.w_up.data_mut(),
                l.w_down.data_mut(),
            ]);
        }
        out.extend([
            &mut self.final_gain[..],
            &mut self.final_bias[..],
            self.head.data_mut(),
            &mut self.head_bias[..],
        ]);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over the bit patterns of every weight, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors() {
            hasher.update((t.len() as u64).to_le_bytes());
            for v in t {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        d.validate()?;
        let sq = (d.hidden, d.hidden);
        let bad = |what: &str| Err(Error::Shape(format!("backbone {what} has the wrong shape")));
        if self.embedding.shape() != (d.vocab, d.hidden) {
            return bad("embedding");
        }
        if self.layers.len() != d.layers {
            return bad("layer list");
        }
        for l in &self.layers {
            if [&l.wq, &l.wk, &l.wv, &l.wo].iter().any(|w| w.shape() != sq)
                || l.w_up.shape() != (d.hidden, d.ffn)
                || l.w_down.shape() != (d.ffn, d.hidden)
                || [&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias]
                    .iter()
                    .any(|v| v.len() != d.hidden)
            {
                return bad("layer");
            }
        }
        if self.head.shape() != (d.hidden, d.classes)
            || self.head_bias.len() != d.classes
            || self.final_gain.len() != d.hidden
            || self.final_bias.len() != d.hidden
        {
            return bad("head");
        }
        if !self.is_finite() {
            return Err(Error::Numerical("backbone has non-finite weights".into()));
        }
        Ok(())
    }
}

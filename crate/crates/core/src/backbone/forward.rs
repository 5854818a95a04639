use super::{BackboneWeights, PeftSet, Site};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::peft::DeltaCache;
use crate::tasks::PAD;
use crate::tau_opt::GateState;
use crate::tsgate::{apply_gate, gate, relative_magnitudes};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// How gate masks are chosen during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GateMode<'a> {
    /// Every gate on (gating disabled).
    AllOn,
    /// Threshold per module, in [`PeftSet`] order.
    Threshold(&'a [f64]),
    /// Externally fixed masks per module (length `T` each).
    Fixed(&'a [Vec<f64>]),
}

/// Adds `gamma · M(x_token)` to the gated output of one module at one token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub module: usize,
    pub token: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub gates: GateMode<'a>,
    pub perturb: Option<Perturbation>,
}

impl<'a> ForwardOptions<'a> {
    pub fn gates(gates: GateMode<'a>) -> Self {
        Self { gates, perturb: None }
    }
}

/// Quantities recorded at one attachment point.
#[derive(Debug, Clone)]
pub struct PointCache {
    pub input: Matrix,
    pub base: Matrix,
    pub delta: Matrix,
    pub delta_cache: DeltaCache,
    pub r: Vec<f64>,
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub a: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Matrix,
    pub ctx: Matrix,
    pub ln2: LnCache,
    pub b: Matrix,
    pub u: Matrix,
    pub z: Matrix,
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    pub valid: Vec<f64>,
    /// Per PEFT module, in [`PeftSet`] order.
    pub points: Vec<PointCache>,
    pub(crate) layers: Vec<LayerCache>,
    pub(crate) final_ln: LnCache,
    pub(crate) pooled: Vec<f64>,
    pub(crate) peft_version: u64,
}

impl ForwardCache {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

pub(crate) fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LnCache) {
    let (t, h) = x.shape();
    let mut xhat = Matrix::zeros(t, h);
    let mut out = Matrix::zeros(t, h);
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..h {
            let n = (row[j] - mean) * is;
            xhat.set(i, j, n);
            out.set(i, j, gain[j] * n + bias[j]);
        }
    }
    (out, LnCache { xhat, inv_std })
}

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Row softmax of `q·kᵀ/sqrt(H)` restricted to valid keys.
fn attention_probs(q: &Matrix, k: &Matrix, valid: &[f64]) -> Result<Matrix> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_nt(k)?;
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, s) in row.iter_mut().enumerate() {
            *s *= scale;
            if valid[j] != 0.0 && *s > max {
                max = *s;
            }
        }
        let mut total = 0.0;
        for (j, s) in row.iter_mut().enumerate() {
            *s = if valid[j] != 0.0 { (*s - max).exp() } else { 0.0 };
            total += *s;
        }
        for s in row.iter_mut() {
            *s /= total;
        }
    }
    Ok(scores)
}

struct SiteRunner<'a> {
    weights: &'a BackboneWeights,
    peft: &'a PeftSet,
    opts: &'a ForwardOptions<'a>,
    points: Vec<Option<PointCache>>,
}

impl SiteRunner<'_> {
    fn run(&mut self, layer: usize, site: Site, x: &Matrix) -> Result<Matrix> {
        let w0 = self.weights.layers[layer].site(site);
        let base = x.matmul(w0)?;
        let Some(idx) = self.peft.index_of(&super::AttachmentPoint::new(layer, site)) else {
            return Ok(base);
        };
        let params = &self.peft.modules()[idx].params;
        let (delta, delta_cache) = params.delta_forward(w0, x)?;
        let r = relative_magnitudes(&base, &delta)?;
        let mask = match self.opts.gates {
            GateMode::AllOn => vec![1.0; x.rows()],
            GateMode::Threshold(taus) => gate(&r, taus[idx]),
            GateMode::Fixed(masks) => {
                let m = masks[idx].clone();
                if m.len() != x.rows() {
                    return Err(Error::Shape(format!(
                        "fixed mask for module {idx} has {} entries for {} tokens",
                        m.len(),
                        x.rows()
                    )));
                }
                m
            }
        };
        let mut h = apply_gate(&base, &delta, &mask)?;
        if let Some(p) = self.opts.perturb.filter(|p| p.module == idx) {
            for (o, d) in h.row_mut(p.token).iter_mut().zip(delta.row(p.token)) {
                *o += p.gamma * d;
            }
        }
        self.points[idx] = Some(PointCache {
            input: x.clone(),
            base,
            delta,
            delta_cache,
            r,
            mask,
        });
        Ok(h)
    }
}

/// Forward pass. Returns the class logits and the cache for [`super::backward`].
pub fn forward_with(
    weights: &BackboneWeights,
    peft: &PeftSet,
    tokens: &[u32],
    opts: &ForwardOptions<'_>,
) -> Result<(Vec<f64>, ForwardCache)> {
    let dims = weights.dims;
    match opts.gates {
        GateMode::Threshold(t) if t.len() != peft.len() => {
            return Err(Error::Shape(format!(
                "{} thresholds for {} modules",
                t.len(),
                peft.len()
            )));
        }
        GateMode::Fixed(m) if m.len() != peft.len() => {
            return Err(Error::Shape(format!(
                "{} fixed masks for {} modules",
                m.len(),
                peft.len()
            )));
        }
        _ => {}
    }
    let valid: Vec<f64> = tokens.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
    let n_valid = valid.iter().sum::<f64>();
    if n_valid == 0.0 {
        return Err(Error::EmptyInput("sequence has no valid tokens".into()));
    }
    let t = tokens.len();
    let mut x = Matrix::zeros(t, dims.hidden);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok as usize >= dims.vocab {
            return Err(Error::Shape(format!(
                "token {tok} outside vocabulary of {}",
                dims.vocab
            )));
        }
        x.row_mut(i).copy_from_slice(weights.embedding.row(tok as usize));
    }

    let mut runner = SiteRunner {
        weights,
        peft,
        opts,
        points: vec![None; peft.len()],
    };
    let mut layers = Vec::with_capacity(dims.layers);
    for (l, lw) in weights.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias);
        let q = runner.run(l, Site::QProj, &a)?;
        let k = runner.run(l, Site::KProj, &a)?;
        let v = runner.run(l, Site::VProj, &a)?;
        let probs = attention_probs(&q, &k, &valid)?;
        let ctx = probs.matmul(&v)?;
        let o = runner.run(l, Site::OProj, &ctx)?;
        x.add_assign(&o)?;

        let (b, ln2) = layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias);
        let u = runner.run(l, Site::FfnUp, &b)?;
        let z = u.map(gelu);
        let d = runner.run(l, Site::FfnDown, &z)?;
        x.add_assign(&d)?;
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            b,
            u,
            z,
        });
    }
    let (final_norm, final_ln) = layer_norm(&x, &weights.final_gain, &weights.final_bias);
    let mut pooled = vec![0.0; dims.hidden];
    for i in 0..t {
        if valid[i] != 0.0 {
            for (p, v) in pooled.iter_mut().zip(final_norm.row(i)) {
                *p += v;
            }
        }
    }
    for p in &mut pooled {
        *p /= n_valid;
    }
    let mut logits = weights.head_bias.clone();
    for (j, &p) in pooled.iter().enumerate() {
        for (lg, w) in logits.iter_mut().zip(weights.head.row(j)) {
            *lg += p * w;
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    let points = runner
        .points
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::Config(format!("PEFT module {i} is not on a valid site"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        logits,
        ForwardCache {
            tokens: tokens.to_vec(),
            valid,
            points,
            layers,
            final_ln,
            pooled,
            peft_version: peft.version(),
        },
    ))
}

/// Forward pass gated by each module's current threshold, or with every gate
/// on when `gating_enabled` is false.
pub fn forward(
    weights: &BackboneWeights,
    peft: &PeftSet,
    gate_states: &[GateState],
    tokens: &[u32],
    gating_enabled: bool,
) -> Result<(Vec<f64>, ForwardCache)> {
    let taus: Vec<f64> = gate_states.iter().map(|g| g.tau).collect();
    let mode = if gating_enabled {
        GateMode::Threshold(&taus)
    } else {
        GateMode::AllOn
    };
    forward_with(weights, peft, tokens, &ForwardOptions::gates(mode))
}

use super::forward::{gelu_grad, ForwardCache, LnCache, PointCache};
use super::{BackboneWeights, PeftSet, Site};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Softmax cross-entropy: `(loss, ∂loss/∂logits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Shape(format!("label {label} for {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    /// Per PEFT module: gradients in `PeftParams::tensor_names` order.
    pub peft_grads: Vec<Vec<Matrix>>,
    /// Per PEFT module: `∂ℓ/∂h` at every token, gated on or not.
    pub grad_h: Vec<Matrix>,
    /// Present only when backbone gradients were requested.
    pub backbone: Option<BackboneWeights>,
}

fn layer_norm_backward(dy: &Matrix, cache: &LnCache, gain: &[f64], dgain: Option<(&mut [f64], &mut [f64])>) -> Matrix {
    let (t, h) = dy.shape();
    let mut dx = Matrix::zeros(t, h);
    let mut dgain = dgain;
    for i in 0..t {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        if let Some((dg, db)) = dgain.as_mut() {
            for j in 0..h {
                dg[j] += g[j] * xh[j];
                db[j] += g[j];
            }
        }
        let dxhat: Vec<f64> = (0..h).map(|j| g[j] * gain[j]).collect();
        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / h as f64;
        let is = cache.inv_std[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

struct SiteGrad<'a> {
    weights: &'a BackboneWeights,
    peft: &'a PeftSet,
    points: &'a [PointCache],
    peft_grads: Vec<Vec<Matrix>>,
    grad_h: Vec<Matrix>,
    backbone: Option<BackboneWeights>,
}

impl SiteGrad<'_> {
    /// Back-propagates `dh` through one linear site; returns the gradient at
    /// the site input.
    fn run(&mut self, layer: usize, site: Site, input: &Matrix, dh: &Matrix) -> Result<Matrix> {
        let w0 = self.weights.layers[layer].site(site);
        let mut dinput = dh.matmul_nt(w0)?;
        if let Some(g) = self.backbone.as_mut() {
            g.layers[layer].site_mut(site).add_assign(&input.matmul_tn(dh)?)?;
        }
        if let Some(idx) = self.peft.index_of(&super::AttachmentPoint::new(layer, site)) {
            let pc = &self.points[idx];
            let grads = self.peft.modules()[idx]
                .params
                .delta_backward(&pc.input, &pc.delta_cache, dh, &pc.mask)?;
            dinput.add_assign(&grads.input)?;
            self.peft_grads[idx] = grads.params;
            self.grad_h[idx] = dh.clone();
        }
        Ok(dinput)
    }
}

/// Back-propagates `loss_grad = ∂ℓ/∂logits` through a cached forward pass.
///
/// Gate masks are constants: PEFT parameters receive gradient only through
/// gated-on tokens. Backbone gradients are accumulated only when
/// `backbone_grads` is set (pretraining).
pub fn backward(
    weights: &BackboneWeights,
    peft: &PeftSet,
    cache: &ForwardCache,
    loss_grad: &[f64],
    backbone_grads: bool,
) -> Result<BackwardOutput> {
    let dims = weights.dims;
    if cache.peft_version != peft.version() || cache.points.len() != peft.len() {
        return Err(Error::Contract(
            "forward cache is stale for these PEFT parameters".into(),
        ));
    }
    if cache.layers.len() != dims.layers || loss_grad.len() != dims.classes {
        return Err(Error::Contract("forward cache does not match this backbone".into()));
    }
    let t = cache.tokens.len();
    let mut sg = SiteGrad {
        weights,
        peft,
        points: &cache.points,
        peft_grads: vec![Vec::new(); peft.len()],
        grad_h: vec![Matrix::zeros(0, 0); peft.len()],
        backbone: backbone_grads.then(|| weights.zeros_like()),
    };

    let mut dpooled = vec![0.0; dims.hidden];
    for (j, dp) in dpooled.iter_mut().enumerate() {
        *dp = weights.head.row(j).iter().zip(loss_grad).map(|(w, g)| w * g).sum();
    }
    if let Some(g) = sg.backbone.as_mut() {
        for j in 0..dims.hidden {
            for (c, &lg) in loss_grad.iter().enumerate() {
                let v = g.head.get(j, c) + cache.pooled[j] * lg;
                g.head.set(j, c, v);
            }
        }
        for (b, lg) in g.head_bias.iter_mut().zip(loss_grad) {
            *b += lg;
        }
    }
    let n_valid = cache.valid.iter().sum::<f64>();
    let mut dfinal = Matrix::zeros(t, dims.hidden);
    for i in 0..t {
        if cache.valid[i] != 0.0 {
            for (o, dp) in dfinal.row_mut(i).iter_mut().zip(&dpooled) {
                *o = dp / n_valid;
            }
        }
    }
    let mut dx = {
        let dg = sg
            .backbone
            .as_mut()
            .map(|g| (&mut g.final_gain[..], &mut g.final_bias[..]));
        layer_norm_backward(&dfinal, &cache.final_ln, &weights.final_gain, dg)
    };

    for l in (0..dims.layers).rev() {
        let lc = &cache.layers[l];
        let lw = &weights.layers[l];
        // Feed-forward block.
        let dz = sg.run(l, Site::FfnDown, &lc.z, &dx)?;
        let mut du = dz;
        for (g, &u) in du.data_mut().iter_mut().zip(lc.u.data()) {
            *g *= gelu_grad(u);
        }
        let db = sg.run(l, Site::FfnUp, &lc.b, &du)?;
        let dres = {
            let dg = sg.backbone.as_mut().map(|g| {
                let lg = &mut g.layers[l];
                (&mut lg.ln2_gain[..], &mut lg.ln2_bias[..])
            });
            layer_norm_backward(&db, &lc.ln2, &lw.ln2_gain, dg)
        };
        dx.add_assign(&dres)?;

        // Attention block.
        let dctx = sg.run(l, Site::OProj, &lc.ctx, &dx)?;
        let dprobs = dctx.matmul_nt(&lc.v)?;
        let dv = lc.probs.matmul_tn(&dctx)?;
        let scale = 1.0 / (dims.hidden as f64).sqrt();
        let mut dscores = Matrix::zeros(t, t);
        for i in 0..t {
            let p = lc.probs.row(i);
            let dp = dprobs.row(i);
            let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for (j, o) in dscores.row_mut(i).iter_mut().enumerate() {
                *o = p[j] * (dp[j] - inner) * scale;
            }
        }
        let dq = dscores.matmul(&lc.k)?;
        let dk = dscores.matmul_tn(&lc.q)?;
        let mut da = sg.run(l, Site::QProj, &lc.a, &dq)?;
        da.add_assign(&sg.run(l, Site::KProj, &lc.a, &dk)?)?;
        da.add_assign(&sg.run(l, Site::VProj, &lc.a, &dv)?)?;
        let dres = {
            let dg = sg.backbone.as_mut().map(|g| {
                let lg = &mut g.layers[l];
                (&mut lg.ln1_gain[..], &mut lg.ln1_bias[..])
            });
            layer_norm_backward(&da, &lc.ln1, &lw.ln1_gain, dg)
        };
        dx.add_assign(&dres)?;
    }

    if let Some(g) = sg.backbone.as_mut() {
        for (i, &tok) in cache.tokens.iter().enumerate() {
            for (e, d) in g.embedding.row_mut(tok as usize).iter_mut().zip(dx.row(i)) {
                *e += d;
            }
        }
    }
    Ok(BackwardOutput {
        peft_grads: sg.peft_grads,
        grad_h: sg.grad_h,
        backbone: sg.backbone,
    })
}

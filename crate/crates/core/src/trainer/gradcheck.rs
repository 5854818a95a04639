use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::backbone::{
    backward, cross_entropy, forward_with, BackboneWeights, ForwardOptions, GateMode, PeftSet, Perturbation,
};
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Rng};
use crate::peft::{DeltaCache, PeftParams, PeftVariant};
use crate::tasks::{gen_sparse_signal_task, Dataset};
use crate::tau_opt::{token_influence, ThresholdGradient};

pub const MAX_SEQ_LEN: usize = 8;
pub const MAX_HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub seeds: Vec<u64>,
    pub variants: Vec<PeftVariant>,
    pub examples: usize,
    /// Central-difference step.
    pub step: f64,
    pub param_tol: f64,
    pub mu_tol: f64,
    /// `λ` used for the threshold-gradient comparison.
    pub lambda: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            variants: vec![PeftVariant::Lora, PeftVariant::Dora, PeftVariant::Adapter],
            examples: 3,
            step: 1e-5,
            param_tol: 1e-6,
            mu_tol: 1e-5,
            lambda: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    /// `module/tensor`, e.g. `layers.0.q_proj/B`.
    pub name: String,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub seed: u64,
    pub variant: PeftVariant,
    pub tensors: Vec<TensorCheck>,
    pub max_param_rel_err: f64,
    pub max_mu_rel_err: f64,
    pub g_k_exact: bool,
    /// Fraction of gates on under the fixed masks.
    pub gate_on_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub settings: GradCheckSettings,
    pub cases: Vec<CaseReport>,
    pub max_param_rel_err: f64,
    pub max_mu_rel_err: f64,
    pub g_k_exact: bool,
    pub passed: bool,
    /// Every tensor or check above tolerance.
    pub failures: Vec<String>,
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// The threshold gradient written out term by term: the consistency
/// indicator times `μ_i`, plus the gate indicator times `λ`, summed over
/// valid tokens in order.
pub fn threshold_gradient_literal(tokens: &[(f64, f64, f64)], tau: f64, lambda: f64) -> f64 {
    let mut g = 0.0;
    for &(mu, r, valid) in tokens {
        if valid == 0.0 {
            continue;
        }
        let mu_nonneg = if mu >= 0.0 { 1u8 } else { 0 };
        let gate_on = if r >= tau { 1u8 } else { 0 };
        let consistency = if mu_nonneg == gate_on { 1.0 } else { 0.0 };
        g += consistency * mu + f64::from(gate_on) * lambda;
    }
    g
}

struct Case {
    weights: BackboneWeights,
    peft: PeftSet,
    data: Dataset,
    taus: Vec<f64>,
    /// `[example][module][token]`
    masks: Vec<Vec<Vec<f64>>>,
}

impl Case {
    fn opts<'a>(&'a self, e: usize) -> ForwardOptions<'a> {
        ForwardOptions::gates(GateMode::Fixed(&self.masks[e]))
    }

    fn example_loss(&self, peft: &PeftSet, e: usize, perturb: Option<Perturbation>) -> Result<f64> {
        let ex = &self.data.examples[e];
        let mut opts = self.opts(e);
        opts.perturb = perturb;
        let (logits, _) = forward_with(&self.weights, peft, &ex.tokens, &opts)?;
        Ok(cross_entropy(&logits, ex.label)?.0)
    }

    fn batch_loss(&self, peft: &PeftSet) -> Result<f64> {
        let mut loss = 0.0;
        for e in 0..self.data.len() {
            loss += self.example_loss(peft, e, None)?;
        }
        Ok(loss / self.data.len() as f64)
    }
}

fn randomize(params: &mut PeftParams, rng: &mut Rng) {
    match params {
        PeftParams::Lora(p) => {
            fill(&mut p.a, rng, 0.5);
            fill(&mut p.b, rng, 0.3);
        }
        PeftParams::Dora(p) => {
            fill(&mut p.a, rng, 0.5);
            fill(&mut p.b, rng, 0.3);
            for m in &mut p.magnitude {
                *m *= 1.0 + 0.2 * rng.normal();
            }
        }
        PeftParams::Adapter(p) => {
            fill(&mut p.down, rng, 0.5);
            fill(&mut p.up, rng, 0.3);
        }
    }
}

fn fill(m: &mut Matrix, rng: &mut Rng, sd: f64) {
    m.data_mut().iter_mut().for_each(|v| *v = sd * rng.normal());
}

fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Smallest `|pre-activation|` of any adapter under the case's masks.
fn relu_margin(case: &Case) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for (e, ex) in case.data.examples.iter().enumerate() {
        let (_, cache) = forward_with(&case.weights, &case.peft, &ex.tokens, &case.opts(e))?;
        for p in &cache.points {
            if let DeltaCache::Adapter { pre } = &p.delta_cache {
                for t in 0..pre.rows() {
                    if cache.valid[t] != 0.0 {
                        margin = pre.row(t).iter().fold(margin, |m, v| m.min(v.abs()));
                    }
                }
            }
        }
    }
    Ok(margin)
}

fn build_case(cfg: &RunConfig, seed: u64, variant: PeftVariant, examples: usize) -> Result<Case> {
    let root = Rng::new(seed);
    let weights = BackboneWeights::init(cfg.dims(), &mut root.fork(0))?;
    let points = cfg.peft.attachment_points(cfg.backbone.layers);
    let mut prng = root.fork(1);
    let mut peft = PeftSet::init(
        &weights,
        variant,
        &points,
        |p| cfg.peft.rank_for(p),
        cfg.peft.scale,
        &mut prng,
    )?;
    for m in peft.modules_mut() {
        randomize(&mut m.params, &mut prng);
    }
    let data = gen_sparse_signal_task(seed, examples, &cfg.task.params())?;

    // Thresholds at the median r put roughly half the gates off.
    let mut rs: Vec<Vec<f64>> = vec![Vec::new(); peft.len()];
    for ex in &data.examples {
        let (_, cache) = forward_with(&weights, &peft, &ex.tokens, &ForwardOptions::gates(GateMode::AllOn))?;
        for (m, p) in cache.points.iter().enumerate() {
            rs[m].extend(p.r.iter().zip(&cache.valid).filter(|(_, &v)| v != 0.0).map(|(r, _)| *r));
        }
    }
    let taus: Vec<f64> = rs.iter().map(|r| median(r)).collect();
    let mut masks = Vec::with_capacity(data.len());
    for ex in &data.examples {
        let (_, cache) = forward_with(
            &weights,
            &peft,
            &ex.tokens,
            &ForwardOptions::gates(GateMode::Threshold(&taus)),
        )?;
        masks.push(cache.points.iter().map(|p| p.mask.clone()).collect());
    }
    Ok(Case {
        weights,
        peft,
        data,
        taus,
        masks,
    })
}

/// Adapter cases are redrawn until no ReLU input sits within `1e-3` of its
/// corner, where central differences are meaningless.
fn kink_free_case(cfg: &RunConfig, seed: u64, variant: PeftVariant, examples: usize) -> Result<Case> {
    for attempt in 0..200u64 {
        let case = build_case(
            cfg,
            seed.wrapping_mul(1_000_003).wrapping_add(attempt),
            variant,
            examples,
        )?;
        if variant != PeftVariant::Adapter || relu_margin(&case)? >= 1e-3 {
            return Ok(case);
        }
    }
    Err(Error::GradCheck(format!(
        "no kink-free adapter configuration for seed {seed}"
    )))
}

fn check_case(case: &Case, s: &GradCheckSettings, seed: u64, variant: PeftVariant) -> Result<CaseReport> {
    let n = case.data.len();
    let mut analytic: Vec<Vec<Vec<f64>>> = case
        .peft
        .modules()
        .iter()
        .map(|m| m.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
        .collect();
    let mut tgs: Vec<ThresholdGradient> = case.taus.iter().map(|&t| ThresholdGradient::new(t, s.lambda)).collect();
    let mut literal_inputs: Vec<Vec<(f64, f64, f64)>> = vec![Vec::new(); case.peft.len()];
    let mut max_mu = 0.0f64;
    let (mut on, mut total) = (0usize, 0usize);
    for (e, ex) in case.data.examples.iter().enumerate() {
        let (logits, cache) = forward_with(&case.weights, &case.peft, &ex.tokens, &case.opts(e))?;
        let (_, dl) = cross_entropy(&logits, ex.label)?;
        let out = backward(&case.weights, &case.peft, &cache, &dl, false)?;
        for (acc, g) in analytic.iter_mut().zip(&out.peft_grads) {
            for (a, gt) in acc.iter_mut().zip(g) {
                a.iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y / n as f64);
            }
        }
        for (m, pc) in cache.points.iter().enumerate() {
            let mu = token_influence(&out.grad_h[m], &pc.delta, &cache.valid)?;
            let mut numeric = vec![0.0; mu.len()];
            for (t, num) in numeric.iter_mut().enumerate() {
                if cache.valid[t] == 0.0 {
                    continue;
                }
                let at = |gamma| Perturbation {
                    module: m,
                    token: t,
                    gamma,
                };
                let plus = case.example_loss(&case.peft, e, Some(at(s.step)))?;
                let minus = case.example_loss(&case.peft, e, Some(at(-s.step)))?;
                *num = (plus - minus) / (2.0 * s.step);
            }
            max_mu = max_mu.max(relative_error(&mu, &numeric));
            tgs[m].add_sequence(&mu, &pc.r, &cache.valid)?;
            literal_inputs[m].extend((0..mu.len()).map(|t| (mu[t], pc.r[t], cache.valid[t])));
            for (&mk, &v) in pc.mask.iter().zip(&cache.valid) {
                if v != 0.0 {
                    total += 1;
                    on += usize::from(mk != 0.0);
                }
            }
        }
    }
    let g_k_exact = tgs
        .iter()
        .zip(&literal_inputs)
        .zip(&case.taus)
        .all(|((tg, inputs), &tau)| {
            tg.value().to_bits() == threshold_gradient_literal(inputs, tau, s.lambda).to_bits()
        });

    let mut tensors = Vec::new();
    for (m, module) in case.peft.modules().iter().enumerate() {
        let names = module.params.tensor_names();
        for (t, name) in names.iter().enumerate() {
            let len = analytic[m][t].len();
            let mut numeric = vec![0.0; len];
            for (i, num) in numeric.iter_mut().enumerate() {
                let mut plus = case.peft.clone();
                plus.modules_mut()[m].params.tensors_mut()[t][i] += s.step;
                let mut minus = case.peft.clone();
                minus.modules_mut()[m].params.tensors_mut()[t][i] -= s.step;
                *num = (case.batch_loss(&plus)? - case.batch_loss(&minus)?) / (2.0 * s.step);
            }
            tensors.push(TensorCheck {
                name: format!("{}/{name}", module.point.id()),
                rel_err: relative_error(&analytic[m][t], &numeric),
            });
        }
    }
    Ok(CaseReport {
        seed,
        variant,
        max_param_rel_err: tensors.iter().fold(0.0, |m, t| m.max(t.rel_err)),
        tensors,
        max_mu_rel_err: max_mu,
        g_k_exact,
        gate_on_fraction: on as f64 / total.max(1) as f64,
    })
}

/// Checks analytic PEFT gradients, token influences and the threshold
/// gradient on random small configurations, with gates held fixed.
pub fn gradcheck(cfg: &RunConfig, settings: &GradCheckSettings) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.task.seq_len > MAX_SEQ_LEN || cfg.backbone.hidden > MAX_HIDDEN {
        return Err(Error::Config(format!(
            "gradient checks need seq_len ≤ {MAX_SEQ_LEN} and hidden ≤ {MAX_HIDDEN}"
        )));
    }
    if settings.examples == 0 || !(settings.step > 0.0) {
        return Err(Error::Config("gradcheck needs examples ≥ 1 and a positive step".into()));
    }
    let mut cases = Vec::new();
    for &variant in &settings.variants {
        for &seed in &settings.seeds {
            let case = kink_free_case(cfg, seed, variant, settings.examples)?;
            cases.push(check_case(&case, settings, seed, variant)?);
        }
    }
    let mut failures = Vec::new();
    for c in &cases {
        let tag = format!("{} seed {}", c.variant.name(), c.seed);
        for t in &c.tensors {
            if !(t.rel_err <= settings.param_tol) {
                failures.push(format!("{tag}: {} relative error {:.3e}", t.name, t.rel_err));
            }
        }
        if !(c.max_mu_rel_err <= settings.mu_tol) {
            failures.push(format!(
                "{tag}: token influence relative error {:.3e}",
                c.max_mu_rel_err
            ));
        }
        if !c.g_k_exact {
            failures.push(format!("{tag}: threshold gradient differs from the literal sum"));
        }
    }
    Ok(GradCheckReport {
        settings: settings.clone(),
        max_param_rel_err: cases.iter().fold(0.0, |m, c| m.max(c.max_param_rel_err)),
        max_mu_rel_err: cases.iter().fold(0.0, |m, c| m.max(c.max_mu_rel_err)),
        g_k_exact: cases.iter().all(|c| c.g_k_exact),
        passed: failures.is_empty(),
        failures,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_sum_matches_hand_example() {
        let toks = [(2.0, 0.3, 1.0), (-1.0, 0.1, 1.0), (1.0, 0.1, 1.0), (5.0, 0.9, 0.0)];
        assert!((threshold_gradient_literal(&toks, 0.2, 0.1) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn relative_error_conventions() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, -4.0], &[1.0, -3.0]) - 0.25).abs() < 1e-15);
    }
}

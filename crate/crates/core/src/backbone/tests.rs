use super::*;
use crate::numkernel::Matrix;
use crate::tau_opt::{GateState, TauHyper};

fn dims() -> BackboneDims {
    BackboneDims {
        vocab: 12,
        hidden: 8,
        ffn: 12,
        layers: 2,
        classes: 3,
    }
}

fn all_points(layers: usize) -> Vec<AttachmentPoint> {
    (0..layers)
        .flat_map(|l| Site::ALL.into_iter().map(move |s| AttachmentPoint::new(l, s)))
        .collect()
}

fn setup(seed: u64, variant: PeftVariant, randomize: bool) -> (BackboneWeights, PeftSet) {
    let mut rng = Rng::new(seed);
    let w = BackboneWeights::init(dims(), &mut rng).unwrap();
    let mut peft = PeftSet::init(&w, variant, &all_points(2), |_| 2, 0.5, &mut rng).unwrap();
    if randomize {
        for m in peft.modules_mut() {
            for t in m.params.tensors_mut() {
                for v in t.iter_mut() {
                    *v += rng.uniform(-0.3, 0.3);
                }
            }
        }
    }
    (w, peft)
}

const SEQS: [&[u32]; 2] = [&[3, 1, 7, 2, 9, 4], &[5, 2, 11, 8, 0, 0]];
const LABELS: [usize; 2] = [1, 2];

fn batch_loss(w: &BackboneWeights, peft: &PeftSet, masks: &[Vec<Vec<f64>>]) -> f64 {
    let mut total = 0.0;
    for (s, (tokens, label)) in SEQS.iter().zip(LABELS).enumerate() {
        let (logits, _) = forward_with(w, peft, tokens, &ForwardOptions::gates(GateMode::Fixed(&masks[s]))).unwrap();
        total += cross_entropy(&logits, label).unwrap().0;
    }
    total / SEQS.len() as f64
}

fn random_masks(peft: &PeftSet, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = Rng::new(seed);
    SEQS.iter()
        .map(|s| {
            (0..peft.len())
                .map(|_| s.iter().map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect())
                .collect()
        })
        .collect()
}

fn min_relu_margin(w: &BackboneWeights, peft: &PeftSet, masks: &[Vec<Vec<f64>>]) -> f64 {
    let mut margin = f64::INFINITY;
    for (s, tokens) in SEQS.iter().enumerate() {
        let (_, cache) = forward_with(w, peft, tokens, &ForwardOptions::gates(GateMode::Fixed(&masks[s]))).unwrap();
        for p in &cache.points {
            if let crate::peft::DeltaCache::Adapter { pre } = &p.delta_cache {
                margin = pre.data().iter().fold(margin, |m, v| m.min(v.abs()));
            }
        }
    }
    margin
}

/// Central differences are meaningless across a ReLU corner, so adapter
/// configurations are redrawn until every pre-activation is clear of zero.
fn kink_free_setup(seed: u64, variant: PeftVariant) -> (BackboneWeights, PeftSet, Vec<Vec<Vec<f64>>>) {
    for attempt in 0..100 {
        let s = seed * 1000 + attempt;
        let (w, peft) = setup(s, variant, true);
        let masks = random_masks(&peft, s + 100);
        if min_relu_margin(&w, &peft, &masks) >= 1e-3 {
            return (w, peft, masks);
        }
    }
    panic!("no kink-free configuration for seed {seed}");
}

fn analytic(
    w: &BackboneWeights,
    peft: &PeftSet,
    masks: &[Vec<Vec<f64>>],
    backbone: bool,
) -> (Vec<Vec<Matrix>>, Option<BackboneWeights>) {
    let mut peft_acc: Option<Vec<Vec<Matrix>>> = None;
    let mut bb_acc: Option<BackboneWeights> = None;
    for (s, (tokens, label)) in SEQS.iter().zip(LABELS).enumerate() {
        let (logits, cache) =
            forward_with(w, peft, tokens, &ForwardOptions::gates(GateMode::Fixed(&masks[s]))).unwrap();
        let (_, mut dl) = cross_entropy(&logits, label).unwrap();
        for v in &mut dl {
            *v /= SEQS.len() as f64;
        }
        let out = backward(w, peft, &cache, &dl, backbone).unwrap();
        match peft_acc.as_mut() {
            None => peft_acc = Some(out.peft_grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&out.peft_grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        x.add_assign(y).unwrap();
                    }
                }
            }
        }
        if let Some(g) = out.backbone {
            match bb_acc.as_mut() {
                None => bb_acc = Some(g),
                Some(acc) => {
                    for (x, y) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                        for (a, b) in x.iter_mut().zip(y) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
    (peft_acc.unwrap(), bb_acc)
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
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

#[test]
fn peft_gradients_match_finite_differences() {
    let h = 1e-5;
    for variant in [PeftVariant::Lora, PeftVariant::Dora, PeftVariant::Adapter] {
        for seed in 0..5 {
            let (w, peft, masks) = kink_free_setup(seed, variant);
            let (grads, _) = analytic(&w, &peft, &masks, false);
            for m in 0..peft.len() {
                for t in 0..grads[m].len() {
                    let n = peft.modules()[m].params.tensors()[t].len();
                    let mut numeric = vec![0.0; n];
                    for (i, num) in numeric.iter_mut().enumerate() {
                        let mut plus = peft.clone();
                        plus.modules_mut()[m].params.tensors_mut()[t][i] += h;
                        let mut minus = peft.clone();
                        minus.modules_mut()[m].params.tensors_mut()[t][i] -= h;
                        *num = (batch_loss(&w, &plus, &masks) - batch_loss(&w, &minus, &masks)) / (2.0 * h);
                    }
                    let err = rel_err(grads[m][t].data(), &numeric);
                    assert!(err <= 1e-6, "{variant:?} seed {seed} module {m} tensor {t}: {err}");
                }
            }
        }
    }
}

#[test]
fn backbone_gradients_match_finite_differences() {
    let (w, peft) = setup(7, PeftVariant::Lora, true);
    let masks = random_masks(&peft, 8);
    let (_, bb) = analytic(&w, &peft, &masks, true);
    let bb = bb.unwrap();
    let h = 1e-5;
    let grads = bb.tensors();
    for (t, g) in grads.iter().enumerate() {
        // A stride keeps the check fast while touching every tensor.
        let idx: Vec<usize> = (0..g.len()).step_by(3).collect();
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for &i in &idx {
            let mut plus = w.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = w.clone();
            minus.tensors_mut()[t][i] -= h;
            num.push((batch_loss(&plus, &peft, &masks) - batch_loss(&minus, &peft, &masks)) / (2.0 * h));
            ana.push(g[i]);
        }
        let err = rel_err(&ana, &num);
        assert!(err <= 1e-6, "backbone tensor {t}: {err}");
    }
}

#[test]
fn zero_peft_equals_backbone_only() {
    let (w, peft) = setup(1, PeftVariant::Lora, false);
    let tokens = SEQS[0];
    let (base_logits, _) =
        forward_with(&w, &PeftSet::empty(), tokens, &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    let (logits, cache) = forward_with(&w, &peft, tokens, &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    assert_eq!(base_logits, logits);
    assert!(cache.points.iter().all(|p| p.r.iter().all(|&r| r == 0.0)));
}

#[test]
fn zero_tau_is_ungated_and_huge_tau_is_backbone() {
    let (w, peft) = setup(2, PeftVariant::Dora, true);
    let tokens = SEQS[1];
    let zero = vec![0.0; peft.len()];
    let (ungated, _) = forward_with(&w, &peft, tokens, &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    let (gated, cache) = forward_with(&w, &peft, tokens, &ForwardOptions::gates(GateMode::Threshold(&zero))).unwrap();
    assert_eq!(ungated, gated);
    assert!(cache.points.iter().all(|p| p.mask.iter().all(|&m| m == 1.0)));

    let max_r = cache
        .points
        .iter()
        .flat_map(|p| p.r.iter().copied())
        .fold(0.0, f64::max);
    let huge = vec![max_r * 2.0 + 1.0; peft.len()];
    let (off, _) = forward_with(&w, &peft, tokens, &ForwardOptions::gates(GateMode::Threshold(&huge))).unwrap();
    let (base, _) = forward_with(&w, &PeftSet::empty(), tokens, &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    assert_eq!(off, base);
}

#[test]
fn gate_states_entry_point() {
    let (w, peft) = setup(3, PeftVariant::Lora, true);
    let states = vec![GateState::new(TauHyper::default()); peft.len()];
    let (a, _) = forward(&w, &peft, &states, SEQS[0], true).unwrap();
    let (b, _) = forward(&w, &peft, &states, SEQS[0], false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gates_off_zero_gradients_and_all_on_matches_ungated() {
    let (w, peft) = setup(4, PeftVariant::Adapter, true);
    let off: Vec<Vec<Vec<f64>>> = SEQS.iter().map(|s| vec![vec![0.0; s.len()]; peft.len()]).collect();
    let (grads, _) = analytic(&w, &peft, &off, false);
    assert!(grads.iter().flatten().all(|g| g.max_abs() == 0.0));

    let on: Vec<Vec<Vec<f64>>> = SEQS.iter().map(|s| vec![vec![1.0; s.len()]; peft.len()]).collect();
    let (fixed, _) = analytic(&w, &peft, &on, false);
    let (logits, cache) = forward_with(&w, &peft, SEQS[0], &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    let (logits2, _) = forward_with(&w, &peft, SEQS[0], &ForwardOptions::gates(GateMode::Fixed(&on[0]))).unwrap();
    assert_eq!(logits, logits2);
    let _ = (fixed, cache);
}

#[test]
fn gate_off_locality() {
    let (w, peft) = setup(5, PeftVariant::Lora, true);
    let masks = random_masks(&peft, 6);
    let opts = ForwardOptions::gates(GateMode::Fixed(&masks[0]));
    let (_, before) = forward_with(&w, &peft, SEQS[0], &opts).unwrap();
    let mut changed = peft.clone();
    // Only the first module changes, so its input is unaffected.
    for t in changed.modules_mut()[0].params.tensors_mut() {
        for v in t.iter_mut() {
            *v *= 1.7;
        }
    }
    let (_, after) = forward_with(&w, &changed, SEQS[0], &opts).unwrap();
    let (pb, pa) = (&before.points[0], &after.points[0]);
    let hb = crate::tsgate::apply_gate(&pb.base, &pb.delta, &pb.mask).unwrap();
    let ha = crate::tsgate::apply_gate(&pa.base, &pa.delta, &pa.mask).unwrap();
    for i in 0..SEQS[0].len() {
        if pb.mask[i] == 0.0 {
            assert_eq!(hb.row(i), ha.row(i));
        }
    }
}

#[test]
fn stale_cache_is_rejected() {
    let (w, mut peft) = setup(6, PeftVariant::Lora, true);
    let (logits, cache) = forward_with(&w, &peft, SEQS[0], &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    let (_, dl) = cross_entropy(&logits, 0).unwrap();
    peft.modules_mut();
    assert!(matches!(
        backward(&w, &peft, &cache, &dl, false),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn grad_h_reported_at_gate_off_tokens() {
    let (w, peft) = setup(9, PeftVariant::Lora, true);
    let off: Vec<Vec<f64>> = vec![vec![0.0; SEQS[0].len()]; peft.len()];
    let (logits, cache) = forward_with(&w, &peft, SEQS[0], &ForwardOptions::gates(GateMode::Fixed(&off))).unwrap();
    let (_, dl) = cross_entropy(&logits, 1).unwrap();
    let out = backward(&w, &peft, &cache, &dl, false).unwrap();
    assert!(out
        .grad_h
        .iter()
        .all(|g| g.rows() == SEQS[0].len() && g.max_abs() > 0.0));
}

#[test]
fn padding_tokens_do_not_matter() {
    let (w, peft) = setup(10, PeftVariant::Lora, true);
    let a: &[u32] = &[5, 2, 11, 8, 0, 0];
    let (la, ca) = forward_with(&w, &peft, a, &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    let (lb, _) = forward_with(&w, &peft, &a[..4], &ForwardOptions::gates(GateMode::AllOn)).unwrap();
    for (x, y) in la.iter().zip(&lb) {
        assert!((x - y).abs() < 1e-12);
    }
    let (_, dl) = cross_entropy(&la, 0).unwrap();
    let out = backward(&w, &peft, &ca, &dl, false).unwrap();
    for g in &out.grad_h {
        assert!(g.row(4).iter().chain(g.row(5)).all(|&v| v == 0.0));
    }
}

#[test]
fn duplicate_points_rejected() {
    let (w, _) = setup(0, PeftVariant::Lora, false);
    let p = AttachmentPoint::new(0, Site::QProj);
    let mut rng = Rng::new(0);
    assert!(PeftSet::init(&w, PeftVariant::Lora, &[p, p], |_| 2, 0.5, &mut rng).is_err());
    let bad = AttachmentPoint::new(5, Site::QProj);
    assert!(PeftSet::init(&w, PeftVariant::Lora, &[bad], |_| 2, 0.5, &mut rng).is_err());
}

#[test]
fn cross_entropy_gradient() {
    let logits = [0.3, -1.2, 2.0];
    let (loss, g) = cross_entropy(&logits, 2).unwrap();
    let h = 1e-6;
    for c in 0..3 {
        let mut p = logits;
        p[c] += h;
        let mut m = logits;
        m[c] -= h;
        let num = (cross_entropy(&p, 2).unwrap().0 - cross_entropy(&m, 2).unwrap().0) / (2.0 * h);
        assert!((num - g[c]).abs() < 1e-8);
    }
    assert!(loss > 0.0);
}

//! Token-level gate: relative update magnitudes, the threshold rule, gated
//! output assembly and the sparsity metric.

use crate::error::{Error, Result};
use crate::numkernel::{row_l2_norms, Matrix};

/// Outcome of gating one site for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub r: Vec<f64>,
    pub mask: Vec<f64>,
    pub tau_used: f64,
}

impl GateDecision {
    pub fn new(r: Vec<f64>, tau: f64) -> Self {
        let mask = gate(&r, tau);
        Self { r, mask, tau_used: tau }
    }
}

/// `‖delta_i‖ / ‖base_i‖` per row.
///
/// A zero base row gives `0` when the delta row is zero too, and `+∞` (gate
/// always on) otherwise.
pub fn relative_magnitudes(base_out: &Matrix, delta: &Matrix) -> Result<Vec<f64>> {
    if base_out.shape() != delta.shape() {
        return Err(Error::Shape(format!(
            "base {:?} and delta {:?} differ",
            base_out.shape(),
            delta.shape()
        )));
    }
    let base = row_l2_norms(base_out)?;
    let upd = row_l2_norms(delta)?;
    Ok(base
        .iter()
        .zip(&upd)
        .map(|(&b, &d)| {
            if b > 0.0 {
                d / b
            } else if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect())
}

/// `1` where `r_i ≥ τ`, else `0`.
pub fn gate(r: &[f64], tau: f64) -> Vec<f64> {
    r.iter().map(|&ri| if ri >= tau { 1.0 } else { 0.0 }).collect()
}

/// `h_i = base_i + mask_i · delta_i`.
pub fn apply_gate(base_out: &Matrix, delta: &Matrix, mask: &[f64]) -> Result<Matrix> {
    if base_out.shape() != delta.shape() || mask.len() != base_out.rows() {
        return Err(Error::Shape("apply_gate operands disagree".into()));
    }
    if let Some(bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::Contract(format!("gate mask entry {bad} is not binary")));
    }
    let mut h = base_out.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m == 1.0 {
            for (o, d) in h.row_mut(i).iter_mut().zip(delta.row(i)) {
                *o += d;
            }
        }
    }
    Ok(h)
}

/// Fraction of valid tokens whose update is skipped.
pub fn sparsity(mask: &[f64], valid: &[f64]) -> Result<f64> {
    let (on, total) = gate_counts(mask, valid)?;
    if total == 0 {
        return Err(Error::EmptyInput("sparsity over zero valid tokens".into()));
    }
    Ok(1.0 - on as f64 / total as f64)
}

/// `(gated-on valid tokens, valid tokens)`.
pub fn gate_counts(mask: &[f64], valid: &[f64]) -> Result<(usize, usize)> {
    if mask.len() != valid.len() {
        return Err(Error::Shape(format!(
            "mask length {} vs valid length {}",
            mask.len(),
            valid.len()
        )));
    }
    let mut on = 0;
    let mut total = 0;
    for (&m, &v) in mask.iter().zip(valid) {
        if v != 0.0 {
            total += 1;
            if m != 0.0 {
                on += 1;
            }
        }
    }
    Ok((on, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{seeded_init, InitScheme, Rng};
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn three_four_five() {
        let r = relative_magnitudes(&m(&[vec![3.0, 4.0]]), &m(&[vec![0.3, 0.4]])).unwrap();
        assert!((r[0] - 0.1).abs() < 1e-16);
    }

    #[test]
    fn zero_delta_zero_r() {
        let base = m(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        let r = relative_magnitudes(&base, &Matrix::zeros(2, 2)).unwrap();
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_base_row_forces_gate_on() {
        let base = m(&[vec![0.0, 0.0]]);
        let r = relative_magnitudes(&base, &m(&[vec![1e-9, 0.0]])).unwrap();
        assert_eq!(r, vec![f64::INFINITY]);
        assert_eq!(gate(&r, 1e300), vec![1.0]);
    }

    #[test]
    fn ratio_matches_two_norm_oracle() {
        let mut rng = Rng::new(4);
        let scheme = InitScheme::Uniform { lo: -2.0, hi: 2.0 };
        let base = seeded_init(6, 5, &mut rng, scheme).unwrap();
        let delta = seeded_init(6, 5, &mut rng, scheme).unwrap();
        let r = relative_magnitudes(&base, &delta).unwrap();
        for i in 0..6 {
            let nb: f64 = base.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let nd: f64 = delta.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r[i] - nd / nb).abs() <= 1e-14 * (nd / nb));
        }
    }

    #[test]
    fn tie_is_inclusive() {
        assert_eq!(gate(&[0.1, 0.2, 0.3], 0.2), vec![0.0, 1.0, 1.0]);
        assert_eq!(gate(&[0.0, 0.5, 7.0], 0.0), vec![1.0; 3]);
        assert_eq!(gate(&[0.1, 0.5], 0.6), vec![0.0; 2]);
    }

    #[test]
    fn apply_gate_cases() {
        let base = m(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let delta = m(&[vec![0.5, 0.5], vec![-1.0, 1.0], vec![2.0, 0.0]]);
        assert_eq!(apply_gate(&base, &delta, &[1.0; 3]).unwrap(), base.add(&delta).unwrap());
        assert_eq!(apply_gate(&base, &delta, &[0.0; 3]).unwrap(), base);
        let mask = [1.0, 0.0, 1.0];
        let h = apply_gate(&base, &delta, &mask).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want = if mask[i] == 1.0 {
                    base.get(i, j) + delta.get(i, j)
                } else {
                    base.get(i, j)
                };
                assert_eq!(h.get(i, j), want);
            }
        }
        assert!(matches!(
            apply_gate(&base, &delta, &[0.5, 0.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sparsity_counts() {
        assert_eq!(sparsity(&[1.0, 0.0, 0.0, 1.0], &[1.0; 4]).unwrap(), 0.5);
        assert_eq!(sparsity(&[1.0; 3], &[1.0; 3]).unwrap(), 0.0);
        assert_eq!(sparsity(&[0.0; 3], &[1.0; 3]).unwrap(), 1.0);
        assert_eq!(sparsity(&[0.0, 1.0, 0.0], &[1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(sparsity(&[1.0], &[0.0]), Err(Error::EmptyInput(_))));
    }

    proptest! {
        #[test]
        fn sparsity_monotone_in_tau(r in prop::collection::vec(0.0f64..2.0, 1..40), t1 in -1.0f64..3.0, t2 in -1.0f64..3.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let valid = vec![1.0; r.len()];
            let s_lo = sparsity(&gate(&r, lo), &valid).unwrap();
            let s_hi = sparsity(&gate(&r, hi), &valid).unwrap();
            prop_assert!(s_lo <= s_hi);
            for (a, b) in gate(&r, lo).iter().zip(gate(&r, hi)) {
                prop_assert!(*a >= b);
            }
        }

        #[test]
        fn scale_covariance(seed in any::<u64>(), k in 0i32..12, tau in 0.0f64..2.0) {
            let mut rng = Rng::new(seed);
            let scheme = InitScheme::Uniform { lo: -1.0, hi: 1.0 };
            let base = seeded_init(5, 4, &mut rng, scheme).unwrap();
            let delta = seeded_init(5, 4, &mut rng, scheme).unwrap();
            // Power-of-two scaling is exact in binary floating point.
            let c = 2f64.powi(k - 6);
            let r1 = relative_magnitudes(&base, &delta).unwrap();
            let r2 = relative_magnitudes(&base.scale(c), &delta.scale(c)).unwrap();
            prop_assert_eq!(&r1, &r2);
            prop_assert_eq!(gate(&r1, tau), gate(&r2, tau));
        }

        #[test]
        fn all_on_is_plain_addition(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let scheme = InitScheme::Uniform { lo: -1.0, hi: 1.0 };
            let base = seeded_init(4, 3, &mut rng, scheme).unwrap();
            let delta = seeded_init(4, 3, &mut rng, scheme).unwrap();
            let h = apply_gate(&base, &delta, &[1.0; 4]).unwrap();
            let plain = base.add(&delta).unwrap();
            for (a, b) in h.data().iter().zip(plain.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

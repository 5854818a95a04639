//! Per-module threshold learner.
//!
//! Each attached module owns one [`GateState`]. A training step aggregates
//! token influences `μ_i = ⟨∂ℓ/∂h_i, M(x_i)⟩` into the consistency-masked
//! threshold gradient `g`, then moves `τ` with a bias-corrected Adam-style
//! rule (or plain SGD for the ablation). The update adds `α·s·(adapted g)`:
//! the `-s` surrogate for the step function's derivative is folded into `g`'s
//! construction, so a positive `g` raises the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauHyper {
    /// Gradient scale `s`.
    pub s: f64,
    /// Sparsity weight `λ`.
    pub lambda: f64,
    /// Step size `α`.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TauHyper {
    fn default() -> Self {
        Self {
            s: 4e-5,
            lambda: 4.5e-5,
            alpha: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl TauHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        for (name, v) in [
            ("s", self.s),
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("eps", self.eps),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Threshold and optimizer moments of one module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub tau: f64,
    pub m: f64,
    pub v: f64,
    pub k: u64,
    pub hyper: TauHyper,
}

impl GateState {
    /// Starts at `τ = 0`, so every token is gated on.
    pub fn new(hyper: TauHyper) -> Self {
        Self {
            tau: 0.0,
            m: 0.0,
            v: 0.0,
            k: 0,
            hyper,
        }
    }

    /// One Adam-style step with gradient `g`. `lr_mult` is the shared
    /// learning-rate schedule multiplier.
    pub fn adam_step(&mut self, g: f64, lr_mult: f64) -> Result<()> {
        check_finite(g)?;
        let h = self.hyper;
        self.k += 1;
        self.m = h.beta1 * self.m + (1.0 - h.beta1) * g;
        self.v = h.beta2 * self.v + (1.0 - h.beta2) * g * g;
        let (m_hat, v_hat) = self.corrected_moments();
        self.tau += h.alpha * lr_mult * h.s * m_hat / (v_hat.sqrt() + h.eps);
        Ok(())
    }

    /// `τ ← τ + α·s·g` without moment estimation.
    pub fn sgd_step(&mut self, g: f64, lr_mult: f64) -> Result<()> {
        check_finite(g)?;
        let h = self.hyper;
        self.k += 1;
        self.tau += h.alpha * lr_mult * h.s * g;
        Ok(())
    }

    /// Bias-corrected `(m̂, v̂)` for the current step count.
    pub fn corrected_moments(&self) -> (f64, f64) {
        if self.k == 0 {
            return (0.0, 0.0);
        }
        let k = i32::try_from(self.k).unwrap_or(i32::MAX);
        let m_hat = self.m / (1.0 - self.hyper.beta1.powi(k));
        let v_hat = self.v / (1.0 - self.hyper.beta2.powi(k));
        (m_hat, v_hat)
    }
}

fn check_finite(g: f64) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("threshold gradient {g} is not finite")))
    }
}

/// `μ_i = Σ_j grad_h[i,j]·delta[i,j]` at valid tokens, `0` at padding.
pub fn token_influence(grad_h: &Matrix, delta: &Matrix, valid: &[f64]) -> Result<Vec<f64>> {
    if grad_h.shape() != delta.shape() || valid.len() != grad_h.rows() {
        return Err(Error::Shape(format!(
            "token_influence: grad {:?}, delta {:?}, valid {}",
            grad_h.shape(),
            delta.shape(),
            valid.len()
        )));
    }
    Ok((0..grad_h.rows())
        .map(|i| {
            if valid[i] == 0.0 {
                0.0
            } else {
                grad_h.row(i).iter().zip(delta.row(i)).map(|(g, d)| g * d).sum()
            }
        })
        .collect())
}

/// Running sum of the consistency-masked threshold gradient.
///
/// A valid token contributes `μ_i` when `[μ_i ≥ 0] == [r_i ≥ τ]`, plus `λ`
/// when `r_i ≥ τ`. Feeding several sequences into one accumulator sums over
/// the whole batch in a fixed order.
#[derive(Debug, Clone, Copy)]
pub struct ThresholdGradient {
    tau: f64,
    lambda: f64,
    sum: f64,
}

impl ThresholdGradient {
    pub fn new(tau: f64, lambda: f64) -> Self {
        Self { tau, lambda, sum: 0.0 }
    }

    pub fn add_sequence(&mut self, mu: &[f64], r: &[f64], valid: &[f64]) -> Result<()> {
        if mu.len() != r.len() || r.len() != valid.len() {
            return Err(Error::Shape("threshold gradient inputs differ in length".into()));
        }
        for i in 0..mu.len() {
            if valid[i] == 0.0 {
                continue;
            }
            let on = r[i] >= self.tau;
            let mut term = 0.0;
            if (mu[i] >= 0.0) == on {
                term += mu[i];
            }
            if on {
                term += self.lambda;
            }
            self.sum += term;
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Threshold gradient of a single sequence.
pub fn threshold_gradient(mu: &[f64], r: &[f64], tau: f64, lambda: f64, valid: &[f64]) -> Result<f64> {
    let mut acc = ThresholdGradient::new(tau, lambda);
    acc.add_sequence(mu, r, valid)?;
    Ok(acc.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;
    use proptest::prelude::*;

    fn hyper(s: f64, alpha: f64) -> TauHyper {
        TauHyper {
            s,
            lambda: 0.0,
            alpha,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }

    #[test]
    fn influence_is_row_dot_product() {
        let g = Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let d = Matrix::from_rows(&[vec![0.5, 0.25]]).unwrap();
        assert_eq!(token_influence(&g, &d, &[1.0]).unwrap(), vec![0.25]);
        assert_eq!(token_influence(&g, &Matrix::zeros(1, 2), &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(token_influence(&g, &d, &[0.0]).unwrap(), vec![0.0]);
        assert!(token_influence(&g, &Matrix::zeros(2, 2), &[1.0]).is_err());
    }

    #[test]
    fn hand_evaluated_threshold_gradient() {
        let g = threshold_gradient(&[2.0, -1.0, 1.0], &[0.3, 0.1, 0.1], 0.2, 0.1, &[1.0; 3]).unwrap();
        assert!((g - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_influence_zero_lambda() {
        let g = threshold_gradient(&[0.0; 4], &[0.1, 0.5, 0.0, 2.0], 0.3, 0.0, &[1.0; 4]).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn all_on_nonnegative_influence() {
        let mu = [0.5, 0.0, 1.25, 3.0];
        let g = threshold_gradient(&mu, &[0.1; 4], 0.0, 0.25, &[1.0; 4]).unwrap();
        assert_eq!(g, mu.iter().sum::<f64>() + 4.0 * 0.25);
    }

    #[test]
    fn padding_excluded() {
        let g = threshold_gradient(&[5.0, 1.0], &[1.0, 1.0], 0.0, 0.5, &[0.0, 1.0]).unwrap();
        assert_eq!(g, 1.5);
    }

    #[test]
    fn first_step_bias_correction() {
        let mut st = GateState::new(hyper(0.3, 2.0));
        st.adam_step(1.0, 1.0).unwrap();
        let (m_hat, v_hat) = st.corrected_moments();
        assert!((m_hat - 1.0).abs() < 1e-15);
        assert!((v_hat - 1.0).abs() < 1e-15);
        assert!((st.tau - 2.0 * 0.3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_tau() {
        let mut st = GateState::new(hyper(1.0, 1.0));
        st.adam_step(0.0, 1.0).unwrap();
        assert_eq!(st.tau, 0.0);
        let mut sgd = GateState::new(hyper(1.0, 1.0));
        sgd.sgd_step(0.0, 1.0).unwrap();
        assert_eq!(sgd.tau, 0.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut st = GateState::new(hyper(1.0, 1.0));
        assert!(st.adam_step(f64::NAN, 1.0).is_err());
        assert_eq!(st.k, 0);
    }

    #[test]
    fn constant_gradient_identities() {
        for g in [1.0, -0.37, 12.5] {
            let mut st = GateState::new(hyper(1e-3, 1.0));
            for _ in 0..500 {
                st.adam_step(g, 1.0).unwrap();
                let (m_hat, v_hat) = st.corrected_moments();
                assert!((m_hat - g).abs() <= 1e-12 * g.abs());
                assert!((v_hat - g * g).abs() <= 1e-12 * g * g);
            }
        }
    }

    #[test]
    fn pure_lambda_pressure_raises_tau() {
        let mut st = GateState::new(TauHyper {
            lambda: 0.01,
            ..hyper(0.1, 1.0)
        });
        let mut rng = Rng::new(3);
        let mut prev = st.tau;
        for _ in 0..100 {
            let r: Vec<f64> = (0..16).map(|_| rng.uniform(0.0, 1.0)).collect();
            let g = threshold_gradient(&[0.0; 16], &r, st.tau, st.hyper.lambda, &[1.0; 16]).unwrap();
            assert!(g >= 0.0);
            st.adam_step(g, 1.0).unwrap();
            assert!(st.tau >= prev);
            prev = st.tau;
        }
    }

    proptest! {
        #[test]
        fn consistent_tokens_null_the_loss_term(
            tokens in prop::collection::vec((0.0f64..1.0, 0.01f64..5.0, any::<bool>()), 1..30),
            tau in 0.05f64..0.95,
        ) {
            // Each token is placed so the gate already agrees with its
            // influence: μ ≥ 0 with r < τ, or μ < 0 with r ≥ τ.
            let mut mu = Vec::new();
            let mut r = Vec::new();
            for &(u, mag, harmful_on) in &tokens {
                if harmful_on {
                    mu.push(-mag);
                    r.push(tau + u);
                } else {
                    mu.push(mag);
                    r.push(tau * u * 0.999);
                }
            }
            let g = threshold_gradient(&mu, &r, tau, 0.0, &vec![1.0; mu.len()]).unwrap();
            prop_assert_eq!(g, 0.0);
        }
    }
}

//! Drives one threshold with a noisy gradient stream under the Adam-style
//! and plain-SGD update rules and prints both trajectories.

use tspeft::numkernel::Rng;
use tspeft::tau_opt::{threshold_gradient, GateState, TauHyper};

fn main() -> tspeft::Result<()> {
    let hyper = TauHyper {
        s: 1e-3,
        lambda: 1e-3,
        ..TauHyper::default()
    };
    let mut adam = GateState::new(hyper);
    let mut sgd = GateState::new(hyper);
    let mut rng = Rng::new(7);
    let valid = vec![1.0; 64];
    println!("step,adam_tau,sgd_tau,g_adam,g_sgd");
    for step in 1..=200 {
        // Influences shrink as r grows: tokens above ~0.05 mostly help.
        let r: Vec<f64> = (0..64).map(|_| rng.uniform(0.0, 0.2)).collect();
        let mu: Vec<f64> = r.iter().map(|&ri| (0.05 - ri) * 0.5 + 0.02 * rng.normal()).collect();
        let g_a = threshold_gradient(&mu, &r, adam.tau, hyper.lambda, &valid)?;
        let g_s = threshold_gradient(&mu, &r, sgd.tau, hyper.lambda, &valid)?;
        adam.adam_step(g_a, 1.0)?;
        sgd.sgd_step(g_s, 1.0)?;
        if step % 20 == 0 {
            println!("{step},{:.6},{:.6},{g_a:.4},{g_s:.4}", adam.tau, sgd.tau);
        }
    }
    let (m_hat, v_hat) = adam.corrected_moments();
    println!(
        "adam corrected moments after {} steps: m̂ {m_hat:.4e}, v̂ {v_hat:.4e}",
        adam.k
    );
    Ok(())
}

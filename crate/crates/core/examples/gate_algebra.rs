//! Relative update magnitudes, the tie-inclusive threshold gate and token
//! sparsity on a hand-built site.

use tspeft::numkernel::Matrix;
use tspeft::tsgate::{apply_gate, gate, relative_magnitudes, sparsity};

fn main() -> tspeft::Result<()> {
    let base = Matrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 2.0]])?;
    let delta = Matrix::from_rows(&[vec![0.3, 0.4], vec![0.0, 0.5], vec![0.0, 0.0], vec![1.0, 0.0]])?;
    let valid = [1.0, 1.0, 1.0, 0.0];

    let r = relative_magnitudes(&base, &delta)?;
    println!("r = {r:?}");
    for tau in [0.0, 0.1, 0.3, 0.6] {
        let mask = gate(&r, tau);
        println!("tau {tau:<4} mask {mask:?} sparsity {:.3}", sparsity(&mask, &valid)?);
    }
    let mask = gate(&r, 0.1);
    println!(
        "gated output at tau 0.1:\n{:?}",
        apply_gate(&base, &delta, &mask)?.data()
    );
    Ok(())
}

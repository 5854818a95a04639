//! The three PEFT variants on one frozen weight: zero update at
//! initialization, parameter counts, and LoRA merging.

use tspeft::numkernel::{seeded_init, InitScheme, Rng};
use tspeft::peft::{param_count_formula, PeftParams, PeftVariant};

fn main() -> tspeft::Result<()> {
    let mut rng = Rng::new(3);
    let (d_in, d_out, rank) = (16, 24, 4);
    let w0 = seeded_init(d_in, d_out, &mut rng, InitScheme::ScaledNormal { fan_in: d_in })?;
    let x = seeded_init(5, d_in, &mut rng, InitScheme::Uniform { lo: -1.0, hi: 1.0 })?;

    for variant in [PeftVariant::Lora, PeftVariant::Dora, PeftVariant::Adapter] {
        let mut p = PeftParams::init(variant, &w0, rank, 0.5, &mut rng)?;
        let (delta0, _) = p.delta_forward(&w0, &x)?;
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v += 0.05 * rng.normal());
        }
        let (delta, _) = p.delta_forward(&w0, &x)?;
        println!(
            "{:<8} params {:>4} (formula {:>4})  max|M(x)| at init {:.1e}, after perturbation {:.3}",
            variant.name(),
            p.param_count(),
            param_count_formula(variant, d_in, d_out, rank),
            delta0.max_abs(),
            delta.max_abs()
        );
        if let Some(merged) = p.merged_lora_weight(&w0) {
            let merged = merged?;
            let via_merge = x.matmul(&merged)?;
            let via_delta = x.matmul(&w0)?.add(&delta)?;
            println!(
                "         merged-weight forward differs by {:.1e}",
                via_merge.sub(&via_delta)?.max_abs()
            );
        }
    }
    Ok(())
}

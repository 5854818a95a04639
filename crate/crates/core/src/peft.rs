//! PEFT variants. Each produces a delta `M(x)` for a site's input rows and
//! back-propagates through it with a per-token gate held constant.
//!
//! Layout follows the backbone: a frozen site weight `W₀` is `[d_in × d_out]`
//! and maps input rows as `x·W₀`. LoRA factors keep the usual shapes,
//! `A: [r × d_in]` and `B: [d_out × r]`, so `M(x_i) = α_s·B·A·x_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{seeded_init, InitScheme, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftVariant {
    Lora,
    /// Magnitude/direction decomposition of the merged weight, with a trainable
    /// per-output-column magnitude.
    Dora,
    /// Parallel bottleneck adapter with ReLU.
    Adapter,
}

impl PeftVariant {
    pub fn name(self) -> &'static str {
        match self {
            PeftVariant::Lora => "lora",
            PeftVariant::Dora => "dora",
            PeftVariant::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraParams {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoraParams {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
    pub magnitude: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub down: Matrix,
    pub up: Matrix,
}

impl LoraParams {
    /// `A` uniform in `±1/sqrt(d_in)`, `B` zero.
    pub fn init(d_in: usize, d_out: usize, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            a: seeded_init(rank, d_in, rng, InitScheme::Uniform { lo: -bound, hi: bound })?,
            b: Matrix::zeros(d_out, rank),
            scale,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }
}

impl DoraParams {
    /// LoRA-style factors plus magnitudes equal to `W₀`'s column norms, so the
    /// merged weight starts at `W₀`.
    pub fn init(w0: &Matrix, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let lora = LoraParams::init(w0.rows(), w0.cols(), rank, scale, rng)?;
        Ok(Self {
            a: lora.a,
            b: lora.b,
            scale,
            magnitude: w0.col_l2_norms(),
        })
    }
}

impl AdapterParams {
    pub fn init(d_in: usize, d_out: usize, bottleneck: usize, rng: &mut Rng) -> Result<Self> {
        if bottleneck == 0 {
            return Err(Error::Config("adapter bottleneck must be at least 1".into()));
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            down: seeded_init(bottleneck, d_in, rng, InitScheme::Uniform { lo: -bound, hi: bound })?,
            up: Matrix::zeros(d_out, bottleneck),
        })
    }
}

/// Intermediates kept from a delta forward.
#[derive(Debug, Clone, PartialEq)]
pub enum DeltaCache {
    /// `x·Aᵀ`.
    Lora {
        proj: Matrix,
    },
    Dora {
        /// Unnormalized merged weight `W₀ + α_s·(BA)ᵀ`.
        direction: Matrix,
        norms: Vec<f64>,
        /// `W' − W₀`.
        diff: Matrix,
    },
    Adapter {
        pre: Matrix,
    },
}

/// Parameter gradients of one module plus the gradient reaching the site
/// input through the delta branch.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaGrads {
    pub params: Vec<Matrix>,
    pub input: Matrix,
}

fn check_input(x: &Matrix, d_in: usize, what: &str) -> Result<()> {
    if x.cols() != d_in {
        return Err(Error::Shape(format!(
            "{what}: input has {} columns, expected {d_in}",
            x.cols()
        )));
    }
    Ok(())
}

fn masked(grad_h: &Matrix, gate: &[f64]) -> Result<Matrix> {
    grad_h.scale_rows(gate)
}

pub fn lora_delta_forward(p: &LoraParams, x: &Matrix) -> Result<(Matrix, DeltaCache)> {
    check_input(x, p.a.cols(), "lora")?;
    let proj = x.matmul_nt(&p.a)?;
    let mut delta = proj.matmul_nt(&p.b)?;
    delta.scale_in_place(p.scale);
    Ok((delta, DeltaCache::Lora { proj }))
}

/// Gradients for `(A, B)`; only rows with `gate = 1` contribute.
pub fn lora_delta_backward(
    p: &LoraParams,
    x: &Matrix,
    cache: &DeltaCache,
    grad_h: &Matrix,
    gate: &[f64],
) -> Result<DeltaGrads> {
    let DeltaCache::Lora { proj } = cache else {
        return Err(Error::Contract("LoRA backward given a non-LoRA cache".into()));
    };
    if proj.rows() != x.rows() || grad_h.rows() != x.rows() || grad_h.cols() != p.b.rows() {
        return Err(Error::Contract("LoRA cache does not match this input".into()));
    }
    let g = masked(grad_h, gate)?;
    let mut grad_b = g.matmul_tn(proj)?;
    grad_b.scale_in_place(p.scale);
    let mut grad_proj = g.matmul(&p.b)?;
    grad_proj.scale_in_place(p.scale);
    let grad_a = grad_proj.matmul_tn(x)?;
    let input = grad_proj.matmul(&p.a)?;
    Ok(DeltaGrads {
        params: vec![grad_a, grad_b],
        input,
    })
}

pub fn dora_delta_forward(p: &DoraParams, w0: &Matrix, x: &Matrix) -> Result<(Matrix, DeltaCache)> {
    check_input(x, w0.rows(), "dora")?;
    if p.magnitude.len() != w0.cols() || p.b.rows() != w0.cols() || p.a.cols() != w0.rows() {
        return Err(Error::Shape("DoRA parameters do not fit the site weight".into()));
    }
    let update = p.a.matmul_tn(&p.b.transpose())?;
    let mut direction = w0.clone();
    direction.axpy(p.scale, &update)?;
    let norms = direction.col_l2_norms();
    if let Some(j) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Numerical(format!(
            "merged DoRA column {j} has norm {}",
            norms[j]
        )));
    }
    let factors: Vec<f64> = p.magnitude.iter().zip(&norms).map(|(m, n)| m / n).collect();
    let mut diff = direction.clone();
    for i in 0..diff.rows() {
        for ((v, f), w) in diff.row_mut(i).iter_mut().zip(&factors).zip(w0.row(i)) {
            *v = *v * f - w;
        }
    }
    let delta = x.matmul(&diff)?;
    Ok((delta, DeltaCache::Dora { direction, norms, diff }))
}

/// Gradients for `(A, B, magnitude)`; the magnitude gradient is a `1 × d_out`
/// matrix.
pub fn dora_delta_backward(
    p: &DoraParams,
    x: &Matrix,
    cache: &DeltaCache,
    grad_h: &Matrix,
    gate: &[f64],
) -> Result<DeltaGrads> {
    let DeltaCache::Dora { direction, norms, diff } = cache else {
        return Err(Error::Contract("DoRA backward given a non-DoRA cache".into()));
    };
    if direction.rows() != x.cols() || grad_h.rows() != x.rows() || grad_h.cols() != direction.cols() {
        return Err(Error::Contract("DoRA cache does not match this input".into()));
    }
    let g = masked(grad_h, gate)?;
    let grad_merged = x.matmul_tn(&g)?;
    let (d_in, d_out) = direction.shape();

    let mut dots = vec![0.0; d_out];
    for i in 0..d_in {
        for ((acc, gm), v) in dots.iter_mut().zip(grad_merged.row(i)).zip(direction.row(i)) {
            *acc += gm * v;
        }
    }
    let grad_mag: Vec<f64> = dots.iter().zip(norms).map(|(c, n)| c / n).collect();

    let mut grad_dir = Matrix::zeros(d_in, d_out);
    for i in 0..d_in {
        for j in 0..d_out {
            let n = norms[j];
            let v = direction.get(i, j);
            let gm = grad_merged.get(i, j);
            grad_dir.set(i, j, p.magnitude[j] / n * (gm - dots[j] * v / (n * n)));
        }
    }
    let mut grad_update = grad_dir.transpose();
    grad_update.scale_in_place(p.scale);
    let grad_b = grad_update.matmul_nt(&p.a)?;
    let grad_a = p.b.matmul_tn(&grad_update)?;
    let input = g.matmul_nt(diff)?;
    Ok(DeltaGrads {
        params: vec![grad_a, grad_b, Matrix::from_vec(1, d_out, grad_mag)?],
        input,
    })
}

pub fn adapter_delta_forward(p: &AdapterParams, x: &Matrix) -> Result<(Matrix, DeltaCache)> {
    check_input(x, p.down.cols(), "adapter")?;
    let pre = x.matmul_nt(&p.down)?;
    let act = pre.map(|v| v.max(0.0));
    let delta = act.matmul_nt(&p.up)?;
    Ok((delta, DeltaCache::Adapter { pre }))
}

/// Gradients for `(down, up)`.
pub fn adapter_delta_backward(
    p: &AdapterParams,
    x: &Matrix,
    cache: &DeltaCache,
    grad_h: &Matrix,
    gate: &[f64],
) -> Result<DeltaGrads> {
    let DeltaCache::Adapter { pre } = cache else {
        return Err(Error::Contract("adapter backward given a non-adapter cache".into()));
    };
    if pre.rows() != x.rows() || grad_h.rows() != x.rows() || grad_h.cols() != p.up.rows() {
        return Err(Error::Contract("adapter cache does not match this input".into()));
    }
    let g = masked(grad_h, gate)?;
    let act = pre.map(|v| v.max(0.0));
    let grad_up = g.matmul_tn(&act)?;
    let mut grad_pre = g.matmul(&p.up)?;
    for (gp, &z) in grad_pre.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *gp = 0.0;
        }
    }
    let grad_down = grad_pre.matmul_tn(x)?;
    let input = grad_pre.matmul(&p.down)?;
    Ok(DeltaGrads {
        params: vec![grad_down, grad_up],
        input,
    })
}

/// Parameters of one attached module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PeftParams {
    Lora(LoraParams),
    Dora(DoraParams),
    Adapter(AdapterParams),
}

impl PeftParams {
    pub fn init(
        variant: PeftVariant,
        w0: &Matrix,
        rank_or_bottleneck: usize,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (d_in, d_out) = w0.shape();
        Ok(match variant {
            PeftVariant::Lora => PeftParams::Lora(LoraParams::init(d_in, d_out, rank_or_bottleneck, scale, rng)?),
            PeftVariant::Dora => PeftParams::Dora(DoraParams::init(w0, rank_or_bottleneck, scale, rng)?),
            PeftVariant::Adapter => PeftParams::Adapter(AdapterParams::init(d_in, d_out, rank_or_bottleneck, rng)?),
        })
    }

    pub fn variant(&self) -> PeftVariant {
        match self {
            PeftParams::Lora(_) => PeftVariant::Lora,
            PeftParams::Dora(_) => PeftVariant::Dora,
            PeftParams::Adapter(_) => PeftVariant::Adapter,
        }
    }

    pub fn delta_forward(&self, w0: &Matrix, x: &Matrix) -> Result<(Matrix, DeltaCache)> {
        match self {
            PeftParams::Lora(p) => lora_delta_forward(p, x),
            PeftParams::Dora(p) => dora_delta_forward(p, w0, x),
            PeftParams::Adapter(p) => adapter_delta_forward(p, x),
        }
    }

    pub fn delta_backward(&self, x: &Matrix, cache: &DeltaCache, grad_h: &Matrix, gate: &[f64]) -> Result<DeltaGrads> {
        match self {
            PeftParams::Lora(p) => lora_delta_backward(p, x, cache, grad_h, gate),
            PeftParams::Dora(p) => dora_delta_backward(p, x, cache, grad_h, gate),
            PeftParams::Adapter(p) => adapter_delta_backward(p, x, cache, grad_h, gate),
        }
    }

    /// Names of the trainable tensors, in the order gradients are returned.
    pub fn tensor_names(&self) -> &'static [&'static str] {
        match self {
            PeftParams::Lora(_) => &["A", "B"],
            PeftParams::Dora(_) => &["A", "B", "magnitude"],
            PeftParams::Adapter(_) => &["down", "up"],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        match self {
            PeftParams::Lora(p) => vec![p.a.data(), p.b.data()],
            PeftParams::Dora(p) => vec![p.a.data(), p.b.data(), &p.magnitude],
            PeftParams::Adapter(p) => vec![p.down.data(), p.up.data()],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            PeftParams::Lora(p) => vec![p.a.data_mut(), p.b.data_mut()],
            PeftParams::Dora(p) => vec![p.a.data_mut(), p.b.data_mut(), &mut p.magnitude],
            PeftParams::Adapter(p) => vec![p.down.data_mut(), p.up.data_mut()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Folds a LoRA update into a copy of `w0`; `None` for other variants.
    pub fn merged_lora_weight(&self, w0: &Matrix) -> Option<Result<Matrix>> {
        let PeftParams::Lora(p) = self else {
            return None;
        };
        Some(p.a.matmul_tn(&p.b.transpose()).and_then(|upd| {
            let mut w = w0.clone();
            w.axpy(p.scale, &upd)?;
            Ok(w)
        }))
    }
}

/// Analytic trainable-parameter count of one module.
pub fn param_count_formula(variant: PeftVariant, d_in: usize, d_out: usize, rank: usize) -> usize {
    match variant {
        PeftVariant::Lora | PeftVariant::Adapter => rank * (d_in + d_out),
        PeftVariant::Dora => rank * (d_in + d_out) + d_out,
    }
}

//! Style-conditioned latent diffusion: noise schedule, modulated U-Net
//! denoiser, training objective with condition dropout, and guided
//! ancestral sampling.

mod denoiser;
mod schedule;

pub use denoiser::{channel_norm, AttentionBlock, Denoiser, DenoiserConfig, ModulatedBlock, StyleCondition};
pub use schedule::{forward_diffuse, timestep_embed, NoiseSchedule};

use crate::adapter::Adapter;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::rng::SeededRng;

/// One training example: a clean latent, its caption, and the mel of a
/// reference clip drawn from the same source.
#[derive(Debug, Clone, Copy)]
pub struct DiffusionExample<'a> {
    pub z0: &'a Tensor,
    pub caption: &'a str,
    pub ref_mel: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean per-element squared error over the batch.
    pub loss: f64,
    /// Examples whose condition was dropped.
    pub dropped: usize,
}

/// Noise-prediction loss over a batch. Each example gets a uniform step,
/// fresh noise, and with probability `p_drop` an absent condition.
/// Gradients of the batch-mean loss are added to `store`.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    store: &mut ParamStore,
    adapter: &Adapter,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    batch: &[DiffusionExample],
    p_drop: f64,
    rng: &mut SeededRng,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    let (stats, grads) = {
        let mut g = Graph::new(store);
        let mut losses = Vec::with_capacity(batch.len());
        let mut dropped = 0;
        for ex in batch {
            let n = rng.range_inclusive(1, sched.len());
            let eps = Tensor::randn(ex.z0.shape(), 1.0, rng);
            let drop = rng.bernoulli(p_drop);
            let zn = forward_diffuse(ex.z0, n, sched, &eps)?;
            let style = if drop {
                dropped += 1;
                StyleCondition::Absent
            } else {
                StyleCondition::Present(adapter.style_from_mel(&mut g, ex.caption, ex.ref_mel)?)
            };
            let zv = g.constant(zn);
            let pred = denoiser.forward(&mut g, zv, n, style)?;
            let target = g.constant(eps);
            losses.push(g.mse(pred, target)?);
        }
        let total = if losses.len() == 1 {
            losses[0]
        } else {
            let cat = g.concat_rows(&losses)?;
            g.mean(cat)
        };
        let loss = g.value(total).data()[0];
        (StepStats { loss, dropped }, g.backward(total)?)
    };
    store.accumulate(&grads);
    Ok(stats)
}

/// `w·cond + (1 − w)·uncond`.
pub fn guidance_combine(cond: &Tensor, uncond: &Tensor, w: f64) -> Result<Tensor> {
    cond.zip(uncond, "guidance", |c, u| w * c + (1.0 - w) * u)
}

/// Classifier-free guided noise estimate for a `[1, d]` style.
pub fn cfg_estimate(store: &ParamStore, denoiser: &Denoiser, z: &Tensor, n: usize, style: &Tensor, w: f64) -> Result<Tensor> {
    let cond = denoiser.predict(store, z, n, Some(style))?;
    let uncond = denoiser.predict(store, z, n, None)?;
    guidance_combine(&cond, &uncond, w)
}

/// Ancestral DDPM sampling from `z_N ~ N(0, I)` with an arbitrary noise
/// estimator `eps(z_n, n)`. No noise is added on the final step.
pub fn sample_with<F>(shape: &[usize], sched: &NoiseSchedule, rng: &mut SeededRng, mut eps: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    let mut z = Tensor::randn(shape, 1.0, rng);
    for n in (1..=sched.len()).rev() {
        let e = eps(&z, n)?;
        let beta = sched.beta(n)?;
        let ab = sched.alpha_bar(n)?;
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let coef = beta / (1.0 - ab).sqrt();
        let mut next = z.zip(&e, "ddpm step", |zv, ev| inv_sqrt_alpha * (zv - coef * ev))?;
        if n > 1 {
            let sigma = sched.posterior_variance(n)?.sqrt();
            let noise = Tensor::randn(shape, 1.0, rng);
            for (v, xi) in next.data_mut().iter_mut().zip(noise.data()) {
                *v += sigma * xi;
            }
        }
        z = next;
    }
    Ok(z)
}

/// Guided sample of a latent for a `[1, d]` style embedding.
pub fn sample(store: &ParamStore, denoiser: &Denoiser, sched: &NoiseSchedule, style: &Tensor, w: f64, rng: &mut SeededRng) -> Result<Tensor> {
    if !(w >= 0.0) {
        return Err(Error::Config(format!("guidance scale must be >= 0, got {w}")));
    }
    let shape = denoiser.config().latent;
    sample_with(&shape, sched, rng, |z, n| cfg_estimate(store, denoiser, z, n, style, w))
}

#[cfg(test)]
mod tests;

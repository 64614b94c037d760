use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Linear β schedule with cumulative products `ᾱ_n = ∏_{s≤n}(1 − β_s)`.
/// Steps are 1-based: index `n - 1` holds step `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `n_steps` betas linearly spaced over `[beta_start, beta_end]`.
    pub fn linear(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {beta_start} and {beta_end}"
            )));
        }
        if n_steps > 1 && !(beta_start < beta_end) {
            return Err(Error::Config(format!(
                "beta_start {beta_start} must be below beta_end {beta_end}"
            )));
        }
        let betas = if n_steps == 1 {
            vec![beta_start]
        } else {
            (0..n_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n_steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("betas must be strictly increasing".into()));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.len() {
            return Err(Error::Contract(format!("step {n} outside 1..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, n: usize) -> Result<f64> {
        self.check_step(n)?;
        Ok(self.betas[n - 1])
    }

    /// `ᾱ_n`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Ok(1.0);
        }
        self.check_step(n)?;
        Ok(self.alpha_bars[n - 1])
    }

    /// Variance of the ancestral posterior `q(z_{n−1} | z_n, z_0)`.
    pub fn posterior_variance(&self, n: usize) -> Result<f64> {
        let ab = self.alpha_bar(n)?;
        let ab_prev = self.alpha_bar(n - 1)?;
        Ok(self.beta(n)? * (1.0 - ab_prev) / (1.0 - ab))
    }
}

/// `z_n = √ᾱ_n·z0 + √(1 − ᾱ_n)·eps`.
pub fn forward_diffuse(z0: &Tensor, n: usize, sched: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    sched.check_step(n)?;
    let ab = sched.alpha_bar(n)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip(eps, "forward_diffuse", |z, e| a * z + b * e)
}

/// Sinusoidal embedding of step `n`: `dim/2` sines at geometric
/// frequencies followed by the matching cosines.
pub fn timestep_embed(n: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("timestep embedding width must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = n as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn two_step_example() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.7]);
    }

    #[test]
    fn bound_violations() {
        for (n, a, b) in [(0, 0.1, 0.2), (3, 0.0, 0.2), (3, 0.3, 0.2), (3, 0.1, 1.0), (3, 0.2, 0.2)] {
            assert!(matches!(NoiseSchedule::linear(n, a, b), Err(Error::Config(_))), "{n} {a} {b}");
        }
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        let z0 = Tensor::vector(vec![1.0, -2.0]);
        let z = forward_diffuse(&z0, 2, &s, &Tensor::zeros(&[2])).unwrap();
        assert!((z.data()[0] - 0.848528137423857).abs() < 1e-12);
        assert!(forward_diffuse(&z0, 0, &s, &Tensor::zeros(&[2])).is_err());
        assert!(forward_diffuse(&z0, 3, &s, &Tensor::zeros(&[2])).is_err());
        let tiny = NoiseSchedule::from_betas(vec![1e-12]).unwrap();
        let z = forward_diffuse(&z0, 1, &tiny, &Tensor::ones(&[2])).unwrap();
        assert!(z.max_abs_diff(&z0) < 1e-5);
    }

    #[test]
    fn timestep_embedding_properties() {
        let e = timestep_embed(0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(timestep_embed(3, 7), Err(Error::Config(_))));
        let embs: Vec<Tensor> = (1..=200).map(|n| timestep_embed(n, 32).unwrap()).collect();
        for (i, a) in embs.iter().enumerate() {
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            for b in &embs[i + 1..] {
                assert!(a.max_abs_diff(b) > 1e-6);
            }
        }
    }

    #[test]
    fn forward_diffusion_preserves_unit_variance() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let n = 100_000;
        let mut rng = SeededRng::new(21);
        for step in [1, 10, 25, 50] {
            let z0 = Tensor::randn(&[n], 1.0, &mut rng);
            let eps = Tensor::randn(&[n], 1.0, &mut rng);
            let z = forward_diffuse(&z0, step, &s, &eps).unwrap();
            let m = z.mean();
            let var = z.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            // standard error of the sample variance of a unit Gaussian is √(2/(n−1))
            let se = (2.0 / (n - 1) as f64).sqrt();
            assert!((var - 1.0).abs() < 3.0 * se, "step {step}: {var}");
        }
    }

    proptest! {
        #[test]
        fn alpha_bars_decrease_within_unit_interval(n in 1usize..300, a in 1e-5f64..0.4, span in 1e-4f64..0.5) {
            let b = (a + span).min(0.999);
            let s = NoiseSchedule::linear(n, a, b).unwrap();
            let ab = s.alpha_bars();
            prop_assert!(ab.iter().all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        }
    }
}

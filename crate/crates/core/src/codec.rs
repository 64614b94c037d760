//! Small convolutional VAE mapping `[frames, bins]` mels to
//! `[channels, frames/4, bins/4]` latents and back.

use crate::error::{Error, Result};
use crate::numerics::nn::{Conv2d, ConvTranspose2d};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecConfig {
    /// Mel frames per example; a multiple of 4.
    pub frames: usize,
    /// Mel bins; a multiple of 4.
    pub bins: usize,
    pub latent_channels: usize,
    pub c1: usize,
    pub c2: usize,
    pub beta_kl: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            frames: 128,
            bins: 64,
            latent_channels: 4,
            c1: 16,
            c2: 32,
            beta_kl: 1e-3,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.bins == 0 || self.frames % 4 != 0 || self.bins % 4 != 0 {
            return Err(Error::Config(format!(
                "codec mel shape {}x{} must be positive multiples of 4",
                self.frames, self.bins
            )));
        }
        if self.latent_channels == 0 || self.c1 == 0 || self.c2 == 0 {
            return Err(Error::Config("codec channel counts must be positive".into()));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(Error::Config(format!("beta_kl must be >= 0, got {}", self.beta_kl)));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.frames / 4, self.bins / 4]
    }
}

/// Encoder posterior parameters.
#[derive(Debug, Clone, Copy)]
pub struct CodecOutput {
    pub mu: Var,
    pub logvar: Var,
}

#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    enc1: Conv2d,
    enc2: Conv2d,
    enc3: Conv2d,
    dec1: Conv2d,
    dec2: ConvTranspose2d,
    dec3: ConvTranspose2d,
}

impl Codec {
    pub fn new(store: &mut ParamStore, cfg: &CodecConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let lc = cfg.latent_channels;
        Ok(Self {
            cfg: *cfg,
            enc1: Conv2d::new(store, "codec.enc1", 1, cfg.c1, 3, 2, 1, rng),
            enc2: Conv2d::new(store, "codec.enc2", cfg.c1, cfg.c2, 3, 2, 1, rng),
            enc3: Conv2d::new(store, "codec.enc3", cfg.c2, 2 * lc, 3, 1, 1, rng),
            dec1: Conv2d::new(store, "codec.dec1", lc, cfg.c2, 3, 1, 1, rng),
            dec2: ConvTranspose2d::new(store, "codec.dec2", cfg.c2, cfg.c1, 4, 2, 1, rng),
            dec3: ConvTranspose2d::new(store, "codec.dec3", cfg.c1, 1, 4, 2, 1, rng),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn encode(&self, g: &mut Graph, mel: Var) -> Result<CodecOutput> {
        let (f, b) = (self.cfg.frames, self.cfg.bins);
        if g.shape(mel) != [f, b] {
            return Err(Error::Contract(format!(
                "codec expects a {f}x{b} mel, got {:?}",
                g.shape(mel)
            )));
        }
        let x = g.reshape(mel, &[1, f, b])?;
        let h = self.enc1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.enc2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.enc3.forward(g, h)?;
        let lc = self.cfg.latent_channels;
        Ok(CodecOutput {
            mu: g.slice_rows(h, 0, lc)?,
            logvar: g.slice_rows(h, lc, 2 * lc)?,
        })
    }

    /// Non-negative `[frames, bins]` reconstruction.
    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let want = self.cfg.latent_shape();
        if g.shape(z) != want {
            return Err(Error::Contract(format!(
                "codec expects a {want:?} latent, got {:?}",
                g.shape(z)
            )));
        }
        let h = self.dec1.forward(g, z)?;
        let h = g.silu(h);
        let h = self.dec2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.dec3.forward(g, h)?;
        let h = g.softplus(h);
        g.reshape(h, &[self.cfg.frames, self.cfg.bins])
    }

    /// Posterior mean of a mel, outside any training graph.
    pub fn encode_mu(&self, store: &ParamStore, mel: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let x = g.constant(mel.clone());
        let out = self.encode(&mut g, x)?;
        Ok(g.value(out.mu).clone())
    }

    pub fn decode_tensor(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let x = g.constant(z.clone());
        let y = self.decode(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    /// ELBO of one mel with a reparameterized posterior draw.
    pub fn loss(&self, g: &mut Graph, mel: &Tensor, rng: &mut SeededRng) -> Result<Var> {
        let x = g.constant(mel.clone());
        let out = self.encode(g, x)?;
        let eps = Tensor::randn(&self.cfg.latent_shape(), 1.0, rng);
        let z = reparameterize_graph(g, out, &eps)?;
        let recon = self.decode(g, z)?;
        elbo_loss(g, x, out, recon, self.cfg.beta_kl)
    }
}

/// `mu + exp(logvar/2)·eps` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
    let eps = Tensor::randn(mu.shape(), 1.0, rng);
    reparameterize_with(mu, logvar, &eps)
}

pub fn reparameterize_with(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let std = logvar.map(|v| (0.5 * v).exp());
    mu.add(&std.zip(eps, "reparameterize", |a, b| a * b)?)
}

pub fn reparameterize_graph(g: &mut Graph, out: CodecOutput, eps: &Tensor) -> Result<Var> {
    let half = g.scale(out.logvar, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e)?;
    g.add(out.mu, noise)
}

/// `mean(½(mu² + exp(logvar) − 1 − logvar))`.
pub fn kl_term(g: &mut Graph, out: CodecOutput) -> Result<Var> {
    let mu2 = g.mul(out.mu, out.mu)?;
    let ev = g.exp(out.logvar);
    let s = g.add(mu2, ev)?;
    let s = g.sub(s, out.logvar)?;
    let s = g.add_scalar(s, -1.0);
    let s = g.scale(s, 0.5);
    Ok(g.mean(s))
}

/// `mse(recon, mel) + beta_kl · KL`.
pub fn elbo_loss(g: &mut Graph, mel: Var, out: CodecOutput, recon: Var, beta_kl: f64) -> Result<Var> {
    let rec = g.mse(recon, mel)?;
    let kl = kl_term(g, out)?;
    let kl = g.scale(kl, beta_kl);
    g.add(rec, kl)
}

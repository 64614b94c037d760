use super::timestep_embed;
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv2d, ConvTranspose2d, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::SeededRng;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// `[channels, height, width]`; height and width must be even.
    pub latent: [usize; 3],
    pub c1: usize,
    pub c2: usize,
    pub style_dim: usize,
    pub t_dim: usize,
    pub mod_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent: [4, 32, 16],
            c1: 16,
            c2: 32,
            style_dim: 64,
            t_dim: 32,
            mod_hidden: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.latent;
        if c == 0 || h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("latent shape {:?} needs positive even spatial dims", self.latent)));
        }
        if self.c1 == 0 || self.c2 == 0 || self.style_dim == 0 || self.mod_hidden == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if self.t_dim == 0 || self.t_dim % 2 != 0 {
            return Err(Error::Config(format!("timestep width must be even, got {}", self.t_dim)));
        }
        Ok(())
    }

    fn cond_dim(&self) -> usize {
        self.style_dim + self.t_dim
    }
}

/// Conditioning input: a pooled style embedding, or its absence (replaced
/// by a learned null vector).
#[derive(Debug, Clone, Copy)]
pub enum StyleCondition {
    Present(Var),
    Absent,
}

/// Layer norm across channels at every spatial position of `[c, h, w]`.
pub fn channel_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(Error::Contract(format!("channel_norm expects [c, h, w], got {shape:?}")));
    };
    let flat = g.reshape(x, &[c, h * w])?;
    let t = g.transpose(flat)?;
    let n = g.layer_norm(t, None, None, NORM_EPS)?;
    let back = g.transpose(n)?;
    g.reshape(back, &[c, h, w])
}

/// Residual conv block with adaLN-Zero modulation:
/// `x + gate ⊙ Block(LN(x)·(1 + γ) + β)` where `(γ, β, gate)` come from an
/// MLP over the conditioning vector whose last layer starts at zero.
#[derive(Debug, Clone)]
pub struct ModulatedBlock {
    channels: usize,
    mlp1: Linear,
    mlp2: Linear,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ModulatedBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, cond_dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            channels,
            mlp1: Linear::new(store, &format!("{name}.mod1"), cond_dim, hidden, rng),
            mlp2: Linear::zeros(store, &format!("{name}.mod2"), hidden, 3 * channels),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
        }
    }

    /// Final modulation layer, zero at initialization.
    pub fn modulation_head(&self) -> Linear {
        self.mlp2
    }

    /// `(γ, β, gate)`, each `[channels]`.
    pub fn modulation(&self, g: &mut Graph, cond: Var) -> Result<(Var, Var, Var)> {
        let h = self.mlp1.forward(g, cond)?;
        let h = g.silu(h);
        let m = self.mlp2.forward(g, h)?;
        let c = self.channels;
        let mut part = |i: usize| -> Result<Var> {
            let s = g.slice_cols(m, i * c, (i + 1) * c)?;
            g.reshape(s, &[c])
        };
        Ok((part(0)?, part(1)?, part(2)?))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, cond: Var) -> Result<Var> {
        if g.shape(x).first() != Some(&self.channels) {
            return Err(Error::Contract(format!(
                "block expects {} channels, got {:?}",
                self.channels,
                g.shape(x)
            )));
        }
        let (gamma, beta, gate) = self.modulation(g, cond)?;
        let n = channel_norm(g, x)?;
        let scale = g.add_scalar(gamma, 1.0);
        let h = g.mul_col_vec(n, scale)?;
        let h = g.add_col_vec(h, beta)?;
        let h = self.conv1.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let h = g.mul_col_vec(h, gate)?;
        g.add(x, h)
    }
}

/// Single-head self-attention over spatial positions, residual, with a
/// zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    out: Linear,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut SeededRng) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        let mut proj = |p: &str| store.add(format!("{name}.{p}"), Tensor::randn(&[channels, channels], std, rng));
        Self {
            q: proj("q"),
            k: proj("k"),
            v: proj("v"),
            out: Linear::zeros(store, &format!("{name}.out"), channels, channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::Contract(format!("attention expects [c, h, w], got {shape:?}")));
        };
        let flat = g.reshape(x, &[c, h * w])?;
        let tokens = g.transpose(flat)?;
        let n = g.layer_norm(tokens, None, None, NORM_EPS)?;
        let (wq, wk, wv) = (g.param(self.q), g.param(self.k), g.param(self.v));
        let q = g.matmul(n, wq)?;
        let k = g.matmul(n, wk)?;
        let v = g.matmul(n, wv)?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
        let attn = g.softmax_rows(logits);
        let mixed = g.matmul(attn, v)?;
        let o = self.out.forward(g, mixed)?;
        let o = g.transpose(o)?;
        let o = g.reshape(o, &[c, h, w])?;
        g.add(x, o)
    }
}

/// Two-level U-Net predicting the noise in a latent.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    null_style: ParamId,
    conv_in: Conv2d,
    res1: ModulatedBlock,
    down: Conv2d,
    res2: ModulatedBlock,
    attn: AttentionBlock,
    up: ConvTranspose2d,
    merge: Conv2d,
    res3: ModulatedBlock,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: &DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let lc = cfg.latent[0];
        let (c1, c2) = (cfg.c1, cfg.c2);
        let cd = cfg.cond_dim();
        Ok(Self {
            cfg: *cfg,
            null_style: store.add("denoiser.null_style", Tensor::randn(&[1, cfg.style_dim], 1.0, rng)),
            conv_in: Conv2d::new(store, "denoiser.conv_in", lc, c1, 3, 1, 1, rng),
            res1: ModulatedBlock::new(store, "denoiser.res1", c1, cd, cfg.mod_hidden, rng),
            down: Conv2d::new(store, "denoiser.down", c1, c2, 3, 2, 1, rng),
            res2: ModulatedBlock::new(store, "denoiser.res2", c2, cd, cfg.mod_hidden, rng),
            attn: AttentionBlock::new(store, "denoiser.attn", c2, rng),
            up: ConvTranspose2d::new(store, "denoiser.up", c2, c1, 4, 2, 1, rng),
            merge: Conv2d::new(store, "denoiser.merge", 2 * c1, c1, 3, 1, 1, rng),
            res3: ModulatedBlock::new(store, "denoiser.res3", c1, cd, cfg.mod_hidden, rng),
            conv_out: Conv2d::zeros(store, "denoiser.conv_out", c1, lc, 3, 1, 1),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> [&ModulatedBlock; 3] {
        [&self.res1, &self.res2, &self.res3]
    }

    /// `concat(style or null, timestep embedding)` as `[1, style_dim + t_dim]`.
    pub fn condition(&self, g: &mut Graph, style: StyleCondition, n: usize) -> Result<Var> {
        let s = match style {
            StyleCondition::Present(s) => {
                if g.shape(s) != [1, self.cfg.style_dim] {
                    return Err(Error::Contract(format!(
                        "style must be [1, {}], got {:?}",
                        self.cfg.style_dim,
                        g.shape(s)
                    )));
                }
                s
            }
            StyleCondition::Absent => g.param(self.null_style),
        };
        let t = timestep_embed(n, self.cfg.t_dim)?.reshape(&[1, self.cfg.t_dim])?;
        let t = g.constant(t);
        g.concat_cols(&[s, t])
    }

    pub fn forward(&self, g: &mut Graph, z: Var, n: usize, style: StyleCondition) -> Result<Var> {
        if g.shape(z) != self.cfg.latent {
            return Err(Error::Contract(format!(
                "denoiser expects latent {:?}, got {:?}",
                self.cfg.latent,
                g.shape(z)
            )));
        }
        let cond = self.condition(g, style, n)?;
        let h0 = self.conv_in.forward(g, z)?;
        let h1 = self.res1.forward(g, h0, cond)?;
        let d = self.down.forward(g, h1)?;
        let d = g.silu(d);
        let d = self.res2.forward(g, d, cond)?;
        let d = self.attn.forward(g, d)?;
        let u = self.up.forward(g, d)?;
        let u = g.silu(u);
        let m = g.concat_rows(&[u, h1])?;
        let m = self.merge.forward(g, m)?;
        let m = self.res3.forward(g, m, cond)?;
        let m = g.silu(m);
        self.conv_out.forward(g, m)
    }

    /// Noise estimate outside a training graph.
    pub fn predict(&self, store: &ParamStore, z: &Tensor, n: usize, style: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::inference(store);
        let zv = g.constant(z.clone());
        let cond = match style {
            Some(s) => StyleCondition::Present(g.constant(s.clone())),
            None => StyleCondition::Absent,
        };
        let out = self.forward(&mut g, zv, n, cond)?;
        Ok(g.value(out).clone())
    }
}

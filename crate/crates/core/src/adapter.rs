//! Dual-prompt adapter: a reference encoder turns a 2 s event clip into a
//! short sequence of style features, a token table embeds the caption, and
//! residual multi-head cross-attention fuses the two before mean pooling.

use std::collections::BTreeMap;

use crate::dsp::{mel_spectrogram, DspConfig};
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv2d, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::SeededRng;

pub const UNK: &str = "<unk>";

/// Lowercase, whitespace-separated tokens.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Token vocabulary. Id 0 is always the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Sorted unique tokens of `captions`, after the unknown token.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = captions.into_iter().flat_map(tokenize).collect();
        set.sort();
        set.dedup();
        set.retain(|t| t != UNK);
        Self::from_tokens(std::iter::once(UNK.to_string()).chain(set).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn ids(&self, caption: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = tokenize(caption).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            return Err(Error::Input("caption has no tokens".into()));
        }
        Ok(ids)
    }

    /// Space-separated token list, for checkpoint metadata.
    pub fn serialize(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn deserialize(s: &str) -> Result<Self> {
        let tokens: Vec<String> = s.split(' ').map(str::to_string).collect();
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Checkpoint("vocabulary must start with the unknown token".into()));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterConfig {
    /// Text/style width.
    pub d: usize,
    pub heads: usize,
    /// Reference feature width.
    pub d_r: usize,
    /// Number of reference feature vectors.
    pub r_len: usize,
    /// Output channels of each stride-2 conv block.
    pub enc_channels: Vec<usize>,
    pub fc_hidden: usize,
    /// Required reference clip length in samples.
    pub clip_samples: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            d_r: 64,
            r_len: 4,
            enc_channels: vec![8, 16, 32, 32],
            fc_hidden: 64,
            clip_samples: 32_000,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "adapter width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.d_r == 0 || self.r_len == 0 || self.fc_hidden == 0 || self.enc_channels.is_empty() {
            return Err(Error::Config("adapter dims, r_len and encoder depth must be positive".into()));
        }
        if self.enc_channels.contains(&0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        Ok(())
    }
}

fn halve(n: usize) -> usize {
    (n + 1) / 2
}

/// Conv stack over the clip's mel, temporal mean/std pooling, two fully
/// connected layers.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    r_len: usize,
    clip_samples: usize,
    dsp: DspConfig,
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AdapterConfig, dsp: &DspConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut frames = dsp.frames_for(cfg.clip_samples);
        let mut bins = dsp.mel_bins;
        let mut c_in = 1;
        let mut convs = Vec::new();
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, c, 3, 2, 1, rng));
            c_in = c;
            frames = halve(frames);
            bins = halve(bins);
        }
        if frames < cfg.r_len {
            return Err(Error::Config(format!(
                "reference encoder leaves {frames} frames, fewer than r_len {}",
                cfg.r_len
            )));
        }
        let pooled = 2 * c_in * bins;
        Ok(Self {
            convs,
            fc1: Linear::new(store, &format!("{name}.fc1"), pooled, cfg.fc_hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.fc_hidden, cfg.d_r, rng),
            r_len: cfg.r_len,
            clip_samples: cfg.clip_samples,
            dsp: *dsp,
        })
    }

    pub fn clip_samples(&self) -> usize {
        self.clip_samples
    }

    /// Log-mel of a reference clip as `[frames, bins]`.
    pub fn clip_mel(&self, clip: &[f64]) -> Result<Tensor> {
        if clip.len() != self.clip_samples {
            return Err(Error::Contract(format!(
                "reference clip has {} samples, expected {}",
                clip.len(),
                self.clip_samples
            )));
        }
        Ok(mel_spectrogram(clip, &self.dsp)?.to_tensor())
    }

    /// `[r_len, d_r]` features of a precomputed clip mel.
    pub fn forward_mel(&self, g: &mut Graph, mel: &Tensor) -> Result<Var> {
        let (frames, bins) = (mel.rows(), mel.cols());
        let x = g.constant(mel.clone().reshape(&[1, frames, bins])?);
        let mut h = x;
        for conv in &self.convs {
            let y = conv.forward(g, h)?;
            h = g.silu(y);
        }
        let pooled = g.temporal_stats_pool(h, self.r_len)?;
        let a = self.fc1.forward(g, pooled)?;
        let a = g.silu(a);
        self.fc2.forward(g, a)
    }

    pub fn forward(&self, g: &mut Graph, clip: &[f64]) -> Result<Var> {
        let mel = self.clip_mel(clip)?;
        self.forward_mel(g, &mel)
    }
}

/// Residual multi-head cross-attention: queries from the text, keys and
/// values from the reference, heads concatenated and added back to `e_t`.
pub fn cross_attend_fuse(g: &mut Graph, e_t: Var, e_r: Var, wq: Var, wk: Var, wv: Var, heads: usize) -> Result<Var> {
    let d = *g.shape(e_t).last().unwrap_or(&0);
    if g.shape(e_t).len() != 2 || g.shape(e_r).len() != 2 {
        return Err(Error::Contract("cross attention expects rank-2 e_t and e_r".into()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!("width {d} not divisible by {heads} heads")));
    }
    let q = g.matmul(e_t, wq)?;
    let k = g.matmul(e_r, wk)?;
    let v = g.matmul(e_r, wv)?;
    if g.shape(q)[1] != d || g.shape(v)[1] != d {
        return Err(Error::Contract(format!(
            "projections give widths {} and {}, text width is {d}",
            g.shape(q)[1],
            g.shape(v)[1]
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax_rows(logits);
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    g.add(cat, e_t)
}

/// Mean over the sequence axis: `[t, d] → [1, d]`.
pub fn mean_pool(g: &mut Graph, x: Var) -> Result<Var> {
    if g.shape(x).first() == Some(&0) {
        return Err(Error::Contract("mean_pool on an empty sequence".into()));
    }
    g.mean_rows(x)
}

/// Full adapter: caption + reference clip → `[1, d]` style embedding.
#[derive(Debug, Clone)]
pub struct Adapter {
    cfg: AdapterConfig,
    vocab: Vocab,
    tokens: ParamId,
    encoder: ReferenceEncoder,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, cfg: &AdapterConfig, dsp: &DspConfig, vocab: Vocab, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let encoder = ReferenceEncoder::new(store, "adapter.ref", cfg, dsp, rng)?;
        let tokens = store.add("adapter.tokens", Tensor::randn(&[vocab.len(), cfg.d], 1.0, rng));
        let std_q = (1.0 / cfg.d as f64).sqrt();
        let std_kv = (1.0 / cfg.d_r as f64).sqrt();
        let wq = store.add("adapter.wq", Tensor::randn(&[cfg.d, cfg.d], std_q, rng));
        let wk = store.add("adapter.wk", Tensor::randn(&[cfg.d_r, cfg.d], std_kv, rng));
        let wv = store.add("adapter.wv", Tensor::randn(&[cfg.d_r, cfg.d], std_kv, rng));
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            tokens,
            encoder,
            wq,
            wk,
            wv,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn encoder(&self) -> &ReferenceEncoder {
        &self.encoder
    }

    pub fn weight_ids(&self) -> (ParamId, ParamId, ParamId) {
        (self.wq, self.wk, self.wv)
    }

    pub fn token_table(&self) -> ParamId {
        self.tokens
    }

    /// `[t_len, d]` rows of the token table.
    pub fn encode_text(&self, g: &mut Graph, caption: &str) -> Result<Var> {
        let ids = self.vocab.ids(caption)?;
        let table = g.param(self.tokens);
        g.gather_rows(table, &ids)
    }

    pub fn encode_reference(&self, g: &mut Graph, clip: &[f64]) -> Result<Var> {
        self.encoder.forward(g, clip)
    }

    pub fn fuse(&self, g: &mut Graph, e_t: Var, e_r: Var) -> Result<Var> {
        let wq = g.param(self.wq);
        let wk = g.param(self.wk);
        let wv = g.param(self.wv);
        cross_attend_fuse(g, e_t, e_r, wq, wk, wv, self.cfg.heads)
    }

    /// Style embedding from a caption and a precomputed reference mel.
    pub fn style_from_mel(&self, g: &mut Graph, caption: &str, ref_mel: &Tensor) -> Result<Var> {
        let e_t = self.encode_text(g, caption)?;
        let e_r = self.encoder.forward_mel(g, ref_mel)?;
        let fused = self.fuse(g, e_t, e_r)?;
        mean_pool(g, fused)
    }

    pub fn style(&self, g: &mut Graph, caption: &str, clip: &[f64]) -> Result<Var> {
        let mel = self.encoder.clip_mel(clip)?;
        self.style_from_mel(g, caption, &mel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use crate::numerics::nn::randomize;

    fn small_cfg() -> AdapterConfig {
        AdapterConfig {
            d: 8,
            heads: 2,
            d_r: 6,
            r_len: 2,
            enc_channels: vec![2, 3],
            fc_hidden: 5,
            clip_samples: 4000,
        }
    }

    fn clip(seed: u64, n: usize) -> Vec<f64> {
        SeededRng::new(seed).normals(n).into_iter().map(|v| 0.3 * v).collect()
    }

    fn build(cfg: &AdapterConfig) -> (ParamStore, Adapter) {
        let mut store = ParamStore::new();
        let vocab = Vocab::from_captions(["a dog barks", "a cat meows"]);
        let a = Adapter::new(&mut store, cfg, &DspConfig::default(), vocab, &mut SeededRng::new(1)).unwrap();
        (store, a)
    }

    #[test]
    fn vocab_and_unknown_tokens() {
        let v = Vocab::from_captions(["A dog barks", "a cat"]);
        assert_eq!(v.id(UNK), 0);
        assert_eq!(v.ids("zebra dog").unwrap()[0], 0);
        assert_ne!(v.id("dog"), 0);
        assert_eq!(Vocab::deserialize(&v.serialize()).unwrap(), v);
        assert!(matches!(v.ids("   "), Err(Error::Input(_))));
    }

    #[test]
    fn text_embedding_is_table_rows() {
        let (store, a) = build(&small_cfg());
        let mut g = Graph::inference(&store);
        let e = a.encode_text(&mut g, "dog barks").unwrap();
        let table = store.value(a.token_table());
        let v = g.value(e);
        assert_eq!(v.shape(), &[2, 8]);
        assert_eq!(v.row(0), table.row(a.vocab().id("dog")));
        assert_eq!(v.row(1), table.row(a.vocab().id("barks")));
    }

    #[test]
    fn scalar_fusion_example() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let one = |g: &mut Graph| g.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let e_t = one(&mut g);
        let e_r = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let (wq, wk, wv) = (one(&mut g), one(&mut g), one(&mut g));
        let out = cross_attend_fuse(&mut g, e_t, e_r, wq, wk, wv, 1).unwrap();
        assert_eq!(g.value(out).data(), &[3.0]);
    }

    #[test]
    fn single_key_and_zero_value_paths() {
        let store = ParamStore::new();
        let mut rng = SeededRng::new(4);
        let mut g = Graph::inference(&store);
        let e_t = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let e_r = g.constant(Tensor::randn(&[1, 5], 1.0, &mut rng));
        let wq = g.constant(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let wk = g.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let wv_t = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let wv = g.constant(wv_t.clone());
        let out = cross_attend_fuse(&mut g, e_t, e_r, wq, wk, wv, 2).unwrap();
        let v = g.matmul(e_r, wv).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let want = g.value(v).at2(0, c) + g.value(e_t).at2(r, c);
                assert!((g.value(out).at2(r, c) - want).abs() < 1e-12);
            }
        }
        let zero = g.constant(Tensor::zeros(&[5, 4]));
        let e_r3 = g.constant(Tensor::randn(&[3, 5], 1.0, &mut rng));
        let out = cross_attend_fuse(&mut g, e_t, e_r3, wq, wk, zero, 2).unwrap();
        assert_eq!(g.value(out), g.value(e_t));
    }

    #[test]
    fn fusion_dimension_mismatch() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let e_t = g.constant(Tensor::zeros(&[2, 4]));
        let e_r = g.constant(Tensor::zeros(&[2, 3]));
        let wq = g.constant(Tensor::zeros(&[4, 4]));
        let wk = g.constant(Tensor::zeros(&[3, 4]));
        let wv = g.constant(Tensor::zeros(&[3, 5]));
        assert!(cross_attend_fuse(&mut g, e_t, e_r, wq, wk, wv, 2).is_err());
        assert!(cross_attend_fuse(&mut g, e_t, e_r, wq, wk, wk, 3).is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let store = ParamStore::new();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap());
        let p = mean_pool(&mut g, x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0]);
        let y = g.constant(Tensor::from_rows(&[vec![3.0, 5.0], vec![1.0, 3.0]]).unwrap());
        let q = mean_pool(&mut g, y).unwrap();
        assert_eq!(g.value(p), g.value(q));
    }

    #[test]
    fn reference_encoder_shape_and_determinism() {
        let cfg = small_cfg();
        let (store, a) = build(&cfg);
        let x = clip(3, 4000);
        let mut g = Graph::inference(&store);
        let e1 = a.encode_reference(&mut g, &x).unwrap();
        let e2 = a.encode_reference(&mut g, &x).unwrap();
        assert_eq!(g.value(e1).shape(), &[2, 6]);
        assert_eq!(g.value(e1), g.value(e2));
        assert!(matches!(a.encode_reference(&mut g, &x[..3999]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_encoder_gives_zero_embedding() {
        let cfg = small_cfg();
        let (mut store, a) = build(&cfg);
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with("adapter.ref")).collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&store);
        let e = a.encode_reference(&mut g, &clip(5, 4000)).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn different_references_change_the_style() {
        let cfg = small_cfg();
        let (store, a) = build(&cfg);
        let mut g = Graph::inference(&store);
        for seed in 0..5 {
            let s1 = a.style(&mut g, "a dog barks", &clip(seed, 4000)).unwrap();
            let s2 = a.style(&mut g, "a dog barks", &clip(seed + 100, 4000)).unwrap();
            assert!(g.value(s1).max_abs_diff(g.value(s2)) > 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SeededRng::new(8);
        let logits = Tensor::randn(&[5, 7], 3.0, &mut rng);
        let p = crate::numerics::softmax_rows(&logits);
        for r in 0..5 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let (mut store, a) = build(&cfg);
        randomize(&mut store, 0.5, &mut SeededRng::new(12));
        let x = clip(9, 4000);
        let target = Tensor::randn(&[1, 8], 1.0, &mut SeededRng::new(13));
        let report = gradcheck::check(&mut store, None, 1e-5, 1, |g| {
            let s = a.style(g, "a dog barks loudly", &x)?;
            let t = g.constant(target.clone());
            g.mse(s, t)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}

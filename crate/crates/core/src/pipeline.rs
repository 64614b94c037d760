//! End-to-end commands: dataset build, staged training, guided generation
//! and evaluation. Every command validates its configuration before
//! touching the filesystem and derives all randomness from the run seed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::adapter::{Adapter, Vocab};
use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::config::{RunConfig, StageConfig};
use crate::dataset::{
    build_dataset, fit_length, load_clips, parse_manifest, resolve_audio_path, sample_reference, BuildReport,
    SampleMode,
};
use crate::diffusion::{sample, training_step, Denoiser, DiffusionExample, NoiseSchedule};
use crate::dsp::{griffin_lim, mel_spectrogram, read_wav, write_wav, MelSpectrogram};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_run, EncoderEmbedder, Embedder, GenerationRecord, MetricsReport, PrecomputedEmbeddings, GENERATION_FILE,
};
use crate::numerics::{Graph, Optimizer, ParamStore, Tensor};
use crate::rng::{derive_seed, SeededRng};

pub const BEST_MARKER: &str = "BEST";
pub const TRAIN_LOG: &str = "train.csv";
pub const VALID_LOG: &str = "valid.csv";
pub const BUILD_REPORT: &str = "build_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Codec,
    Diffusion,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Diffusion => "diffusion",
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Input(format!("{what} not found: {}", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Build the train split (and the validation split when configured).
pub fn cmd_build_dataset(cfg: &RunConfig) -> Result<BuildReport> {
    cfg.validate()?;
    let train = cfg
        .paths
        .train_manifest
        .as_ref()
        .ok_or_else(|| Error::Config("paths.train_manifest is not set".into()))?;
    require_file(train, "train manifest")?;
    if let Some(v) = &cfg.paths.valid_manifest {
        require_file(v, "validation manifest")?;
    }
    let dcfg = cfg.dataset_config();
    let mut report = build_dataset(train, &cfg.dataset_dir(), "train", &dcfg)?;
    if let Some(v) = &cfg.paths.valid_manifest {
        report.merge(build_dataset(v, &cfg.dataset_dir(), "valid", &dcfg)?);
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Dataset(e.to_string()))?;
    write_text(&cfg.dataset_dir().join(BUILD_REPORT), &(json + "\n"))?;
    Ok(report)
}

/// One manifest entry prepared for training.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub caption: String,
    /// Model-length log-mel of the entry audio, `[frames, bins]`.
    pub target_mel: Tensor,
    /// Log-mels of the entry's reference clips.
    pub ref_mels: Vec<Tensor>,
}

/// Model-length log-mel of `audio` (cut or zero-padded).
pub fn target_mel(cfg: &RunConfig, audio: &[f64]) -> Result<Tensor> {
    let audio = fit_length(audio, cfg.model_samples());
    Ok(mel_spectrogram(&audio, &cfg.dsp)?.to_tensor())
}

fn manifest_for(cfg: &RunConfig, split: &str) -> Option<PathBuf> {
    match split {
        "train" => cfg.paths.train_manifest.clone(),
        "valid" => cfg.paths.valid_manifest.clone(),
        _ => None,
    }
}

/// Load a built split: entry audio as targets, indexed clips as references.
pub fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<TrainingItem>> {
    let manifest =
        manifest_for(cfg, split).ok_or_else(|| Error::Config(format!("no manifest configured for split {split}")))?;
    let index = cfg.index_path(split);
    require_file(&index, &format!("{split} clip index (run build-dataset first)"))?;
    let entries = parse_manifest(&manifest)?;
    let mut refs: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for (rec, samples) in load_clips(&index)? {
        let mel = mel_spectrogram(&samples, &cfg.dsp)?.to_tensor();
        refs.entry(rec.source).or_default().push(mel);
    }
    let mut items = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let path = resolve_audio_path(&manifest, &entry.audio_path);
        let audio = match read_wav(&path) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping entry {i}: {e}");
                continue;
            }
        };
        items.push(TrainingItem {
            caption: entry.caption.clone(),
            target_mel: target_mel(cfg, &audio)?,
            ref_mels: refs.remove(&i).unwrap_or_default(),
        });
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!("split {split} has no usable entries")));
    }
    Ok(items)
}

fn load_validation(cfg: &RunConfig, train: &[TrainingItem]) -> Result<Vec<TrainingItem>> {
    if cfg.paths.valid_manifest.is_some() && cfg.index_path("valid").is_file() {
        load_split(cfg, "valid")
    } else {
        log::warn!("no validation split built; selecting checkpoints on the training set");
        Ok(train.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: usize,
    /// Batch loss of the first step, before any update.
    pub first_loss: f64,
    /// Mean batch loss over the last logging interval.
    pub final_loss: f64,
    pub best_checkpoint: PathBuf,
    pub best_valid_loss: f64,
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    if max_norm > 0.0 {
        let n = store.grad_norm();
        if n > max_norm {
            store.scale_grads(max_norm / n);
        }
    }
}

/// Shared loop: `step` returns the batch loss after accumulating gradients;
/// `validate` scores the current weights; `save` writes a checkpoint.
struct Trainer<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    stage_cfg: StageConfig,
}

impl Trainer<'_> {
    fn run(
        &self,
        store: &mut ParamStore,
        mut step: impl FnMut(&mut ParamStore) -> Result<f64>,
        validate: impl Fn(&ParamStore) -> Result<f64>,
        checkpoint: impl Fn(&ParamStore) -> Result<Checkpoint>,
    ) -> Result<TrainSummary> {
        let dir = self.cfg.checkpoint_dir(self.stage.name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut opt = Optimizer::new(self.stage_cfg.optimizer.kind(), self.stage_cfg.lr);
        let mut train_csv = String::from("step,loss,lr\n");
        let mut valid_csv = String::from("step,valid_loss,checkpoint\n");
        let (mut first_loss, mut final_loss) = (f64::NAN, f64::NAN);
        let mut window = Vec::new();
        let mut best: Option<(f64, String)> = None;
        let total = self.stage_cfg.steps;
        for s in 1..=total {
            store.zero_grad();
            let loss = step(store)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("{} loss diverged at step {s}", self.stage.name())));
            }
            clip_gradients(store, self.stage_cfg.grad_clip);
            opt.step(store);
            if s == 1 {
                first_loss = loss;
            }
            window.push(loss);
            if s % self.cfg.train.log_every == 0 || s == total {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                final_loss = mean;
                window.clear();
                train_csv.push_str(&format!("{s},{mean},{}\n", opt.lr()));
                log::info!("{} step {s}/{total}: loss {mean:.6}", self.stage.name());
            }
            if s % self.cfg.train.checkpoint_every == 0 || s == total {
                let name = format!("step_{s:06}.ckpt");
                checkpoint(store)?.save(&dir.join(&name))?;
                let v = validate(store)?;
                valid_csv.push_str(&format!("{s},{v},{name}\n"));
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, name));
                }
            }
        }
        write_text(&dir.join(TRAIN_LOG), &train_csv)?;
        write_text(&dir.join(VALID_LOG), &valid_csv)?;
        let (best_valid_loss, best_name) = best.ok_or_else(|| Error::Config("training needs at least one step".into()))?;
        write_text(&dir.join(BEST_MARKER), &format!("{best_name}\n"))?;
        Ok(TrainSummary {
            stage: self.stage,
            steps: total,
            first_loss,
            final_loss,
            best_checkpoint: dir.join(best_name),
            best_valid_loss,
        })
    }
}

/// Path of the checkpoint the `BEST` marker of `stage` points at.
pub fn best_checkpoint(cfg: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let dir = cfg.checkpoint_dir(stage.name());
    let marker = dir.join(BEST_MARKER);
    let hint = match stage {
        Stage::Codec => "run `train --stage codec` first",
        Stage::Diffusion => "run `train --stage diffusion` first",
    };
    let name = std::fs::read_to_string(&marker)
        .map_err(|_| Error::Input(format!("{} checkpoint not found: {} ({hint})", stage.name(), marker.display())))?;
    let path = dir.join(name.trim());
    require_file(&path, &format!("{} checkpoint", stage.name()))?;
    Ok(path)
}

/// A frozen codec with the factor that maps its posterior means to
/// unit-scale diffusion targets.
pub struct CodecModel {
    pub store: ParamStore,
    pub codec: Codec,
    pub latent_scale: f64,
}

impl CodecModel {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(&best_checkpoint(cfg, Stage::Codec)?)?;
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, &cfg.codec, &mut SeededRng::new(0))?;
        ckpt.restore_into(&mut store)?;
        let latent_scale = ckpt
            .meta("latent_scale")?
            .parse::<f64>()
            .map_err(|e| Error::Checkpoint(format!("latent_scale: {e}")))?;
        Ok(Self {
            store,
            codec,
            latent_scale,
        })
    }

    /// Scaled posterior mean used as the clean diffusion latent.
    pub fn latent(&self, mel: &Tensor) -> Result<Tensor> {
        Ok(self.codec.encode_mu(&self.store, mel)?.scale(self.latent_scale))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.codec.decode_tensor(&self.store, &z.scale(1.0 / self.latent_scale))
    }
}

/// Adapter and denoiser restored from the best diffusion checkpoint.
pub struct DiffusionModel {
    pub store: ParamStore,
    pub adapter: Adapter,
    pub denoiser: Denoiser,
}

impl DiffusionModel {
    fn build(cfg: &RunConfig, vocab: Vocab, rng: &mut SeededRng) -> Result<Self> {
        let mut store = ParamStore::new();
        let adapter = Adapter::new(&mut store, &cfg.adapter, &cfg.dsp, vocab, rng)?;
        let denoiser = Denoiser::new(&mut store, &cfg.denoiser_config(), rng)?;
        Ok(Self {
            store,
            adapter,
            denoiser,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ckpt = Checkpoint::load(&best_checkpoint(cfg, Stage::Diffusion)?)?;
        let vocab = Vocab::deserialize(ckpt.meta("vocab")?)?;
        let mut m = Self::build(cfg, vocab, &mut SeededRng::new(0))?;
        ckpt.restore_into(&mut m.store)?;
        Ok(m)
    }

    /// `[1, d]` style embedding of a caption and a reference clip.
    pub fn style(&self, caption: &str, clip: &[f64]) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let s = self.adapter.style(&mut g, caption, clip)?;
        Ok(g.value(s).clone())
    }
}

fn latent_scale(codec: &Codec, store: &ParamStore, items: &[TrainingItem]) -> Result<f64> {
    let mut all = Vec::new();
    for it in items {
        all.extend_from_slice(codec.encode_mu(store, &it.target_mel)?.data());
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 })
}

fn codec_batch_loss(g: &mut Graph, codec: &Codec, mels: &[&Tensor], rng: &mut SeededRng) -> Result<crate::numerics::Var> {
    let mut losses = Vec::with_capacity(mels.len());
    for m in mels {
        losses.push(codec.loss(g, m, rng)?);
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let cat = g.concat_rows(&losses)?;
    Ok(g.mean(cat))
}

fn train_codec(cfg: &RunConfig) -> Result<TrainSummary> {
    let items = load_split(cfg, "train")?;
    let valid = load_validation(cfg, &items)?;
    let mut store = ParamStore::new();
    let codec = Codec::new(&mut store, &cfg.codec, &mut SeededRng::new(derive_seed(cfg.seed, "codec/init")))?;
    let mut rng = SeededRng::new(derive_seed(cfg.seed, "codec/train"));
    let batch = cfg.train.codec.batch;
    let trainer = Trainer {
        cfg,
        stage: Stage::Codec,
        stage_cfg: cfg.train.codec,
    };
    let step = |store: &mut ParamStore| -> Result<f64> {
        let mels: Vec<&Tensor> = (0..batch).map(|_| &items[rng.index(items.len())].target_mel).collect();
        let (loss, grads) = {
            let mut g = Graph::new(store);
            let l = codec_batch_loss(&mut g, &codec, &mels, &mut rng)?;
            (g.value(l).data()[0], g.backward(l)?)
        };
        store.accumulate(&grads);
        Ok(loss)
    };
    let validate = |store: &ParamStore| -> Result<f64> {
        let mut vr = SeededRng::new(derive_seed(cfg.seed, "codec/valid"));
        let mels: Vec<&Tensor> = valid.iter().map(|v| &v.target_mel).collect();
        let mut g = Graph::inference(store);
        let l = codec_batch_loss(&mut g, &codec, &mels, &mut vr)?;
        Ok(g.value(l).data()[0])
    };
    let checkpoint = |store: &ParamStore| -> Result<Checkpoint> {
        let scale = latent_scale(&codec, store, &items)?;
        Ok(Checkpoint::new(store)
            .with_meta("kind", "codec")
            .with_meta("latent_scale", format!("{scale:e}")))
    };
    trainer.run(&mut store, step, validate, checkpoint)
}

struct DiffusionData {
    z0: Vec<Tensor>,
    items: Vec<TrainingItem>,
}

fn diffusion_data(cfg: &RunConfig, codec: &CodecModel, split: &str, fallback: Option<&DiffusionData>) -> Result<DiffusionData> {
    let items = if split == "valid" {
        match fallback {
            Some(train) if !(cfg.paths.valid_manifest.is_some() && cfg.index_path("valid").is_file()) => {
                log::warn!("no validation split built; selecting checkpoints on the training set");
                return Ok(DiffusionData {
                    z0: train.z0.clone(),
                    items: train.items.clone(),
                });
            }
            _ => load_split(cfg, split)?,
        }
    } else {
        load_split(cfg, split)?
    };
    let items: Vec<TrainingItem> = items.into_iter().filter(|it| !it.ref_mels.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Dataset(format!("split {split} has no entries with reference clips")));
    }
    let z0 = items.iter().map(|it| codec.latent(&it.target_mel)).collect::<Result<_>>()?;
    Ok(DiffusionData { z0, items })
}

fn train_diffusion(cfg: &RunConfig) -> Result<TrainSummary> {
    let codec = CodecModel::load(cfg)?;
    let sched = cfg.schedule()?;
    let train = diffusion_data(cfg, &codec, "train", None)?;
    let valid = diffusion_data(cfg, &codec, "valid", Some(&train))?;
    let vocab = Vocab::from_captions(train.items.iter().map(|it| it.caption.as_str()));
    let mut model = DiffusionModel::build(cfg, vocab, &mut SeededRng::new(derive_seed(cfg.seed, "diffusion/init")))?;
    let (adapter, denoiser) = (model.adapter.clone(), model.denoiser.clone());
    let mut rng = SeededRng::new(derive_seed(cfg.seed, "diffusion/train"));
    let batch = cfg.train.diffusion.batch;
    let p_drop = cfg.train.p_drop;
    let trainer = Trainer {
        cfg,
        stage: Stage::Diffusion,
        stage_cfg: cfg.train.diffusion,
    };
    let step = |store: &mut ParamStore| -> Result<f64> {
        let mut examples = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.index(train.items.len());
            let it = &train.items[i];
            let r = sample_reference(&it.ref_mels, SampleMode::Train, &mut rng)?[0];
            examples.push(DiffusionExample {
                z0: &train.z0[i],
                caption: &it.caption,
                ref_mel: r,
            });
        }
        Ok(training_step(store, &adapter, &denoiser, &sched, &examples, p_drop, &mut rng)?.loss)
    };
    let validate = |store: &ParamStore| -> Result<f64> {
        diffusion_valid_loss(store, &adapter, &denoiser, &sched, &valid, derive_seed(cfg.seed, "diffusion/valid"))
    };
    let vocab_text = adapter.vocab().serialize();
    let checkpoint = |store: &ParamStore| -> Result<Checkpoint> {
        Ok(Checkpoint::new(store)
            .with_meta("kind", "diffusion")
            .with_meta("vocab", vocab_text.clone()))
    };
    trainer.run(&mut model.store, step, validate, checkpoint)
}

/// Conditioned noise-prediction loss with fixed steps and noise, averaged
/// over every (entry, reference) pair.
fn diffusion_valid_loss(
    store: &ParamStore,
    adapter: &Adapter,
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    data: &DiffusionData,
    seed: u64,
) -> Result<f64> {
    let mut rng = SeededRng::new(seed);
    let mut total = 0.0;
    let mut count = 0;
    for (it, z0) in data.items.iter().zip(&data.z0) {
        for r in &it.ref_mels {
            let n = rng.range_inclusive(1, sched.len());
            let eps = Tensor::randn(z0.shape(), 1.0, &mut rng);
            let zn = crate::diffusion::forward_diffuse(z0, n, sched, &eps)?;
            let mut g = Graph::inference(store);
            let style = adapter.style_from_mel(&mut g, &it.caption, r)?;
            let z = g.constant(zn);
            let pred = denoiser.forward(&mut g, z, n, crate::diffusion::StyleCondition::Present(style))?;
            let t = g.constant(eps);
            let l = g.mse(pred, t)?;
            total += g.value(l).data()[0];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage) -> Result<TrainSummary> {
    cfg.validate()?;
    match stage {
        Stage::Codec => train_codec(cfg),
        Stage::Diffusion => {
            best_checkpoint(cfg, Stage::Codec)?;
            train_diffusion(cfg)
        }
    }
}

/// Read a reference clip, cutting or zero-padding it to the adapter's clip
/// length with a warning.
pub fn read_reference(cfg: &RunConfig, path: &Path) -> Result<Vec<f64>> {
    let audio = read_wav(path)?;
    let len = cfg.adapter.clip_samples;
    if audio.len() != len {
        log::warn!(
            "reference {} has {} samples; fitting to {len}",
            path.display(),
            audio.len()
        );
    }
    Ok(fit_length(&audio, len))
}

/// Both frozen models, loaded once for repeated generation.
pub struct Generator {
    pub codec: CodecModel,
    pub model: DiffusionModel,
    pub sched: NoiseSchedule,
}

impl Generator {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            codec: CodecModel::load(cfg)?,
            model: DiffusionModel::load(cfg)?,
            sched: cfg.schedule()?,
        })
    }

    /// Sample a latent and decode it to a model-length mel.
    pub fn sample_mel(&self, cfg: &RunConfig, style: &Tensor, rng: &mut SeededRng) -> Result<Tensor> {
        let z = sample(
            &self.model.store,
            &self.model.denoiser,
            &self.sched,
            style,
            cfg.generate.guidance,
            rng,
        )?;
        self.codec.decode(&z)
    }

    /// Full waveform: sample, decode, Griffin-Lim, pad to the output length.
    pub fn render(&self, cfg: &RunConfig, style: &Tensor, seed: u64) -> Result<Vec<f64>> {
        let mut rng = SeededRng::new(seed);
        let mel = self.sample_mel(cfg, style, &mut rng)?;
        let mel = MelSpectrogram::new(mel.rows(), mel.cols(), mel.into_data(), &cfg.dsp)?;
        let mut gl_rng = rng.child("griffin-lim");
        let audio = griffin_lim(&mel, &cfg.dsp, cfg.generate.griffin_lim_iters, &mut gl_rng)?;
        Ok(fit_length(&audio, cfg.generate.output_samples))
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "reference".into())
}

/// Generate `count` clips for one caption and reference. Files are named
/// `<reference stem>_<index>_<seed>.wav`; the directory's generation file
/// records which reference produced each.
pub fn cmd_generate(cfg: &RunConfig, caption: &str, reference: &Path, count: usize, out_dir: Option<&Path>) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Input("--count must be at least 1".into()));
    }
    if caption.split_whitespace().next().is_none() {
        return Err(Error::Input("caption is empty".into()));
    }
    let clip = read_reference(cfg, reference)?;
    let generator = Generator::load(cfg)?;
    let style = generator.model.style(caption, &clip)?;
    let dir = out_dir.map_or_else(|| cfg.generated_dir(), Path::to_path_buf);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let stem = file_stem(reference);
    let mut records = read_records(&dir)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let seed = derive_seed(cfg.seed, &format!("generate/{caption}/{stem}/{i}"));
        let audio = generator.render(cfg, &style, seed)?;
        let file = format!("{stem}_{i:03}_{seed:016x}.wav");
        let path = dir.join(&file);
        write_wav(&path, &audio)?;
        records.insert(
            file.clone(),
            GenerationRecord {
                file,
                caption: caption.to_string(),
                reference: reference.to_string_lossy().into_owned(),
                seed,
                index: i,
            },
        );
        written.push(path);
    }
    write_records(&dir, &records)?;
    Ok(written)
}

fn read_records(dir: &Path) -> Result<BTreeMap<String, GenerationRecord>> {
    let path = dir.join(GENERATION_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: GenerationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.insert(r.file.clone(), r);
    }
    Ok(out)
}

fn write_records(dir: &Path, records: &BTreeMap<String, GenerationRecord>) -> Result<()> {
    let mut buf = Vec::new();
    for r in records.values() {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Input(e.to_string()))?;
        buf.push(b'\n');
    }
    let path = dir.join(GENERATION_FILE);
    std::fs::File::create(&path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(&path, e))
}

/// Score generated audio against a clip index and write the JSON report.
/// The embedder is the trained reference encoder, precomputed embeddings
/// when `eval.embeddings` is set, or a seed-initialized encoder when no
/// diffusion checkpoint exists yet.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    generated_dir: Option<&Path>,
    reference_index: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let gen_dir = generated_dir.map_or_else(|| cfg.generated_dir(), Path::to_path_buf);
    let index = reference_index.map_or_else(|| cfg.index_path("train"), Path::to_path_buf);
    if !gen_dir.is_dir() {
        return Err(Error::Input(format!("generated directory not found: {}", gen_dir.display())));
    }
    require_file(&index, "reference index")?;
    if let Some(p) = &cfg.eval.embeddings {
        require_file(p, "precomputed embeddings")?;
    }

    let precomputed;
    let model;
    let embedder: Box<dyn Embedder + '_> = if let Some(p) = &cfg.eval.embeddings {
        precomputed = PrecomputedEmbeddings::load(p)?;
        Box::new(precomputed.clone())
    } else {
        model = match DiffusionModel::load(cfg) {
            Ok(m) => m,
            Err(Error::Input(msg)) => {
                log::warn!("{msg}; embedding with a seed-initialized reference encoder");
                DiffusionModel::build(cfg, Vocab::from_captions([]), &mut SeededRng::new(derive_seed(cfg.seed, "eval/encoder")))?
            }
            Err(e) => return Err(e),
        };
        Box::new(EncoderEmbedder {
            store: &model.store,
            encoder: model.adapter.encoder(),
            ste: cfg.ste(),
        })
    };
    let report = evaluate_run(&gen_dir, &index, &cfg.eval_config(), embedder.as_ref())?;
    report.write(&report_path.map_or_else(|| cfg.report_path(), Path::to_path_buf))?;
    Ok(report)
}

//! Run configuration: a flat text file of `section.key = value` lines.
//! Blank lines and lines starting with `#` are ignored, unknown keys are
//! errors, and relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapter::AdapterConfig;
use crate::codec::CodecConfig;
use crate::dataset::{DatasetConfig, SegmentConfig, SteConfig};
use crate::diffusion::{DenoiserConfig, NoiseSchedule};
use crate::dsp::{DspConfig, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::numerics::OptimizerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    /// Root of every artifact a run writes.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiserSection {
    pub c1: usize,
    pub c2: usize,
    pub t_dim: usize,
    pub mod_hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adam => OptimizerKind::adam(),
        }
    }
}

impl FromStr for OptimizerChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub optimizer: OptimizerChoice,
    /// Rescale gradients whose global norm exceeds this; 0 disables.
    pub grad_clip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub codec: StageConfig,
    pub diffusion: StageConfig,
    pub p_drop: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub guidance: f64,
    pub griffin_lim_iters: usize,
    pub output_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub hop_s: f64,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub dsp: DspConfig,
    pub dataset: DatasetConfig,
    pub codec: CodecConfig,
    pub adapter: AdapterConfig,
    pub denoiser: DenoiserSection,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |steps, lr| StageConfig {
            steps,
            lr,
            batch: 8,
            optimizer: OptimizerChoice::Sgd,
            grad_clip: 0.0,
        };
        Self {
            seed: 0,
            paths: PathsConfig {
                train_manifest: None,
                valid_manifest: None,
                out_dir: PathBuf::from("run"),
            },
            dsp: DspConfig::default(),
            dataset: DatasetConfig::default(),
            codec: CodecConfig::default(),
            adapter: AdapterConfig::default(),
            denoiser: DenoiserSection {
                c1: 16,
                c2: 32,
                t_dim: 32,
                mod_hidden: 64,
            },
            schedule: ScheduleSection {
                steps: 200,
                beta_start: 1e-4,
                beta_end: 0.02,
            },
            train: TrainConfig {
                codec: stage(2000, 1e-2),
                diffusion: stage(2000, 1e-2),
                p_drop: 0.1,
                log_every: 10,
                checkpoint_every: 500,
            },
            generate: GenerateConfig {
                guidance: 3.0,
                griffin_lim_iters: 32,
                output_samples: 163_840,
            },
            eval: EvalSection {
                hop_s: 0.5,
                embeddings: None,
            },
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("bad value `{value}` for {key}: {e}"))
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse_str(&text, base, path)
    }

    /// Parse `text`, resolving relative paths against `base`. `source` names
    /// the file in error messages.
    pub fn parse_str(text: &str, base: &Path, source: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut out_dir_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "paths.out_dir" {
                out_dir_set = true;
            }
            cfg.set(key, value, base).map_err(err)?;
        }
        if !out_dir_set {
            cfg.paths.out_dir = base.join(&cfg.paths.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        let path = |v: &str| base.join(v);
        match key {
            "run.seed" => self.seed = parse_value(key, v)?,
            "paths.train_manifest" => self.paths.train_manifest = Some(path(v)),
            "paths.valid_manifest" => self.paths.valid_manifest = Some(path(v)),
            "paths.out_dir" => self.paths.out_dir = path(v),
            "dsp.fft_size" => self.dsp.fft_size = parse_value(key, v)?,
            "dsp.hop" => self.dsp.hop = parse_value(key, v)?,
            "dsp.mel_bins" => {
                self.dsp.mel_bins = parse_value(key, v)?;
                self.codec.bins = self.dsp.mel_bins;
            }
            "dsp.f_min" => self.dsp.f_min = parse_value(key, v)?,
            "dsp.f_max" => self.dsp.f_max = parse_value(key, v)?,
            "dataset.ste_threshold" => self.dataset.ste.threshold = parse_value(key, v)?,
            "dataset.ste_frame" => self.dataset.ste.frame = parse_value(key, v)?,
            "dataset.ste_hop" => self.dataset.ste.hop = parse_value(key, v)?,
            "dataset.min_remainder_s" => {
                let s: f64 = parse_value(key, v)?;
                self.dataset.segment.min_remainder_samples = (s * SAMPLE_RATE as f64).round() as usize;
            }
            "codec.frames" => self.codec.frames = parse_value(key, v)?,
            "codec.latent_channels" => self.codec.latent_channels = parse_value(key, v)?,
            "codec.c1" => self.codec.c1 = parse_value(key, v)?,
            "codec.c2" => self.codec.c2 = parse_value(key, v)?,
            "codec.beta_kl" => self.codec.beta_kl = parse_value(key, v)?,
            "adapter.d" => self.adapter.d = parse_value(key, v)?,
            "adapter.heads" => self.adapter.heads = parse_value(key, v)?,
            "adapter.d_r" => self.adapter.d_r = parse_value(key, v)?,
            "adapter.r_len" => self.adapter.r_len = parse_value(key, v)?,
            "adapter.enc_channels" => self.adapter.enc_channels = parse_list(key, v)?,
            "adapter.fc_hidden" => self.adapter.fc_hidden = parse_value(key, v)?,
            "denoiser.c1" => self.denoiser.c1 = parse_value(key, v)?,
            "denoiser.c2" => self.denoiser.c2 = parse_value(key, v)?,
            "denoiser.t_dim" => self.denoiser.t_dim = parse_value(key, v)?,
            "denoiser.mod_hidden" => self.denoiser.mod_hidden = parse_value(key, v)?,
            "schedule.steps" => self.schedule.steps = parse_value(key, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse_value(key, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse_value(key, v)?,
            "train.p_drop" => self.train.p_drop = parse_value(key, v)?,
            "train.log_every" => self.train.log_every = parse_value(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_value(key, v)?,
            "generate.guidance" => self.generate.guidance = parse_value(key, v)?,
            "generate.griffin_lim_iters" => self.generate.griffin_lim_iters = parse_value(key, v)?,
            "generate.output_seconds" => {
                let s: f64 = parse_value(key, v)?;
                self.generate.output_samples = (s * SAMPLE_RATE as f64).round() as usize;
            }
            "eval.hop_s" => self.eval.hop_s = parse_value(key, v)?,
            "eval.embeddings" => self.eval.embeddings = Some(path(v)),
            _ => {
                let stage = if let Some(k) = key.strip_prefix("train.codec.") {
                    Some((&mut self.train.codec, k))
                } else {
                    key.strip_prefix("train.diffusion.").map(|k| (&mut self.train.diffusion, k))
                };
                match stage {
                    Some((s, "steps")) => s.steps = parse_value(key, v)?,
                    Some((s, "lr")) => s.lr = parse_value(key, v)?,
                    Some((s, "batch")) => s.batch = parse_value(key, v)?,
                    Some((s, "optimizer")) => s.optimizer = v.parse()?,
                    Some((s, "grad_clip")) => s.grad_clip = parse_value(key, v)?,
                    _ => return Err(format!("unknown key `{key}`")),
                }
            }
        }
        Ok(())
    }

    /// Check every bound before any command has side effects.
    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.codec.validate()?;
        self.adapter.validate()?;
        self.denoiser_config().validate()?;
        self.schedule()?;
        if self.dsp.mel_bins != self.codec.bins {
            return Err(Error::Config("codec bins must equal dsp.mel_bins".into()));
        }
        if !(self.dataset.ste.threshold >= 0.0) || self.dataset.ste.frame == 0 || self.dataset.ste.hop == 0 {
            return Err(Error::Config("dataset STE threshold must be >= 0 with positive frame and hop".into()));
        }
        for (name, s) in [("codec", &self.train.codec), ("diffusion", &self.train.diffusion)] {
            if s.batch == 0 || !(s.lr > 0.0) || !(s.grad_clip >= 0.0) {
                return Err(Error::Config(format!(
                    "train.{name}: batch and lr must be positive, grad_clip >= 0"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.train.p_drop) {
            return Err(Error::Config(format!("train.p_drop must lie in [0, 1], got {}", self.train.p_drop)));
        }
        if self.train.log_every == 0 || self.train.checkpoint_every == 0 {
            return Err(Error::Config("train.log_every and train.checkpoint_every must be positive".into()));
        }
        if !(self.generate.guidance >= 0.0) {
            return Err(Error::Config("generate.guidance must be >= 0".into()));
        }
        if self.generate.griffin_lim_iters == 0 {
            return Err(Error::Config("generate.griffin_lim_iters must be positive".into()));
        }
        if self.generate.output_samples < self.model_samples() {
            return Err(Error::Config(format!(
                "generate.output_seconds is shorter than the {}-sample model clip",
                self.model_samples()
            )));
        }
        if !(self.eval.hop_s > 0.0) {
            return Err(Error::Config("eval.hop_s must be positive".into()));
        }
        Ok(())
    }

    /// Audio samples spanned by one model mel.
    pub fn model_samples(&self) -> usize {
        self.dsp.samples_for(self.codec.frames)
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            segment: SegmentConfig {
                sample_rate: self.dsp.sample_rate,
                ..self.dataset.segment
            },
            ste: self.dataset.ste,
        }
    }

    pub fn ste(&self) -> SteConfig {
        self.dataset.ste
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent: self.codec.latent_shape(),
            c1: self.denoiser.c1,
            c2: self.denoiser.c2,
            style_dim: self.adapter.d,
            t_dim: self.denoiser.t_dim,
            mod_hidden: self.denoiser.mod_hidden,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            dsp: self.dsp,
            hop_s: self.eval.hop_s,
            clip_samples: self.adapter.clip_samples,
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.paths.out_dir.join("dataset")
    }

    pub fn index_path(&self, split: &str) -> PathBuf {
        self.dataset_dir().join(split).join(crate::dataset::INDEX_FILE)
    }

    pub fn checkpoint_dir(&self, stage: &str) -> PathBuf {
        self.paths.out_dir.join("checkpoints").join(stage)
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.paths.out_dir.join("generated")
    }

    pub fn report_path(&self) -> PathBuf {
        self.paths.out_dir.join("metrics.json")
    }
}

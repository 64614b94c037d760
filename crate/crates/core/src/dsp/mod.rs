//! Audio ↔ mel-spectrogram transforms, short-time energy and Griffin-Lim
//! phase reconstruction.

mod energy;
mod griffin_lim;
mod mel;
mod stft;
pub mod wav;

pub use energy::{mean_short_time_energy, short_time_energy};
pub use griffin_lim::{griffin_lim, griffin_lim_traced, MelInverter};
pub use mel::{hz_to_mel, mel_cosine, mel_filter_centers, mel_filterbank, mel_spectrogram, mel_to_hz};
pub use stft::{hann_window, istft, stft, stft_magnitude, Spectrum};
pub use wav::{quantize, read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// The only sample rate the toolkit reads, writes or models.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            fft_size: 1024,
            hop: 160,
            mel_bins: 64,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 || self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size must be even and >= 2 (got {}) with a positive sample rate",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!(
                "hop must be in 1..={} (got {})",
                self.fft_size, self.hop
            )));
        }
        if self.mel_bins == 0 {
            return Err(Error::Config("mel_bins must be >= 1".into()));
        }
        if !(0.0 <= self.f_min && self.f_min < self.f_max && self.f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max <= {nyquist} Hz (got f_min={}, f_max={})",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for `len` samples (no centering).
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }

    /// Samples produced by overlap-adding `frames` frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.fft_size
        }
    }
}

/// Log-compressed mel magnitudes, one row per time frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
    pub sample_rate: u32,
    pub hop: usize,
}

impl MelSpectrogram {
    pub fn new(frames: usize, bins: usize, data: Vec<f64>, cfg: &DspConfig) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::Contract(format!(
                "mel of {frames}x{bins} needs {} values, got {}",
                frames * bins,
                data.len()
            )));
        }
        if data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Contract("mel magnitudes must be non-negative".into()));
        }
        Ok(Self {
            frames,
            bins,
            data,
            sample_rate: cfg.sample_rate,
            hop: cfg.hop,
        })
    }

    pub fn zeros(frames: usize, bins: usize, cfg: &DspConfig) -> Self {
        Self {
            frames,
            bins,
            data: vec![0.0; frames * bins],
            sample_rate: cfg.sample_rate,
            hop: cfg.hop,
        }
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }

    /// `[frames, bins]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.bins], self.data.clone()).expect("consistent mel shape")
    }
}

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::DspConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided complex STFT: `frames × (fft_size/2 + 1)`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrum {
    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }
}

pub fn stft(audio: &[f64], cfg: &DspConfig) -> Result<Spectrum> {
    cfg.validate()?;
    if audio.len() < cfg.fft_size {
        return Err(Error::Input(format!(
            "audio of {} samples is shorter than one {}-sample frame",
            audio.len(),
            cfg.fft_size
        )));
    }
    let n = cfg.fft_size;
    let bins = cfg.n_freqs();
    let frames = cfg.frames_for(audio.len());
    let window = hann_window(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut data = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(audio[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrum { frames, bins, data })
}

/// Hann-windowed magnitude spectrogram, `[frames, fft_size/2 + 1]`.
pub fn stft_magnitude(audio: &[f64], cfg: &DspConfig) -> Result<Tensor> {
    let spec = stft(audio, cfg)?;
    let mags = spec.data.iter().map(|c| c.norm()).collect();
    Tensor::new(vec![spec.frames, spec.bins], mags)
}

/// Least-squares inverse STFT (windowed overlap-add normalized by the summed
/// squared window). Output length is `(frames - 1)·hop + fft_size`.
pub fn istft(spec: &Spectrum, cfg: &DspConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if spec.bins != cfg.n_freqs() {
        return Err(Error::Contract(format!(
            "spectrum has {} bins, config expects {}",
            spec.bins,
            cfg.n_freqs()
        )));
    }
    let n = cfg.fft_size;
    let len = cfg.samples_for(spec.frames);
    let window = hann_window(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for f in 0..spec.frames {
        let half = spec.frame(f);
        buf[..spec.bins].copy_from_slice(half);
        for k in spec.bins..n {
            buf[k] = half[n - k].conj();
        }
        // DC and Nyquist of a real signal are real
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        ifft.process(&mut buf);
        let start = f * cfg.hop;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (o, w) in out.iter_mut().zip(&norm) {
        if *w > 1e-10 {
            *o /= w;
        } else {
            *o = 0.0;
        }
    }
    Ok(out)
}

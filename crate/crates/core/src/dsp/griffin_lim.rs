use std::f64::consts::PI;

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;

use super::{istft, mel_filterbank, stft, DspConfig, MelSpectrogram, Spectrum};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Multiplicative non-negative least-squares sweeps applied after the
/// pseudo-inverse estimate.
const NNLS_SWEEPS: usize = 200;

/// Maps log-mel frames back to non-negative linear magnitudes: the clamped
/// pseudo-inverse of the filterbank, refined by non-negative least squares.
#[derive(Debug, Clone)]
pub struct MelInverter {
    cfg: DspConfig,
    pinv: DMatrix<f64>,
    /// Per filter: first nonzero bin and its weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelInverter {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        let fb = mel_filterbank(cfg)?;
        let m = DMatrix::from_row_slice(fb.rows(), fb.cols(), fb.data());
        let pinv = m
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::Numeric(format!("filterbank pseudo-inverse: {e}")))?;
        let filters = (0..fb.rows())
            .map(|r| {
                let row = fb.row(r);
                let lo = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let hi = row.iter().rposition(|&w| w > 0.0).map_or(lo, |i| i + 1);
                (lo, row[lo..hi].to_vec())
            })
            .collect();
        Ok(Self { cfg: *cfg, pinv, filters })
    }

    /// `[frames × n_freqs]` magnitudes, row-major.
    pub fn magnitudes(&self, mel: &MelSpectrogram) -> Result<Vec<f64>> {
        if mel.bins != self.cfg.mel_bins {
            return Err(Error::Contract(format!(
                "mel has {} bins, config expects {}",
                mel.bins, self.cfg.mel_bins
            )));
        }
        let n_freqs = self.cfg.n_freqs();
        let mut out = vec![0.0; mel.frames * n_freqs];
        for t in 0..mel.frames {
            let lin: Vec<f64> = mel.frame(t).iter().map(|v| v.exp_m1().max(0.0)).collect();
            let v = &self.pinv * nalgebra::DVector::from_vec(lin.clone());
            let row = &mut out[t * n_freqs..(t + 1) * n_freqs];
            for (o, x) in row.iter_mut().zip(v.iter()) {
                *o = x.max(0.0);
            }
            self.refine(row, &lin);
        }
        Ok(out)
    }

    fn refine(&self, m: &mut [f64], target: &[f64]) {
        const EPS: f64 = 1e-12;
        let scale = target.iter().fold(0.0f64, |a, &b| a.max(b));
        if scale <= 0.0 {
            m.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        // Bins covered by some filter must start strictly positive or the
        // multiplicative update can never move them.
        let mut numer = vec![0.0; m.len()];
        for ((lo, w), &y) in self.filters.iter().zip(target) {
            for (k, &wk) in w.iter().enumerate() {
                numer[lo + k] += wk * y;
            }
        }
        for (v, &n) in m.iter_mut().zip(&numer) {
            if n > 0.0 {
                *v = v.max(scale * 1e-6);
            } else {
                *v = 0.0;
            }
        }
        let mut pred = vec![0.0; target.len()];
        let mut denom = vec![0.0; m.len()];
        for _ in 0..NNLS_SWEEPS {
            for ((lo, w), p) in self.filters.iter().zip(pred.iter_mut()) {
                *p = w.iter().zip(&m[*lo..]).map(|(a, b)| a * b).sum();
            }
            denom.iter_mut().for_each(|d| *d = 0.0);
            for ((lo, w), &p) in self.filters.iter().zip(&pred) {
                for (k, &wk) in w.iter().enumerate() {
                    denom[lo + k] += wk * p;
                }
            }
            for ((v, &n), &d) in m.iter_mut().zip(&numer).zip(&denom) {
                if n > 0.0 {
                    *v *= n / (d + EPS);
                }
            }
        }
    }
}

/// Griffin-Lim reconstruction from a log-mel spectrogram, starting from
/// seeded random phase. Output has `(frames - 1)·hop + fft_size` samples.
pub fn griffin_lim(mel: &MelSpectrogram, cfg: &DspConfig, iters: usize, rng: &mut SeededRng) -> Result<Vec<f64>> {
    griffin_lim_traced(mel, cfg, iters, rng).map(|(x, _)| x)
}

/// As [`griffin_lim`], also returning the inconsistency
/// `‖STFT(ISTFT(X_k)) − X_k‖` before each phase update.
pub fn griffin_lim_traced(
    mel: &MelSpectrogram,
    cfg: &DspConfig,
    iters: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::Config("griffin-lim needs at least one iteration".into()));
    }
    if mel.frames == 0 {
        return Err(Error::Input("griffin-lim on an empty mel".into()));
    }
    let inverter = MelInverter::new(cfg)?;
    let mags = inverter.magnitudes(mel)?;
    let bins = cfg.n_freqs();
    let mut spec = Spectrum {
        frames: mel.frames,
        bins,
        data: mags
            .iter()
            .map(|&m| Complex64::from_polar(m, 2.0 * PI * rng.uniform()))
            .collect(),
    };
    let mut trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let x = istft(&spec, cfg)?;
        let proj = stft(&x, cfg)?;
        let err = proj
            .data
            .iter()
            .zip(&spec.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        trace.push(err);
        for ((dst, p), &m) in spec.data.iter_mut().zip(&proj.data).zip(&mags) {
            let n = p.norm();
            *dst = if n > 0.0 { p * (m / n) } else { Complex64::new(m, 0.0) };
        }
    }
    Ok((istft(&spec, cfg)?, trace))
}

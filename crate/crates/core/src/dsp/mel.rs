use super::{stft_magnitude, DspConfig, MelSpectrogram};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `mel_bins + 2` edge frequencies equally spaced on the mel scale.
fn mel_edges(cfg: &DspConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    let n = cfg.mel_bins + 1;
    (0..=n).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64)).collect()
}

/// Peak frequency of each triangular filter.
pub fn mel_filter_centers(cfg: &DspConfig) -> Vec<f64> {
    let e = mel_edges(cfg);
    e[1..e.len() - 1].to_vec()
}

/// Triangular mel filters, `[mel_bins, fft_size/2 + 1]`, unnormalized
/// (peak weight 1).
pub fn mel_filterbank(cfg: &DspConfig) -> Result<Tensor> {
    cfg.validate()?;
    let edges = mel_edges(cfg);
    let bins = cfg.n_freqs();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut w = vec![0.0; cfg.mel_bins * bins];
    for m in 0..cfg.mel_bins {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if !(l < c && c < r) {
            return Err(Error::Config(format!("degenerate mel filter {m} ({l}, {c}, {r}) Hz")));
        }
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let v = if f >= l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f <= r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            w[m * bins + k] = v.max(0.0);
        }
    }
    let fb = Tensor::new(vec![cfg.mel_bins, bins], w)?;
    if (0..cfg.mel_bins).any(|m| fb.row(m).iter().sum::<f64>() <= 0.0) {
        return Err(Error::Config(format!(
            "mel filterbank has empty filters: {} filters over {}..{} Hz is too fine for fft_size {}",
            cfg.mel_bins, cfg.f_min, cfg.f_max, cfg.fft_size
        )));
    }
    Ok(fb)
}

/// STFT magnitude → mel filterbank → `log1p`.
pub fn mel_spectrogram(audio: &[f64], cfg: &DspConfig) -> Result<MelSpectrogram> {
    let mag = stft_magnitude(audio, cfg)?;
    let fb = mel_filterbank(cfg)?;
    Ok(mel_from_magnitude(&mag, &fb, cfg))
}

pub(crate) fn mel_from_magnitude(mag: &Tensor, fb: &Tensor, cfg: &DspConfig) -> MelSpectrogram {
    let frames = mag.rows();
    let (m_bins, f_bins) = (fb.rows(), fb.cols());
    let mut data = vec![0.0; frames * m_bins];
    for t in 0..frames {
        let row = mag.row(t);
        for m in 0..m_bins {
            let filt = &fb.data()[m * f_bins..(m + 1) * f_bins];
            let s: f64 = filt.iter().zip(row).map(|(a, b)| a * b).sum();
            data[t * m_bins + m] = s.ln_1p();
        }
    }
    MelSpectrogram {
        frames,
        bins: m_bins,
        data,
        sample_rate: cfg.sample_rate,
        hop: cfg.hop,
    }
}

/// Cosine similarity of two flattened mels of equal shape.
pub fn mel_cosine(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.frames != b.frames || a.bins != b.bins {
        return Err(Error::dim("mel_cosine", &[a.frames, a.bins], &[b.frames, b.bins]));
    }
    let dot: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
    let na = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("cosine with an all-zero mel".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(freq: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()).collect()
    }

    #[test]
    fn filterbank_rows_positive_and_centers_increasing() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        assert_eq!(fb.shape(), &[64, 513]);
        assert!(fb.data().iter().all(|&v| v >= 0.0));
        assert!((0..64).all(|m| fb.row(m).iter().sum::<f64>() > 0.0));
        let c = mel_filter_centers(&cfg);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn every_interior_bin_is_covered() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank(&cfg).unwrap();
        let bin_hz = 16000.0 / 1024.0;
        for k in 0..513 {
            let f = k as f64 * bin_hz;
            if f > cfg.f_min && f < cfg.f_max {
                assert!((0..64).any(|m| fb.at2(m, k) > 0.0), "bin {k} ({f} Hz) uncovered");
            }
        }
    }

    #[test]
    fn toy_bank_matches_hand_table() {
        // sr 8000, fft 16, 4 filters over 0..4000 Hz; edges at
        // 0, 324.467, 799.333, 1494.310, 2511.426, 4000 Hz.
        let cfg = DspConfig {
            sample_rate: 8000,
            fft_size: 16,
            hop: 4,
            mel_bins: 4,
            f_min: 0.0,
            f_max: 4000.0,
        };
        let expect: [[f64; 9]; 4] = [
            [0.0, 0.6303523003227919, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.36964769967720806, 0.711260371365959, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.28873962863404107, 0.9944054955979644, 0.5028195190660727, 0.01123354253418108, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.005594504402035617, 0.49718048093392725, 0.9887664574658189, 0.6717837856038901, 0.33589189280194487, 0.0],
        ];
        let fb = mel_filterbank(&cfg).unwrap();
        for m in 0..4 {
            for k in 0..9 {
                assert!((fb.at2(m, k) - expect[m][k]).abs() < 1e-12, "({m},{k})");
            }
        }
    }

    #[test]
    fn degenerate_range_is_config_error() {
        let cfg = DspConfig {
            f_min: 4000.0,
            f_max: 4000.0,
            ..DspConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
        let cfg = DspConfig {
            mel_bins: 400,
            ..DspConfig::default()
        };
        assert!(matches!(mel_filterbank(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_audio_gives_zero_mel_and_is_deterministic() {
        let cfg = DspConfig::default();
        let m = mel_spectrogram(&vec![0.0; 3000], &cfg).unwrap();
        assert!(m.data.iter().all(|&v| v == 0.0));
        let x = tone(523.0, 5000, 0.4);
        let a = mel_spectrogram(&x, &cfg).unwrap();
        let b = mel_spectrogram(&x, &cfg).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(a.frames, (5000 - 1024) / 160 + 1);
    }

    #[test]
    fn tone_at_filter_center_peaks_in_that_filter() {
        let cfg = DspConfig::default();
        let centers = mel_filter_centers(&cfg);
        for m in [12, 30, 45] {
            let m_s = mel_spectrogram(&tone(centers[m], 6000, 0.5), &cfg).unwrap();
            for t in 0..m_s.frames {
                let f = m_s.frame(t);
                let arg = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
                assert_eq!(arg, m, "frame {t}");
            }
        }
    }

    #[test]
    fn mel_cosine_properties() {
        let cfg = DspConfig::default();
        let a = mel_spectrogram(&tone(440.0, 4000, 0.5), &cfg).unwrap();
        assert!((mel_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v *= 2.0);
        assert!((mel_cosine(&a, &b).unwrap() - 1.0).abs() < 1e-12);

        let mut left = MelSpectrogram::zeros(2, 2, &cfg);
        left.data = vec![1.0, 0.0, 2.0, 0.0];
        let mut right = MelSpectrogram::zeros(2, 2, &cfg);
        right.data = vec![0.0, 3.0, 0.0, 1.0];
        assert_eq!(mel_cosine(&left, &right).unwrap(), 0.0);

        let z = MelSpectrogram::zeros(2, 2, &cfg);
        assert!(matches!(mel_cosine(&z, &left), Err(Error::UndefinedSimilarity(_))));
    }
}

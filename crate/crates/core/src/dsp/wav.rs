//! 16-bit mono PCM WAV at 16 kHz.

use std::path::Path;

use super::SAMPLE_RATE;
use crate::error::{Error, Result};

const FULL_SCALE: f64 = 32768.0;

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Samples in `[-1, 1)`. Anything but 16 kHz mono 16-bit PCM is rejected.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(wav_err(
            path,
            format!("sample rate {} Hz, expected {SAMPLE_RATE} Hz (resample first)", spec.sample_rate),
        ));
    }
    if spec.channels != 1 {
        return Err(wav_err(path, format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!("{}-bit {:?} samples, expected 16-bit PCM", spec.bits_per_sample, spec.sample_format),
        ));
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE).map_err(|e| wav_err(path, e)))
        .collect()
}

/// Quantize a sample the way [`write_wav`] does.
pub fn quantize(x: f64) -> i16 {
    (x * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Write samples, clipping to full scale. Samples already on the 16-bit grid
/// read back exactly.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        w.write_sample(quantize(s)).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

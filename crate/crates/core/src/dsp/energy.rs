use crate::error::{Error, Result};

/// Per-frame mean of squared samples. Audio shorter than one frame is a
/// single frame over what is there.
pub fn short_time_energy(audio: &[f64], frame: usize, hop: usize) -> Result<Vec<f64>> {
    if audio.is_empty() {
        return Err(Error::Input("short-time energy of empty audio".into()));
    }
    if frame == 0 || hop == 0 {
        return Err(Error::Config("STE frame and hop must be >= 1".into()));
    }
    if audio.len() <= frame {
        let e = audio.iter().map(|x| x * x).sum::<f64>() / audio.len() as f64;
        return Ok(vec![e]);
    }
    let frames = (audio.len() - frame) / hop + 1;
    Ok((0..frames)
        .map(|f| {
            let w = &audio[f * hop..f * hop + frame];
            w.iter().map(|x| x * x).sum::<f64>() / frame as f64
        })
        .collect())
}

/// Mean of the per-frame energies.
pub fn mean_short_time_energy(audio: &[f64], frame: usize, hop: usize) -> Result<f64> {
    let e = short_time_energy(audio, frame, hop)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert!(short_time_energy(&[0.0; 1000], 400, 160).unwrap().iter().all(|&e| e == 0.0));
        assert_eq!(short_time_energy(&[1.0, -1.0, 1.0, -1.0], 4, 4).unwrap(), vec![1.0]);
        assert!(matches!(short_time_energy(&[], 4, 4), Err(Error::Input(_))));
    }

    #[test]
    fn quadratic_in_amplitude() {
        let x: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = short_time_energy(&x, 400, 160).unwrap();
        let b = short_time_energy(&x2, 400, 160).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((4.0 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_sine_has_half_energy() {
        let x: Vec<f64> = (0..32000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
            .collect();
        let e = mean_short_time_energy(&x, 400, 160).unwrap();
        assert!((e - 0.5).abs() < 0.01, "{e}");
    }
}

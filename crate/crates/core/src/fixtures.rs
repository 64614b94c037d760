//! Synthetic corpora used by tests, the acceptance suite and the shipped
//! example configs. Every signal is generated procedurally from fixed seeds.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::{EventAnnotation, ManifestEntry};
use crate::dsp::{write_wav, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn sr() -> f64 {
    SAMPLE_RATE as f64
}

fn tone(freq: f64, amp: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / sr()).sin()).collect()
}

fn secs(s: f64) -> usize {
    (s * sr()).round() as usize
}

fn event(label: &str, start_s: f64, end_s: f64) -> EventAnnotation {
    EventAnnotation {
        label: label.into(),
        start_s,
        end_s,
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).map_err(|e| Error::Dataset(e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Three-entry corpus exercising every segmentation rule:
///
/// * `e0.wav` (5 s, tone): `dog` over [0, 2.3] and [3.0, 4.5]
/// * `e1.wav` (3 s): `cat` tone over [0.5, 1.5], `quiet` over silent [2, 3]
/// * `e2.wav` (4 s, tone): `siren` over [0, 4], `car` over [3.5, 6.0]
///   (past the end), `bird` over [5, 6] (entirely outside)
///
/// Returns the manifest path.
pub fn write_toy_corpus(dir: &Path) -> Result<PathBuf> {
    write_wav(&dir.join("e0.wav"), &tone(440.0, 0.5, secs(5.0)))?;
    let mut e1 = vec![0.0; secs(3.0)];
    e1[secs(0.5)..secs(1.5)].copy_from_slice(&tone(660.0, 0.5, secs(1.0)));
    write_wav(&dir.join("e1.wav"), &e1)?;
    write_wav(&dir.join("e2.wav"), &tone(880.0, 0.4, secs(4.0)))?;

    let entries = vec![
        ManifestEntry {
            audio_path: "e0.wav".into(),
            caption: "a dog barks twice".into(),
            events: vec![event("dog", 0.0, 2.3), event("dog", 3.0, 4.5)],
        },
        ManifestEntry {
            audio_path: "e1.wav".into(),
            caption: "a cat meows then silence".into(),
            events: vec![event("cat", 0.5, 1.5), event("quiet", 2.0, 3.0)],
        },
        ManifestEntry {
            audio_path: "e2.wav".into(),
            caption: "a siren wails as a car passes".into(),
            events: vec![event("siren", 0.0, 4.0), event("car", 3.5, 6.0), event("bird", 5.0, 6.0)],
        },
    ];
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Labels of the overfit corpus, in entry order (two variants each).
pub const OVERFIT_LABELS: [&str; 4] = ["beep", "whistle", "hum", "hiss"];

/// One 2 s event signal for `label`; `variant` shifts its parameters.
pub fn event_signal(label: &str, variant: usize, seed: u64) -> Vec<f64> {
    let n = secs(2.0);
    let v = variant as f64;
    match label {
        "beep" => {
            let f = 1000.0 + 250.0 * v;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr();
                    let gate = if (t * 4.0).fract() < 0.5 { 1.0 } else { 0.0 };
                    0.5 * gate * (2.0 * PI * f * t).sin()
                })
                .collect()
        }
        "whistle" => {
            let (f0, f1) = (1500.0 + 400.0 * v, 2500.0 + 400.0 * v);
            let dur = n as f64 / sr();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr();
                    let phase = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t / dur);
                    0.4 * phase.sin()
                })
                .collect()
        }
        "hum" => {
            let f = 110.0 + 30.0 * v;
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr();
                    (1..=4).map(|h| 0.3 / h as f64 * (2.0 * PI * f * h as f64 * t).sin()).sum()
                })
                .collect()
        }
        "hiss" => {
            let mut rng = SeededRng::new(seed ^ 0x5151 ^ variant as u64);
            let white = rng.normals(n + 8);
            let taps = 1 + 3 * variant;
            (0..n)
                .map(|i| 0.15 * white[i..i + taps].iter().sum::<f64>() / (taps as f64).sqrt())
                .collect()
        }
        other => panic!("unknown fixture label {other}"),
    }
}

/// Paths of a written overfit corpus.
#[derive(Debug, Clone)]
pub struct OverfitCorpus {
    pub train_manifest: PathBuf,
    pub valid_manifest: PathBuf,
}

/// Eight 2 s training entries (four labels × two variants), each a single
/// event spanning the whole file, plus a four-entry validation split using
/// a third variant.
pub fn write_overfit_corpus(dir: &Path) -> Result<OverfitCorpus> {
    let captions = |label: &str, v: usize| -> String {
        let base = match label {
            "beep" => "an electronic beep pulses",
            "whistle" => "a rising whistle sounds",
            "hum" => "a low electrical hum drones",
            "hiss" => "steam hisses steadily",
            _ => unreachable!(),
        };
        match v {
            0 => format!("{base} softly"),
            1 => format!("{base} loudly"),
            _ => format!("{base} nearby"),
        }
    };
    let write_split = |name: &str, variants: &[usize]| -> Result<PathBuf> {
        let mut entries = Vec::new();
        for label in OVERFIT_LABELS {
            for &v in variants {
                let file = format!("{name}/{label}_{v}.wav");
                write_wav(&dir.join(&file), &event_signal(label, v, 7))?;
                entries.push(ManifestEntry {
                    audio_path: file,
                    caption: captions(label, v),
                    events: vec![event(label, 0.0, 2.0)],
                });
            }
        }
        let manifest = dir.join(format!("{name}.jsonl"));
        write_manifest(&manifest, &entries)?;
        Ok(manifest)
    };
    Ok(OverfitCorpus {
        train_manifest: write_split("train", &[0, 1])?,
        valid_manifest: write_split("valid", &[2])?,
    })
}

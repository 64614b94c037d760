//! Hand-traced expectations for the three-entry toy corpus.

use std::collections::BTreeMap;
use std::path::Path;

use styleprompt::dataset::{build_dataset, load_clips, DatasetConfig, Span, INDEX_FILE};
use styleprompt::fixtures::write_toy_corpus;

fn span(source: usize, start: usize, end: usize) -> Span {
    Span { source, start, end }
}

/// Expected `(label, source, provenance)` of every kept clip, in index order.
///
/// * e0 dog [0, 2.3]: one full window, the 0.3 s remainder is discarded.
/// * e0 dog [3.0, 4.5]: 24000 samples padded by the first 8000 samples of
///   the only other dog segment.
/// * e1 cat [0.5, 1.5]: no donor, loops on itself.
/// * e1 quiet [2, 3]: silent, loops on itself, dropped by the energy filter.
/// * e2 siren [0, 4]: two full windows.
/// * e2 car [3.5, 6.0]: clamped to [3.5, 4.0], loops on itself four times.
/// * e2 bird [5, 6]: outside the audio, skipped.
pub fn expected_clips() -> Vec<(&'static str, usize, Vec<Span>)> {
    vec![
        ("dog", 0, vec![span(0, 0, 32000)]),
        ("dog", 0, vec![span(0, 48000, 72000), span(0, 0, 8000)]),
        ("cat", 1, vec![span(1, 8000, 24000), span(1, 8000, 24000)]),
        ("siren", 2, vec![span(2, 0, 32000)]),
        ("siren", 2, vec![span(2, 32000, 64000)]),
        ("car", 2, vec![span(2, 56000, 64000); 4]),
    ]
}

/// Build the toy corpus twice under `dir` and compare against the hand trace.
pub fn check(dir: &Path) -> Result<(), String> {
    let manifest = write_toy_corpus(&dir.join("corpus")).map_err(|e| e.to_string())?;
    let cfg = DatasetConfig {
        seed: 11,
        ..Default::default()
    };
    let out = dir.join("out");
    let report = build_dataset(&manifest, &out, "train", &cfg).map_err(|e| e.to_string())?;
    let split = &report.splits["train"];

    let mut problems = Vec::new();
    let mut expect = |what: &str, got: usize, want: usize| {
        if got != want {
            problems.push(format!("{what}: got {got}, want {want}"));
        }
    };
    expect("entries", split.entries, 3);
    expect("segments", split.segments, 7);
    expect("clips before filter", split.clips_before_filter, 7);
    expect("kept", split.kept, 6);
    expect("dropped", split.dropped, 1);
    expect("padded", split.padded, 4);
    expect("self-looped", split.self_looped, 3);
    expect("clamped", split.clamped_events, 1);
    expect("skipped", split.skipped_events, 1);
    expect("remainders discarded", split.remainders_discarded, 1);
    let hist: BTreeMap<String, usize> = [("car", 1), ("cat", 1), ("dog", 2), ("siren", 2)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    if split.labels != hist {
        problems.push(format!("label histogram {:?}", split.labels));
    }

    let index = out.join("train").join(INDEX_FILE);
    let clips = load_clips(&index).map_err(|e| e.to_string())?;
    let want = expected_clips();
    if clips.len() != want.len() {
        problems.push(format!("index has {} clips, want {}", clips.len(), want.len()));
    }
    for (i, ((rec, samples), (label, source, prov))) in clips.iter().zip(&want).enumerate() {
        if samples.len() != 32000 {
            problems.push(format!("clip {i} has {} samples", samples.len()));
        }
        if rec.label != *label || rec.source != *source || rec.provenance != *prov {
            problems.push(format!("clip {i}: {rec:?}"));
        }
    }

    let first = std::fs::read(&index).map_err(|e| e.to_string())?;
    let wavs: Vec<Vec<u8>> = clips
        .iter()
        .map(|(r, _)| std::fs::read(out.join("train").join(&r.path)).unwrap_or_default())
        .collect();
    build_dataset(&manifest, &out, "train", &cfg).map_err(|e| e.to_string())?;
    if std::fs::read(&index).map_err(|e| e.to_string())? != first {
        problems.push("index differs on rebuild".into());
    }
    for ((r, _), bytes) in clips.iter().zip(&wavs) {
        if std::fs::read(out.join("train").join(&r.path)).unwrap_or_default() != *bytes {
            problems.push(format!("{} differs on rebuild", r.path));
        }
    }

    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

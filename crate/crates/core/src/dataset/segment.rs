use super::ManifestEntry;

/// Where a run of samples came from: `[start, end)` of manifest entry
/// `source`'s audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Span {
    pub source: usize,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSegment {
    pub label: String,
    pub samples: Vec<f64>,
    pub span: Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentConfig {
    pub sample_rate: u32,
    /// Target clip length (2 s).
    pub clip_samples: usize,
    /// Shortest remainder of a long event worth keeping.
    pub min_remainder_samples: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            sample_rate: crate::dsp::SAMPLE_RATE,
            clip_samples: 32_000,
            min_remainder_samples: 8_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SegmentStats {
    pub clamped: usize,
    pub skipped: usize,
    pub remainders_discarded: usize,
}

/// Cut each annotated event out of `audio`. Long events become consecutive
/// full-length windows plus a remainder if it is long enough; short events
/// are emitted whole, to be padded later.
pub fn segment_events(
    entry: &ManifestEntry,
    entry_index: usize,
    audio: &[f64],
    cfg: &SegmentConfig,
) -> (Vec<RawSegment>, SegmentStats) {
    let sr = cfg.sample_rate as f64;
    let mut out = Vec::new();
    let mut stats = SegmentStats::default();
    for ev in &entry.events {
        let raw_start = (ev.start_s * sr).round() as usize;
        let raw_end = (ev.end_s * sr).round() as usize;
        let start = raw_start.min(audio.len());
        let end = raw_end.min(audio.len());
        if end <= start {
            log::warn!(
                "entry {entry_index}: event {} [{}, {}] s lies outside {:.3} s of audio; skipped",
                ev.label,
                ev.start_s,
                ev.end_s,
                audio.len() as f64 / sr
            );
            stats.skipped += 1;
            continue;
        }
        if end != raw_end {
            log::warn!("entry {entry_index}: event {} clamped to the audio end", ev.label);
            stats.clamped += 1;
        }
        let mut emit = |s: usize, e: usize| {
            out.push(RawSegment {
                label: ev.label.clone(),
                samples: audio[s..e].to_vec(),
                span: Span {
                    source: entry_index,
                    start: s,
                    end: e,
                },
            })
        };
        let dur = end - start;
        if dur < cfg.clip_samples {
            emit(start, end);
            continue;
        }
        let full = dur / cfg.clip_samples;
        for k in 0..full {
            let s = start + k * cfg.clip_samples;
            emit(s, s + cfg.clip_samples);
        }
        let rem_start = start + full * cfg.clip_samples;
        if end - rem_start >= cfg.min_remainder_samples {
            emit(rem_start, end);
        } else if end > rem_start {
            stats.remainders_discarded += 1;
        }
    }
    (out, stats)
}

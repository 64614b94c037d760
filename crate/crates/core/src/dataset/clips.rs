use serde::{Deserialize, Serialize};

use super::{RawSegment, Span};
use crate::dsp::mean_short_time_energy;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// A fixed-length event clip ready for use as a style reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceClip {
    pub label: String,
    pub samples: Vec<f64>,
    pub source_entry: usize,
    /// Spans concatenated to form `samples`, in order.
    pub provenance: Vec<Span>,
}

impl ReferenceClip {
    pub fn is_padded(&self) -> bool {
        self.provenance.len() > 1
    }
}

/// Pad a short segment to `clip_samples` by appending material from
/// same-label donors chosen with `rng`. With no donors, the segment loops on
/// itself. Segments already at full length are returned unchanged.
pub fn pad_by_concat(short: &RawSegment, pool: &[&RawSegment], clip_samples: usize, rng: &mut SeededRng) -> ReferenceClip {
    let mut samples = short.samples.clone();
    let mut provenance = vec![short.span];
    samples.truncate(clip_samples);
    provenance[0].end = provenance[0].start + samples.len();
    while samples.len() < clip_samples && !short.samples.is_empty() {
        let donor = if pool.is_empty() {
            short
        } else {
            pool[rng.index(pool.len())]
        };
        if donor.samples.is_empty() {
            continue;
        }
        let take = donor.samples.len().min(clip_samples - samples.len());
        samples.extend_from_slice(&donor.samples[..take]);
        provenance.push(Span {
            source: donor.span.source,
            start: donor.span.start,
            end: donor.span.start + take,
        });
    }
    ReferenceClip {
        label: short.label.clone(),
        samples,
        source_entry: short.span.source,
        provenance,
    }
}

/// Cut `samples` to `len`, or zero-pad it.
pub fn fit_length(samples: &[f64], len: usize) -> Vec<f64> {
    let mut out = samples[..samples.len().min(len)].to_vec();
    out.resize(len, 0.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteConfig {
    pub threshold: f64,
    pub frame: usize,
    pub hop: usize,
}

impl Default for SteConfig {
    fn default() -> Self {
        Self {
            threshold: 1e-4,
            frame: 400,
            hop: 160,
        }
    }
}

/// Partition clips by mean short-time energy: kept iff energy ≥ threshold.
pub fn filter_by_ste(clips: Vec<ReferenceClip>, cfg: &SteConfig) -> Result<(Vec<ReferenceClip>, Vec<ReferenceClip>)> {
    if !(cfg.threshold >= 0.0) {
        return Err(Error::Config(format!("STE threshold must be >= 0, got {}", cfg.threshold)));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for clip in clips {
        if mean_short_time_energy(&clip.samples, cfg.frame, cfg.hop)? >= cfg.threshold {
            kept.push(clip);
        } else {
            dropped.push(clip);
        }
    }
    Ok((kept, dropped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Train,
    Inference,
}

/// Training draws one clip uniformly; inference uses every clip in order.
pub fn sample_reference<'a, T>(clips: &'a [T], mode: SampleMode, rng: &mut SeededRng) -> Result<Vec<&'a T>> {
    if clips.is_empty() {
        return Err(Error::Dataset("no reference clips to sample from".into()));
    }
    Ok(match mode {
        SampleMode::Train => vec![&clips[rng.index(clips.len())]],
        SampleMode::Inference => clips.iter().collect(),
    })
}

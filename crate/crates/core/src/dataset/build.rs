use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    filter_by_ste, pad_by_concat, parse_manifest, segment_events, RawSegment, ReferenceClip, SegmentConfig, Span,
    SteConfig,
};
use crate::dsp::{read_wav, write_wav};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};

pub const INDEX_FILE: &str = "index.jsonl";
pub const CLIPS_DIR: &str = "clips";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub segment: SegmentConfig,
    pub ste: SteConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            segment: SegmentConfig::default(),
            ste: SteConfig::default(),
        }
    }
}

/// One line of the clip index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    /// Relative to the directory holding the index file.
    pub path: String,
    pub label: String,
    pub source: usize,
    pub provenance: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryError {
    pub entry: usize,
    pub audio_path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub entries: usize,
    pub entry_errors: Vec<EntryError>,
    pub segments: usize,
    pub padded: usize,
    pub self_looped: usize,
    pub clips_before_filter: usize,
    pub kept: usize,
    pub dropped: usize,
    pub clamped_events: usize,
    pub skipped_events: usize,
    pub remainders_discarded: usize,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub splits: BTreeMap<String, SplitReport>,
}

impl BuildReport {
    pub fn merge(&mut self, other: BuildReport) {
        self.splits.extend(other.splits);
    }

    pub fn total_kept(&self) -> usize {
        self.splits.values().map(|s| s.kept).sum()
    }
}

/// Resolve a manifest `audio_path` against the manifest's directory.
pub fn resolve_audio_path(manifest: &Path, audio_path: &str) -> PathBuf {
    let p = Path::new(audio_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

/// Segment, pad and filter every entry of one split's manifest, writing
/// `out_dir/<split>/clips/*.wav` and `out_dir/<split>/index.jsonl`.
pub fn build_dataset(manifest: &Path, out_dir: &Path, split: &str, cfg: &DatasetConfig) -> Result<BuildReport> {
    let entries = parse_manifest(manifest)?;
    let mut report = SplitReport {
        entries: entries.len(),
        ..Default::default()
    };

    let mut per_entry: Vec<Vec<RawSegment>> = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let path = resolve_audio_path(manifest, &entry.audio_path);
        let audio = match read_wav(&path) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("entry {i}: {e}");
                report.entry_errors.push(EntryError {
                    entry: i,
                    audio_path: entry.audio_path.clone(),
                    message: e.to_string(),
                });
                per_entry.push(Vec::new());
                continue;
            }
        };
        let (segs, stats) = segment_events(entry, i, &audio, &cfg.segment);
        report.clamped_events += stats.clamped;
        report.skipped_events += stats.skipped;
        report.remainders_discarded += stats.remainders_discarded;
        report.segments += segs.len();
        per_entry.push(segs);
    }

    let all: Vec<&RawSegment> = per_entry.iter().flatten().collect();
    let mut clips: Vec<ReferenceClip> = Vec::new();
    let mut k = 0;
    for (i, segs) in per_entry.iter().enumerate() {
        let mut rng = SeededRng::new(derive_seed(cfg.seed, &format!("dataset/{split}/entry/{i}")));
        for seg in segs {
            let me = k;
            k += 1;
            if seg.samples.len() >= cfg.segment.clip_samples {
                clips.push(pad_by_concat(seg, &[], cfg.segment.clip_samples, &mut rng));
                continue;
            }
            let pool: Vec<&RawSegment> = all
                .iter()
                .enumerate()
                .filter(|&(j, s)| j != me && s.label == seg.label)
                .map(|(_, s)| *s)
                .collect();
            report.padded += 1;
            if pool.is_empty() {
                report.self_looped += 1;
            }
            clips.push(pad_by_concat(seg, &pool, cfg.segment.clip_samples, &mut rng));
        }
    }
    report.clips_before_filter = clips.len();

    let (kept, dropped) = filter_by_ste(clips, &cfg.ste)?;
    report.kept = kept.len();
    report.dropped = dropped.len();
    if kept.is_empty() {
        return Err(Error::Dataset(format!(
            "split {split}: zero clips survived segmentation and filtering ({} entries)",
            entries.len()
        )));
    }

    let split_dir = out_dir.join(split);
    let clips_dir = split_dir.join(CLIPS_DIR);
    if split_dir.join(INDEX_FILE).exists() && clips_dir.is_dir() {
        std::fs::remove_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    }
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;

    let mut per_source: BTreeMap<usize, usize> = BTreeMap::new();
    let mut index = Vec::with_capacity(kept.len());
    for clip in &kept {
        let n = per_source.entry(clip.source_entry).or_default();
        let name = format!(
            "{split}_{:05}_{:02}_{}.wav",
            clip.source_entry,
            *n,
            sanitize(&clip.label)
        );
        *n += 1;
        write_wav(&clips_dir.join(&name), &clip.samples)?;
        *report.labels.entry(clip.label.clone()).or_default() += 1;
        index.push(IndexRecord {
            path: format!("{CLIPS_DIR}/{name}"),
            label: clip.label.clone(),
            source: clip.source_entry,
            provenance: clip.provenance.clone(),
        });
    }
    write_index(&split_dir.join(INDEX_FILE), &index)?;

    let mut out = BuildReport::default();
    out.splits.insert(split.to_string(), report);
    Ok(out)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

pub fn write_index(path: &Path, records: &[IndexRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::Dataset(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<IndexRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Load every indexed clip as `(record, samples)`.
pub fn load_clips(index_path: &Path) -> Result<Vec<(IndexRecord, Vec<f64>)>> {
    let dir = index_path.parent().unwrap_or(Path::new(""));
    read_index(index_path)?
        .into_iter()
        .map(|r| {
            let samples = read_wav(&dir.join(&r.path))?;
            Ok((r, samples))
        })
        .collect()
}

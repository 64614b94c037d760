//! Event-clip corpus construction: manifest parsing, segmentation by event
//! timestamps, same-label padding, energy filtering and reference sampling.

mod build;
mod clips;
mod manifest;
mod segment;

pub use build::{
    build_dataset, load_clips, read_index, resolve_audio_path, write_index, BuildReport, DatasetConfig, EntryError,
    IndexRecord, SplitReport, CLIPS_DIR, INDEX_FILE,
};
pub use clips::{filter_by_ste, fit_length, pad_by_concat, sample_reference, ReferenceClip, SampleMode, SteConfig};
pub use manifest::{parse_manifest, parse_manifest_str, EventAnnotation, ManifestEntry};
pub use segment::{segment_events, RawSegment, SegmentConfig, SegmentStats, Span};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{embedding_cosine, frechet_distance, kl_pairs, mel_sim_max, softmax};
use crate::adapter::ReferenceEncoder;
use crate::dataset::{fit_length, load_clips, SteConfig};
use crate::dsp::{mean_short_time_energy, read_wav, DspConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor};

/// File written next to generated audio, one [`GenerationRecord`] per line.
pub const GENERATION_FILE: &str = "generation.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// File name inside the generation directory.
    pub file: String,
    pub caption: String,
    /// Reference clip path as given to the generator.
    pub reference: String,
    pub seed: u64,
    pub index: usize,
}

/// Maps audio to a fixed-width embedding. `key` names the audio (generated
/// file name or reference index path) for embedders backed by a lookup.
pub trait Embedder {
    fn embed(&self, key: &str, audio: &[f64]) -> Result<Vec<f64>>;
}

/// Frozen reference encoder, averaged over non-silent clip-length windows.
pub struct EncoderEmbedder<'a> {
    pub store: &'a ParamStore,
    pub encoder: &'a ReferenceEncoder,
    pub ste: SteConfig,
}

impl Embedder for EncoderEmbedder<'_> {
    fn embed(&self, _key: &str, audio: &[f64]) -> Result<Vec<f64>> {
        let len = self.encoder.clip_samples();
        let audio = if audio.len() < len { fit_length(audio, len) } else { audio.to_vec() };
        let windows: Vec<&[f64]> = audio.chunks_exact(len).collect();
        let mut loud = Vec::new();
        for w in &windows {
            if mean_short_time_energy(w, self.ste.frame, self.ste.hop)? >= self.ste.threshold {
                loud.push(*w);
            }
        }
        let chosen = if loud.is_empty() { windows } else { loud };
        let mut g = Graph::inference(self.store);
        let mut acc: Vec<f64> = Vec::new();
        for w in &chosen {
            let e = self.encoder.forward(&mut g, w)?;
            let pooled = g.mean_rows(e)?;
            let v = g.value(pooled).data();
            if acc.is_empty() {
                acc = vec![0.0; v.len()];
            }
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= chosen.len() as f64);
        Ok(acc)
    }
}

/// Embeddings loaded from JSON lines of `{"path": ..., "vector": [...]}`.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings {
    map: BTreeMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct EmbeddingLine {
    path: String,
    vector: Vec<f64>,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: EmbeddingLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            map.insert(l.path, l.vector);
        }
        Ok(Self { map })
    }

    pub fn insert(&mut self, key: impl Into<String>, v: Vec<f64>) {
        self.map.insert(key.into(), v);
    }
}

impl Embedder for PrecomputedEmbeddings {
    fn embed(&self, key: &str, _audio: &[f64]) -> Result<Vec<f64>> {
        self.map
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no precomputed embedding for {key}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub dsp: DspConfig,
    pub hop_s: f64,
    /// Reference clip length; references are cut or zero-padded to it.
    pub clip_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dsp: DspConfig::default(),
            hop_s: 0.5,
            clip_samples: 32_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileMetrics {
    pub file: String,
    pub reference: Option<String>,
    pub mel_sim: Option<f64>,
    pub kl: Option<f64>,
    pub ref_cos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileError {
    pub file: String,
    pub message: String,
}

/// Undefined quantities (too few samples, no pairs) are `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fd: Option<f64>,
    pub kl: Option<f64>,
    pub mel_sim_mean: Option<f64>,
    pub mel_sim_max: Option<f64>,
    pub same_ref_cos_mean: Option<f64>,
    pub cross_ref_cos_mean: Option<f64>,
    pub gen_ref_cos_mean: Option<f64>,
    pub generated: usize,
    pub references: usize,
    pub per_file: Vec<FileMetrics>,
    pub errors: Vec<FileError>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some("wav") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn read_generation_records(dir: &Path) -> Result<BTreeMap<String, GenerationRecord>> {
    let path = dir.join(GENERATION_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: GenerationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.insert(r.file.clone(), r);
    }
    Ok(out)
}

struct Reference {
    key: String,
    /// Report name: the index path, or the file name of an external reference.
    display: String,
    samples: Vec<f64>,
    embedding: Vec<f64>,
}

/// Score every WAV in `generated_dir` against the clips of
/// `reference_index`. Generated files are paired with references through
/// the generation file when present, otherwise by identical file name.
pub fn evaluate_run(generated_dir: &Path, reference_index: &Path, cfg: &EvalConfig, embedder: &dyn Embedder) -> Result<MetricsReport> {
    let clips = load_clips(reference_index)?;
    if clips.is_empty() {
        return Err(Error::Input(format!("{} lists no reference clips", reference_index.display())));
    }
    let gen_files = list_wavs(generated_dir)?;
    if gen_files.is_empty() {
        return Err(Error::Input(format!("{} contains no WAV files", generated_dir.display())));
    }
    let records = read_generation_records(generated_dir)?;
    let index_dir = reference_index.parent().unwrap_or(Path::new(""));

    let mut refs: Vec<Reference> = Vec::with_capacity(clips.len());
    for (rec, samples) in clips {
        let embedding = embedder.embed(&rec.path, &samples)?;
        refs.push(Reference {
            display: rec.path.clone(),
            key: rec.path,
            samples,
            embedding,
        });
    }
    let by_name: BTreeMap<String, usize> = refs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| Path::new(&r.key).file_name().map(|n| (n.to_string_lossy().into_owned(), i)))
        .collect();
    let canonical: BTreeMap<PathBuf, usize> = refs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| index_dir.join(&r.key).canonicalize().ok().map(|p| (p, i)))
        .collect();
    let mut external: BTreeMap<String, Reference> = BTreeMap::new();

    let mut errors = Vec::new();
    let mut per_file = Vec::new();
    let mut gen_embs: Vec<Vec<f64>> = Vec::new();
    // (reference key, embedding) of each paired generated file
    let mut paired: Vec<(String, Vec<f64>)> = Vec::new();
    let (mut p_list, mut q_list) = (Vec::new(), Vec::new());
    let (mut sims, mut gen_ref_cos) = (Vec::new(), Vec::new());

    for path in &gen_files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let audio = match read_wav(path) {
            Ok(a) => a,
            Err(e) => {
                errors.push(FileError {
                    file: name,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let emb = match embedder.embed(&name, &audio) {
            Ok(e) => e,
            Err(e) => {
                errors.push(FileError {
                    file: name,
                    message: e.to_string(),
                });
                continue;
            }
        };

        let reference: Option<&Reference> = match records.get(&name) {
            Some(r) => {
                let p = Path::new(&r.reference);
                match p.canonicalize().ok().and_then(|c| canonical.get(&c)) {
                    Some(&i) => Some(&refs[i]),
                    None if external.contains_key(&r.reference) => external.get(&r.reference),
                    None => match read_wav(p) {
                        Ok(samples) => {
                            let samples = fit_length(&samples, cfg.clip_samples);
                            let embedding = embedder.embed(&r.reference, &samples)?;
                            let display = p
                                .file_name()
                                .map_or_else(|| r.reference.clone(), |n| n.to_string_lossy().into_owned());
                            let entry = external.entry(r.reference.clone()).or_insert(Reference {
                                key: r.reference.clone(),
                                display,
                                samples,
                                embedding,
                            });
                            Some(&*entry)
                        }
                        Err(e) => {
                            errors.push(FileError {
                                file: name.clone(),
                                message: format!("reference {}: {e}", r.reference),
                            });
                            None
                        }
                    },
                }
            }
            None => by_name.get(&name).map(|&i| &refs[i]),
        };

        let mut fm = FileMetrics {
            file: name.clone(),
            reference: None,
            mel_sim: None,
            kl: None,
            ref_cos: None,
        };
        if let Some(r) = reference {
            fm.reference = Some(r.display.clone());
            match mel_sim_max(&audio, &r.samples, &cfg.dsp, cfg.hop_s) {
                Ok(s) => {
                    fm.mel_sim = Some(s);
                    sims.push(s);
                }
                Err(e) => errors.push(FileError {
                    file: name.clone(),
                    message: format!("mel similarity: {e}"),
                }),
            }
            let p = softmax(&r.embedding);
            let q = softmax(&emb);
            let kl = kl_pairs(std::slice::from_ref(&p), std::slice::from_ref(&q))?;
            fm.kl = Some(kl);
            p_list.push(p);
            q_list.push(q);
            if let Ok(c) = embedding_cosine(&emb, &r.embedding) {
                fm.ref_cos = Some(c);
                gen_ref_cos.push(c);
            }
            paired.push((r.key.clone(), emb.clone()));
        }
        per_file.push(fm);
        gen_embs.push(emb);
    }
    if gen_embs.is_empty() {
        return Err(Error::Input(format!(
            "no generated file in {} could be scored",
            generated_dir.display()
        )));
    }

    let fd = if gen_embs.len() >= 2 && refs.len() >= 2 {
        let to_tensor = |rows: &[Vec<f64>]| Tensor::from_rows(rows);
        let ref_rows: Vec<Vec<f64>> = refs.iter().map(|r| r.embedding.clone()).collect();
        Some(frechet_distance(&to_tensor(&gen_embs)?, &to_tensor(&ref_rows)?)?)
    } else {
        None
    };
    let kl = if p_list.is_empty() { None } else { Some(kl_pairs(&p_list, &q_list)?) };

    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for i in 0..paired.len() {
        for j in i + 1..paired.len() {
            if let Ok(c) = embedding_cosine(&paired[i].1, &paired[j].1) {
                if paired[i].0 == paired[j].0 {
                    same.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
    }

    per_file.sort_by(|a, b| a.file.cmp(&b.file));
    Ok(MetricsReport {
        fd,
        kl,
        mel_sim_mean: mean(&sims),
        mel_sim_max: sims.iter().copied().reduce(f64::max),
        same_ref_cos_mean: mean(&same),
        cross_ref_cos_mean: mean(&cross),
        gen_ref_cos_mean: mean(&gen_ref_cos),
        generated: gen_embs.len(),
        references: refs.len(),
        per_file,
        errors,
    })
}

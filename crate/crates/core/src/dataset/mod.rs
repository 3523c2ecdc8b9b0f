//! Corpus ingestion, model-assigned labels, class balancing and synthetic
//! corpus generation.

pub mod programs;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{CnnModel, LabeledImage};
use crate::error::{Error, Result};
use crate::imaging::classify_transform;
use crate::scalar::Scalar;
use crate::wasm::parse_module;

pub use synth::synth_corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceLabel {
    Benign,
    Malicious,
}

impl SourceLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceLabel::Benign => "benign",
            SourceLabel::Malicious => "malicious",
        }
    }

    pub fn class(self) -> u8 {
        u8::from(self == SourceLabel::Malicious)
    }
}

impl fmt::Display for SourceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(SourceLabel::Benign),
            "malicious" => Ok(SourceLabel::Malicious),
            other => Err(Error::InvalidConfig(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub bytes: Vec<u8>,
    pub path: Option<PathBuf>,
    pub source_label: Option<SourceLabel>,
    /// Score assigned by a labelling model.
    pub model_label: Option<f64>,
    /// `1` iff `model_label >= 0.5`.
    pub assigned_class: Option<u8>,
    pub provenance: String,
}

impl Sample {
    pub fn from_bytes(id: impl Into<String>, bytes: Vec<u8>, label: Option<SourceLabel>) -> Self {
        Self {
            id: id.into(),
            bytes,
            path: None,
            source_label: label,
            model_label: None,
            assigned_class: None,
            provenance: String::new(),
        }
    }

    /// The model-assigned class if present, else the source label.
    pub fn class(&self) -> Option<u8> {
        self.assigned_class.or(self.source_label.map(SourceLabel::class))
    }
}

/// A file that could not be ingested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipRecord {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub samples: Vec<Sample>,
    pub skipped: Vec<SkipRecord>,
}

/// One manifest line: `{"path": ..., "label": ..., "source": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default)]
    pub label: Option<SourceLabel>,
    #[serde(default)]
    pub source: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn label_from_path(path: &Path) -> Option<SourceLabel> {
    path.components()
        .rev()
        .skip(1)
        .find_map(|c| c.as_os_str().to_str().and_then(|s| s.parse().ok()))
}

fn load_sample(id: String, path: &Path, label: Option<SourceLabel>, provenance: String) -> std::result::Result<Sample, String> {
    let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
    parse_module(&bytes).map_err(|e| e.to_string())?;
    Ok(Sample {
        id,
        bytes,
        path: Some(path.to_path_buf()),
        source_label: label,
        model_label: None,
        assigned_class: None,
        provenance,
    })
}

/// Reads every file below `dir`. Files that do not parse as modules are
/// reported in `skipped`. Labels come from a `benign` or `malicious`
/// directory on the path. Samples are ordered by id (the relative path).
pub fn ingest_dir(dir: &Path) -> Result<Ingested> {
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(&path, e.into())
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    let loaded: Vec<_> = files
        .par_iter()
        .map(|path| {
            let rel = path.strip_prefix(dir).unwrap_or(path);
            let id = rel.to_string_lossy().replace('\\', "/");
            load_sample(id, path, label_from_path(rel), format!("dir:{}", dir.display()))
        })
        .collect();
    collect_ingested(files, loaded)
}

/// Reads the files listed in a JSON-lines manifest; relative paths resolve
/// against the manifest's directory.
pub fn ingest_manifest(manifest: &Path) -> Result<Ingested> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut files = Vec::with_capacity(entries.len());
    for e in &entries {
        let id = e.path.to_string_lossy().into_owned();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let path = base.join(&e.path);
        if !path.exists() {
            return Err(Error::io(&path, std::io::ErrorKind::NotFound.into()));
        }
        files.push(path);
    }
    let loaded: Vec<_> = entries
        .par_iter()
        .zip(&files)
        .map(|(e, path)| {
            let id = e.path.to_string_lossy().into_owned();
            load_sample(id, path, e.label, e.source.clone())
        })
        .collect();
    let mut out = collect_ingested(files, loaded)?;
    out.samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

fn collect_ingested(files: Vec<PathBuf>, loaded: Vec<std::result::Result<Sample, String>>) -> Result<Ingested> {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (path, r) in files.into_iter().zip(loaded) {
        match r {
            Ok(s) => samples.push(s),
            Err(reason) => skipped.push(SkipRecord { path, reason }),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(Ingested { samples, skipped })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes skipped files as CSV with header `path,reason`.
pub fn write_skip_report(skipped: &[SkipRecord], path: &Path) -> Result<()> {
    let mut out = b"path,reason\n".to_vec();
    for s in skipped {
        writeln!(out, "{},{}", csv_field(&s.path.to_string_lossy()), csv_field(&s.reason)).expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Scores every sample with `model` and assigns class `1` when the score
/// is at least 0.5.
pub fn label_with_model<S: Scalar>(samples: &[Sample], model: &CnnModel<S>) -> Result<Vec<Sample>> {
    samples
        .par_iter()
        .map(|s| {
            let score = model.forward(&classify_transform::<S>(&s.bytes)?)?.as_f64();
            let mut s = s.clone();
            s.model_label = Some(score);
            s.assigned_class = Some(u8::from(score >= 0.5));
            Ok(s)
        })
        .collect()
}

/// Equalises class counts by duplicating randomly drawn minority samples
/// under fresh ids.
pub fn balance(samples: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let mut by_class: [Vec<&Sample>; 2] = [Vec::new(), Vec::new()];
    for s in samples {
        let c = s
            .class()
            .ok_or_else(|| Error::DegenerateDataset(format!("sample {} has no label", s.id)))?;
        by_class[usize::from(c.min(1))].push(s);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::DegenerateDataset(format!(
            "{} benign and {} malicious samples: both classes are required",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let minority = usize::from(by_class[1].len() < by_class[0].len());
    let deficit = by_class[1 - minority].len() - by_class[minority].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = samples.to_vec();
    for n in 0..deficit {
        let src = by_class[minority][rng.gen_range(0..by_class[minority].len())];
        let mut dup = src.clone();
        dup.id = format!("{}#dup{n}", src.id);
        dup.provenance = format!("duplicate of {}", src.id);
        out.push(dup);
    }
    Ok(out)
}

/// Classification-transform images paired with each sample's class.
pub fn to_labeled_images<S: Scalar>(samples: &[Sample]) -> Result<Vec<LabeledImage<S>>> {
    samples
        .par_iter()
        .map(|s| {
            let label = s
                .class()
                .ok_or_else(|| Error::DegenerateDataset(format!("sample {} has no label", s.id)))?;
            Ok(LabeledImage {
                image: classify_transform::<S>(&s.bytes)?,
                label,
            })
        })
        .collect()
}

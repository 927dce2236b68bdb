use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::episode::Termination;
use super::io::{prepared, read_dbimg, write_all, write_dbimg, write_png};
use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PARTIAL_MARKER: &str = "PARTIAL";

/// First line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub victim: String,
    pub filter: String,
    pub config_hash: String,
    /// Multipliers, or L2 levels when `by_l2_level` is set.
    pub severities: Vec<f64>,
    #[serde(default)]
    pub by_l2_level: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    /// 1-based severity index.
    pub severity: usize,
    pub multiplier: f64,
    /// Relative to the manifest's directory.
    pub path: String,
    pub l2: f64,
    pub prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub label: usize,
    pub clean_prediction: Option<usize>,
    pub success: bool,
    pub termination: Termination,
    pub steps: usize,
    pub evaluations: u64,
    pub batches: u64,
    pub l2: f64,
    pub levels: Vec<LevelRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl SplitManifest {
    /// Indices with files on disk.
    pub fn success_indices(&self) -> BTreeSet<usize> {
        self.records.iter().filter(|r| r.success && !r.levels.is_empty()).map(|r| r.index).collect()
    }

    pub fn record(&self, index: usize) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.index == index)
    }

    pub fn attack_success_rate(&self) -> f64 {
        let attempted: Vec<&ManifestRecord> =
            self.records.iter().filter(|r| r.termination != Termination::Skipped).collect();
        if attempted.is_empty() {
            return 0.0;
        }
        attempted.iter().filter(|r| r.success).count() as f64 / attempted.len() as f64
    }
}

/// Indices successfully generated in every manifest.
pub fn intersect_indices<'a>(manifests: impl IntoIterator<Item = &'a SplitManifest>) -> BTreeSet<usize> {
    let mut iter = manifests.into_iter();
    let Some(first) = iter.next() else {
        return BTreeSet::new();
    };
    iter.fold(first.success_indices(), |acc, m| acc.intersection(&m.success_indices()).copied().collect())
}

/// A generated sample ready to be written.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub index: usize,
    pub label: usize,
    pub clean_prediction: Option<usize>,
    pub success: bool,
    pub termination: Termination,
    pub steps: usize,
    pub evaluations: u64,
    pub batches: u64,
    pub l2: f64,
    /// Per severity: multiplier (or level), image, L2 to the original, victim prediction.
    pub levels: Vec<(f64, ImageTensor, f64, usize)>,
}

/// Writes `<dir>/sev<k>/<index>.dbimg` + `.png` for every level of every
/// outcome, then `<dir>/manifest.jsonl`.
///
/// On an I/O failure a `PARTIAL` marker describing the error is left in
/// `dir` and the error is returned.
pub fn write_split(outcomes: &[SampleOutcome], header: &ManifestHeader, dir: &Path) -> Result<SplitManifest> {
    match write_split_inner(outcomes, header, dir) {
        Ok(m) => {
            let marker = dir.join(PARTIAL_MARKER);
            if marker.exists() {
                fs::remove_file(marker)?;
            }
            Ok(m)
        }
        Err(e) => {
            let _ = fs::create_dir_all(dir);
            let _ = fs::write(dir.join(PARTIAL_MARKER), format!("{e}\n"));
            Err(e)
        }
    }
}

fn write_split_inner(outcomes: &[SampleOutcome], header: &ManifestHeader, dir: &Path) -> Result<SplitManifest> {
    fs::create_dir_all(dir)?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        if !seen.insert(o.index) {
            return Err(Error::InvalidArgument(format!("duplicate sample index {}", o.index)));
        }
        let mut levels = Vec::with_capacity(o.levels.len());
        for (k, (mult, image, l2, prediction)) in o.levels.iter().enumerate() {
            let rel = format!("sev{}/{}.dbimg", k + 1, o.index);
            let path = prepared(dir.join(&rel))?;
            write_dbimg(&path, image)?;
            write_png(&path.with_extension("png"), image)?;
            levels.push(LevelRecord {
                severity: k + 1,
                multiplier: *mult,
                path: rel,
                l2: *l2,
                prediction: *prediction,
            });
        }
        records.push(ManifestRecord {
            index: o.index,
            label: o.label,
            clean_prediction: o.clean_prediction,
            success: o.success,
            termination: o.termination,
            steps: o.steps,
            evaluations: o.evaluations,
            batches: o.batches,
            l2: o.l2,
            levels,
        });
    }
    let manifest = SplitManifest { header: header.clone(), records };
    let mut text = serde_json::to_string(&manifest.header).map_err(json_err)?;
    text.push('\n');
    for r in &manifest.records {
        text.push_str(&serde_json::to_string(r).map_err(json_err)?);
        text.push('\n');
    }
    write_all(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Format(format!("manifest: {e}"))
}

/// Accepts either the manifest file or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let path = manifest_path(path);
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut lines = reader.lines();
    let header: ManifestHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?).map_err(json_err)?,
        None => return Err(Error::Format(format!("{} is empty", path.display()))),
    };
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line).map_err(json_err)?);
        }
    }
    Ok(SplitManifest { header, records })
}

/// Loads the tensor of one level of a record.
pub fn load_level(manifest_file: &Path, level: &LevelRecord) -> Result<ImageTensor> {
    let dir = manifest_path(manifest_file).parent().map(Path::to_path_buf).unwrap_or_default();
    read_dbimg(&dir.join(&level.path))
}

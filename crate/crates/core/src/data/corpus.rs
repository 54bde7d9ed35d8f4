//! Class banks built from directories of recorded WAV files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::{RecordedFile, SourceBank, SourceClass, SourceKind, Split};
use crate::error::{Error, Result};
use crate::numcore::RngStream;
use crate::signal::{read_wav, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestRules {
    pub sample_rate: u32,
    /// Shuffles the file order of each class before splitting.
    pub seed: u64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for IngestRules {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            seed: 0,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub bank: SourceBank,
    pub errors: Vec<FileError>,
    pub warnings: Vec<String>,
}

impl IngestReport {
    /// Every file assigned to `split`, across classes.
    pub fn files_in(&self, split: Split) -> Vec<&Path> {
        self.bank
            .classes
            .iter()
            .filter_map(|c| match &c.kind {
                SourceKind::Recorded { files } => Some(files),
                SourceKind::Synthetic(_) => None,
            })
            .flatten()
            .filter(|f| f.split == split)
            .map(|f| f.path.as_path())
            .collect()
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// `(train, valid, test)` file counts for a class with `n` usable files.
fn split_counts(n: usize, rules: &IngestRules) -> (usize, usize, usize) {
    match n {
        0 => (0, 0, 0),
        1 => (1, 0, 0),
        2 => (1, 0, 1),
        _ => {
            let test = ((n as f64 * rules.test_fraction).round() as usize).max(1);
            let valid = ((n as f64 * rules.valid_fraction).round() as usize).max(1);
            let test = test.min(n - 2);
            let valid = valid.min(n - 1 - test);
            (n - valid - test, valid, test)
        }
    }
}

/// Builds a class bank from `root/<class>/*.wav`.
///
/// Files are assigned whole to one split, so no two splits ever draw from
/// the same recording. Unreadable files and files at another sample rate
/// are listed in the report and skipped. A class with a single usable file
/// goes entirely to the training split, with a warning.
pub fn ingest_wav_corpus(root: &Path, rules: &IngestRules) -> Result<IngestReport> {
    let mut classes = Vec::new();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    for (class_index, dir) in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).enumerate() {
        let class_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut loaded = Vec::new();
        for path in sorted_entries(&dir)? {
            let is_wav = path
                .extension()
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false);
            if !is_wav || !path.is_file() {
                continue;
            }
            match read_wav(&path, Some(rules.sample_rate)) {
                Ok(w) => loaded.push((path, w)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    errors.push(FileError {
                        message: e.to_string(),
                        path,
                    });
                }
            }
        }
        if loaded.is_empty() {
            let msg = format!("class `{class_id}` has no usable files and was skipped");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut rng = RngStream::keyed(rules.seed, &[class_index as u64]);
        for i in (1..loaded.len()).rev() {
            loaded.swap(i, rng.below(i + 1));
        }
        let (train, valid, _) = split_counts(loaded.len(), rules);
        if loaded.len() == 1 {
            let msg = format!("class `{class_id}` has a single file; it is used for the train split only");
            log::warn!("{msg}");
            warnings.push(msg);
        } else if valid == 0 {
            let msg = format!("class `{class_id}` has too few files for a validation split");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let files = loaded
            .into_iter()
            .enumerate()
            .map(|(i, (path, w))| RecordedFile {
                split: if i < train {
                    Split::Train
                } else if i < train + valid {
                    Split::Valid
                } else {
                    Split::Test
                },
                num_samples: w.len(),
                path,
                wave: Arc::new(w),
            })
            .collect();
        classes.push(SourceClass {
            class_id,
            kind: SourceKind::Recorded { files },
        });
    }
    if classes.len() < 2 {
        return Err(Error::Config(format!(
            "{}: need at least two classes with usable files, found {}",
            root.display(),
            classes.len()
        )));
    }
    Ok(IngestReport {
        bank: SourceBank { classes },
        errors,
        warnings,
    })
}

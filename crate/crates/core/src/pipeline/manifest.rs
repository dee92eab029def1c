//! Line-delimited JSON dataset manifests.
//!
//! One object per line:
//!
//! ```json
//! {"image_id": "case_001", "image_path": "img/case_001.png",
//!  "ground_truth": [[10, 20, 30, 40]], "label": "lesion", "split": "test",
//!  "width": 256, "height": 256}
//! ```
//!
//! `image_id` defaults to `image_path`; `width`/`height` are optional when
//! the image file is available and required otherwise (simulated runs).
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundingBox, ImageDims};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {cause}")]
    Line { line: usize, cause: String },
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub ground_truth: Vec<BoundingBox>,
    #[serde(default)]
    pub label: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    #[serde(default)]
    image_id: Option<String>,
    image_path: PathBuf,
    ground_truth: Vec<[f64; 4]>,
    #[serde(default)]
    label: String,
    split: Split,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
}

impl ManifestEntry {
    /// Declared extent, if both sides are given.
    pub fn dims(&self) -> Option<ImageDims> {
        ImageDims::new(self.width?, self.height?).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        let mut seen = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.image_id.clone()) {
                return Err(ManifestError::Line {
                    line: i + 1,
                    cause: format!("duplicate image id {:?}", e.image_id),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Parse manifest text; relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ManifestError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fail = |cause: String| ManifestError::Line {
                line: line_no,
                cause,
            };
            let raw: RawEntry = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
            let ground_truth = raw
                .ground_truth
                .iter()
                .map(|c| BoundingBox::from_array(*c))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| fail(format!("ground truth: {e}")))?;
            let image_id = raw
                .image_id
                .unwrap_or_else(|| raw.image_path.to_string_lossy().into_owned());
            if !seen.insert(image_id.clone()) {
                return Err(fail(format!("duplicate image id {image_id:?}")));
            }
            if raw.width.is_some() != raw.height.is_some() {
                return Err(fail("width and height must be given together".into()));
            }
            let entry = ManifestEntry {
                image_id,
                image_path: if raw.image_path.is_absolute() {
                    raw.image_path
                } else {
                    base_dir.join(raw.image_path)
                },
                ground_truth,
                label: raw.label,
                split: raw.split,
                width: raw.width,
                height: raw.height,
            };
            if let (Some(w), Some(h)) = (entry.width, entry.height) {
                let dims = ImageDims::new(w, h).map_err(|e| fail(e.to_string()))?;
                if let Some(b) = entry.ground_truth.iter().find(|b| !b.is_within(dims)) {
                    return Err(fail(format!("ground truth {b} exceeds image {w}x{h}")));
                }
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    /// Entries whose image file does not exist.
    pub fn missing_images(&self) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| !e.image_path.is_file())
            .collect()
    }

    /// Serialize with paths as stored (absolute after loading).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entries serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    DatasetManifest::parse(&text, base)
}

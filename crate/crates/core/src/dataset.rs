//! On-disk dataset layout and loading.
//!
//! A dataset is a directory with a `dataset.json` manifest:
//!
//! ```json
//! {
//!   "name": "tiny-faces",
//!   "classes": ["anger", "happiness"],
//!   "modality": "image",
//!   "conversation_eligible": true,
//!   "samples": [
//!     {"id": "s0", "media": "images/s0.png", "label": "anger",
//!      "description": "optional free text"}
//!   ]
//! }
//! ```
//!
//! Media paths are relative to the dataset directory. Video samples point at
//! clip directories (see [`crate::media`]); a clip may carry a `captions.txt`
//! with one caption line per second of footage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_ctx, Error, Result};
use crate::media::MediaHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Video => write!(f, "video"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSample {
    pub id: String,
    pub media: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub classes: Vec<String>,
    pub modality: Modality,
    /// Whether free-form conversation instructions may be generated from
    /// this dataset. Category-style instructions are always allowed.
    pub conversation_eligible: bool,
    pub samples: Vec<DatasetSample>,
}

/// A dataset bound to its directory so media paths resolve.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub spec: DatasetSpec,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("dataset.json");
        let text = io_ctx(std::fs::read_to_string(&manifest), &manifest)?;
        let spec: DatasetSpec = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("malformed {}: {e}", manifest.display())))?;
        let ds = Dataset {
            dir: dir.to_path_buf(),
            spec,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self) -> Result<()> {
        io_ctx(std::fs::create_dir_all(&self.dir), &self.dir)?;
        let manifest = self.dir.join("dataset.json");
        let json = serde_json::to_string_pretty(&self.spec)
            .map_err(|e| Error::input(format!("serialize dataset: {e}")))?;
        io_ctx(std::fs::write(&manifest, json), &manifest)
    }

    /// Checks structural invariants: non-empty unique classes, unique
    /// sample ids, and every label drawn from the class list.
    pub fn validate(&self) -> Result<()> {
        if self.spec.classes.is_empty() {
            return Err(Error::input("dataset declares no classes"));
        }
        let mut seen_class = std::collections::BTreeSet::new();
        for c in &self.spec.classes {
            if !seen_class.insert(c) {
                return Err(Error::input(format!("duplicate class {c:?}")));
            }
        }
        let mut seen_id = std::collections::BTreeSet::new();
        for s in &self.spec.samples {
            if !seen_id.insert(&s.id) {
                return Err(Error::input(format!("duplicate sample id {:?}", s.id)));
            }
            if !self.spec.classes.contains(&s.label) {
                return Err(Error::input(format!(
                    "sample {:?} has label {:?} outside the class set",
                    s.id, s.label
                )));
            }
        }
        Ok(())
    }

    pub fn media_handle(&self, sample: &DatasetSample) -> Result<MediaHandle> {
        MediaHandle::from_path(&self.dir.join(&sample.media))
    }

    /// Per-class sample counts, keyed by class name (zero-count classes
    /// included).
    pub fn class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> = self
            .spec
            .classes
            .iter()
            .map(|c| (c.clone(), 0))
            .collect();
        for s in &self.spec.samples {
            *counts.get_mut(&s.label).expect("validated label") += 1;
        }
        counts
    }
}

/// Per-second captions stored next to a video clip (`captions.txt`,
/// one line per second).
pub fn load_captions(clip_dir: &Path) -> Result<Vec<String>> {
    let path = clip_dir.join("captions.txt");
    let text = io_ctx(std::fs::read_to_string(&path), &path)?;
    let lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
    if lines.is_empty() || lines.iter().all(|l| l.is_empty()) {
        return Err(Error::input(format!(
            "{} holds no captions",
            path.display()
        )));
    }
    Ok(lines)
}

pub fn write_captions(clip_dir: &Path, captions: &[String]) -> Result<()> {
    let path = clip_dir.join("captions.txt");
    io_ctx(std::fs::write(&path, captions.join("\n")), &path)
}

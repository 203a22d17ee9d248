//! Line-delimited dataset manifests and caption construction.
//!
//! One UTF-8 JSON object per line with keys `image_path`, `label`,
//! `attributes` (ordered name → value map), `person_box` (`[x0, y0, x1, y1]`
//! in pixels), and optional `split_hint` / `caption`. Attribute order is
//! preserved exactly as written, because captions depend on it.

use crate::{Error, Result};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One dataset row as stored in the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    pub attributes: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl ManifestRecord {
    /// Checks the invariants that do not need the image dimensions
    /// (those are enforced when the box is applied to pixels).
    fn validate(&self, line: usize) -> Result<()> {
        if self.image_path.is_empty() {
            return Err(Error::invalid(format!("empty image_path at line {line}")));
        }
        if let Some([x0, y0, x1, y1]) = self.person_box {
            if !(x0 >= 0.0 && x0 < x1 && y0 >= 0.0 && y0 < y1) {
                return Err(Error::invalid(format!("invalid box at line {line}")));
            }
        }
        Ok(())
    }
}

/// Read every record of a manifest in file order.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("malformed record at line {lineno}: {e}"))
        })?;
        record.validate(lineno)?;
        records.push(record);
    }
    Ok(records)
}

/// Write records as one JSON object per line.
pub fn save_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::invalid(format!("serializing record: {e}")))?;
        writeln!(file, "{line}").map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

/// Deterministic caption template over ordered attributes.
///
/// `"A photo evoking {emotion}"`, then `", featuring {object}"` if present,
/// then `", in a {scene} scene"` if present, then `", with {name} {value}"`
/// for every remaining attribute in manifest order.
pub fn build_caption(attributes: &IndexMap<String, String>) -> Result<String> {
    let emotion = attributes
        .get("emotion")
        .ok_or_else(|| Error::invalid("caption attributes missing \"emotion\""))?;
    let mut caption = format!("A photo evoking {emotion}");
    if let Some(object) = attributes.get("object") {
        caption.push_str(&format!(", featuring {object}"));
    }
    if let Some(scene) = attributes.get("scene") {
        caption.push_str(&format!(", in a {scene} scene"));
    }
    for (name, value) in attributes {
        if name == "emotion" || name == "object" || name == "scene" {
            continue;
        }
        caption.push_str(&format!(", with {name} {value}"));
    }
    Ok(caption)
}

//! Dataset manifests.
//!
//! ```json
//! {"images": [{"id": "P0001", "file": "images/P0001.png", "width": 64, "height": 64}],
//!  "annotations_file": "annotations.json"}
//! ```
//!
//! Paths are relative to the directory holding the manifest. The
//! annotations file is a COCO-style document (see [`super::coco`]).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::coco::id_to_json;
use super::{parse_coco, save_png, write_coco, DataError, Dataset, ImageEntry};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Deserialize)]
struct ManifestIn {
    images: Vec<ManifestImageIn>,
    annotations_file: String,
}

#[derive(Debug, Deserialize)]
struct ManifestImageIn {
    id: Value,
    file: String,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    images: Vec<ManifestImageOut<'a>>,
    annotations_file: &'a str,
}

#[derive(Serialize)]
struct ManifestImageOut<'a> {
    id: Value,
    file: &'a str,
    width: u32,
    height: u32,
}

/// Load a manifest and its annotations. Pixels are not read here.
pub fn load_manifest(path: &Path) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: ManifestIn = serde_path_to_error::deserialize(de).map_err(|e| {
        DataError::SchemaDetail {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        }
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let ann_path = root.join(&manifest.annotations_file);
    let ann_text = fs::read_to_string(&ann_path).map_err(|e| DataError::io(&ann_path, e))?;
    let coco = parse_coco(&ann_text)?;

    let mut by_id: HashMap<String, ImageEntry> = coco
        .images
        .into_iter()
        .map(|e| (e.id.clone(), e))
        .collect();
    let mut images = Vec::with_capacity(manifest.images.len());
    for (i, m) in manifest.images.into_iter().enumerate() {
        let id = match m.id {
            Value::String(s) => s,
            Value::Number(n) if n.is_u64() => n.to_string(),
            _ => return Err(DataError::Schema(format!("images[{i}].id"))),
        };
        let mut entry = by_id
            .remove(&id)
            .unwrap_or_else(|| ImageEntry::new(id.clone(), m.width, m.height));
        if entry.width != m.width || entry.height != m.height {
            return Err(DataError::Schema(format!("images[{i}].width")));
        }
        entry.file = Some(m.file);
        images.push(entry);
    }
    if let Some(orphan) = by_id.keys().min() {
        return Err(DataError::SchemaDetail {
            path: "annotations_file".into(),
            message: format!("image `{orphan}` is not listed in the manifest"),
        });
    }
    let mut d = Dataset::new(images, coco.categories)?;
    d.root = Some(root);
    Ok(d)
}

fn sanitize(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() || s.starts_with('.') {
        format!("img{s}")
    } else {
        s
    }
}

/// Write `dir/manifest.json`, `dir/annotations.json` and one file per image
/// under `dir/images/`. Images held in memory are encoded as PNG; images
/// backed only by a file are copied byte-for-byte. Returns the manifest path.
pub fn write_manifest(d: &Dataset, dir: &Path) -> Result<PathBuf, DataError> {
    let img_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| DataError::io(&img_dir, e))?;

    let mut used = HashSet::new();
    let mut files = Vec::with_capacity(d.images.len());
    for (i, entry) in d.images.iter().enumerate() {
        let source = if entry.pixels.is_none() {
            d.image_path(entry)
        } else {
            None
        };
        let ext = source
            .as_ref()
            .and_then(|p| p.extension())
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_else(|| "png".into());
        let mut stem = sanitize(&entry.id);
        if !used.insert(format!("{stem}.{ext}")) {
            stem = format!("{i}_{stem}");
            used.insert(format!("{stem}.{ext}"));
        }
        let rel = format!("{IMAGES_DIR}/{stem}.{ext}");
        let dest = dir.join(&rel);
        match (&entry.pixels, source) {
            (Some(px), _) => save_png(&dest, entry.width, entry.height, px)?,
            (None, Some(src)) => {
                fs::copy(&src, &dest).map_err(|e| DataError::io(&src, e))?;
            }
            (None, None) => {
                return Err(DataError::Image {
                    id: entry.id.clone(),
                    message: "no pixel data and no image file".into(),
                })
            }
        }
        files.push(rel);
    }

    let mut written = d.clone();
    for (entry, file) in written.images.iter_mut().zip(&files) {
        entry.file = Some(file.clone());
    }
    let ann_path = dir.join(ANNOTATIONS_FILE);
    fs::write(&ann_path, write_coco(&written)).map_err(|e| DataError::io(&ann_path, e))?;

    let manifest = ManifestOut {
        images: written
            .images
            .iter()
            .map(|e| ManifestImageOut {
                id: id_to_json(&e.id),
                file: e.file.as_deref().unwrap_or_default(),
                width: e.width,
                height: e.height,
            })
            .collect(),
        annotations_file: ANNOTATIONS_FILE,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    Ok(path)
}

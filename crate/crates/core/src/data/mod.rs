//! Core annotation types and the readers/writers for the supported
//! annotation formats.
//!
//! Boxes are axis-aligned and expressed in pixel units with a top-left
//! origin. Oriented annotations (DOTA) are reduced to their axis-aligned
//! hull when parsed.

pub mod coco;
pub mod dota;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use coco::{parse_coco, write_coco};
pub use dota::{parse_dota, DotaError};
pub use manifest::{load_manifest, write_manifest};

/// Upper area bound (inclusive) of the small bucket.
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
/// Upper area bound (inclusive) of the medium bucket.
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error at `{0}`")]
    Schema(String),
    #[error("schema error at `{path}`: {message}")]
    SchemaDetail { path: String, message: String },
    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),
    #[error("image `{id}`: {message}")]
    Image { id: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    /// JSON path of the offending field for schema errors.
    pub fn schema_path(&self) -> Option<&str> {
        match self {
            DataError::Schema(p) => Some(p),
            DataError::SchemaDetail { path, .. } => Some(path),
            _ => None,
        }
    }
}

/// Axis-aligned box: `x`, `y` are the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.right() <= width as f64
            && self.bottom() <= height as f64
    }

    /// Area of the intersection of the two boxes' interiors.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw > 0.0 && ih > 0.0 {
            iw * ih
        } else {
            0.0
        }
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.intersection_area(other) > 0.0
    }

    /// Clip to `[0, width] x [0, height]`. `None` if nothing with positive
    /// extent remains.
    pub fn clip(&self, width: u32, height: u32) -> Option<BBox> {
        if self.fits_in(width, height) {
            return (self.w > 0.0 && self.h > 0.0).then_some(*self);
        }
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.right().min(width as f64);
        let y1 = self.bottom().min(height as f64);
        (x1 > x0 && y1 > y0).then(|| BBox::from_corners(x0, y0, x1, y1))
    }

    /// Smallest integer pixel rectangle covering the box.
    pub fn pixel_rect(&self) -> PixelRect {
        let x0 = self.x.floor().max(0.0) as u32;
        let y0 = self.y.floor().max(0.0) as u32;
        let x1 = self.right().ceil().max(0.0) as u32;
        let y1 = self.bottom().ceil().max(0.0) as u32;
        PixelRect {
            x: x0,
            y: y0,
            w: x1.saturating_sub(x0),
            h: y1.saturating_sub(y0),
        }
    }
}

/// Integer pixel rectangle `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn overlaps(&self, other: &PixelRect) -> bool {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        x1 > x0 && y1 > y0
    }

    pub fn contains_pixel(&self, px: u32, py: u32) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];
}

/// Bucket a box by area. Boundary areas belong to the smaller bucket.
pub fn classify_size(b: &BBox) -> SizeClass {
    let area = b.area();
    if area <= SMALL_MAX_AREA {
        SizeClass::Small
    } else if area <= MEDIUM_MAX_AREA {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Origin {
    #[default]
    Original,
    Pasted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub bbox: BBox,
    pub category: String,
    pub difficult: bool,
    pub origin: Origin,
}

impl Instance {
    pub fn new(bbox: BBox, category: impl Into<String>) -> Self {
        Instance {
            bbox,
            category: category.into(),
            difficult: false,
            origin: Origin::Original,
        }
    }

    pub fn size_class(&self) -> SizeClass {
        classify_size(&self.bbox)
    }
}

/// A decoded image and its annotations. Pixels are row-major RGB8.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub instances: Vec<Instance>,
}

impl AnnotatedImage {
    pub fn new(
        id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        instances: Vec<Instance>,
    ) -> Result<Self, DataError> {
        let img = AnnotatedImage {
            id: id.into(),
            width,
            height,
            pixels,
            instances,
        };
        img.validate()?;
        Ok(img)
    }

    /// Solid black image without annotations.
    pub fn blank(id: impl Into<String>, width: u32, height: u32) -> Self {
        AnnotatedImage {
            id: id.into(),
            width,
            height,
            pixels: vec![0; width as usize * height as usize * 3],
            instances: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let expected = self.width as usize * self.height as usize * 3;
        if self.pixels.len() != expected {
            return Err(DataError::Image {
                id: self.id.clone(),
                message: format!(
                    "pixel buffer has {} bytes, expected {expected}",
                    self.pixels.len()
                ),
            });
        }
        validate_instances(&self.id, self.width, self.height, &self.instances)
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Copy of the RGB bytes inside `rect`, row by row.
    pub fn crop(&self, rect: &PixelRect) -> Vec<u8> {
        let mut out = Vec::with_capacity(rect.w as usize * rect.h as usize * 3);
        let stride = self.width as usize * 3;
        for row in rect.y..rect.y + rect.h {
            let start = row as usize * stride + rect.x as usize * 3;
            out.extend_from_slice(&self.pixels[start..start + rect.w as usize * 3]);
        }
        out
    }

    /// Write a patch produced by [`crop`](Self::crop) at `(x, y)`.
    pub fn blit(&mut self, patch: &[u8], patch_w: u32, patch_h: u32, x: u32, y: u32) {
        let stride = self.width as usize * 3;
        let row_len = patch_w as usize * 3;
        for row in 0..patch_h as usize {
            let dst = (y as usize + row) * stride + x as usize * 3;
            self.pixels[dst..dst + row_len]
                .copy_from_slice(&patch[row * row_len..(row + 1) * row_len]);
        }
    }

    pub fn entry(&self) -> ImageEntry {
        ImageEntry {
            id: self.id.clone(),
            file: None,
            width: self.width,
            height: self.height,
            instances: self.instances.clone(),
            pixels: Some(Arc::new(self.pixels.clone())),
        }
    }
}

fn validate_instances(
    id: &str,
    width: u32,
    height: u32,
    instances: &[Instance],
) -> Result<(), DataError> {
    for (i, inst) in instances.iter().enumerate() {
        if inst.category.is_empty() {
            return Err(DataError::Image {
                id: id.to_owned(),
                message: format!("instance {i} has an empty category"),
            });
        }
        if !inst.bbox.is_valid() || !inst.bbox.fits_in(width, height) {
            return Err(DataError::Image {
                id: id.to_owned(),
                message: format!("instance {i} box {:?} is invalid or out of bounds", inst.bbox),
            });
        }
    }
    Ok(())
}

/// One image of a [`Dataset`]. Pixels are either held in memory or read
/// from `file` (relative to the dataset root) on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub file: Option<String>,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<Instance>,
    pub pixels: Option<Arc<Vec<u8>>>,
}

impl ImageEntry {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageEntry {
            id: id.into(),
            file: None,
            width,
            height,
            instances: Vec::new(),
            pixels: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageEntry>,
    pub categories: Vec<String>,
    /// Directory image files are resolved against.
    pub root: Option<PathBuf>,
}

impl Dataset {
    pub fn new(images: Vec<ImageEntry>, categories: Vec<String>) -> Result<Self, DataError> {
        let d = Dataset {
            images,
            categories,
            root: None,
        };
        d.validate()?;
        Ok(d)
    }

    /// Build an in-memory dataset; categories are collected in first-seen order.
    pub fn from_images(images: Vec<AnnotatedImage>) -> Result<Self, DataError> {
        let mut categories: Vec<String> = Vec::new();
        for img in &images {
            img.validate()?;
            for inst in &img.instances {
                if !categories.contains(&inst.category) {
                    categories.push(inst.category.clone());
                }
            }
        }
        let entries = images
            .into_iter()
            .map(|img| ImageEntry {
                id: img.id,
                file: None,
                width: img.width,
                height: img.height,
                instances: img.instances,
                pixels: Some(Arc::new(img.pixels)),
            })
            .collect();
        Dataset::new(entries, categories)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for entry in &self.images {
            if !seen.insert(entry.id.as_str()) {
                return Err(DataError::DuplicateImageId(entry.id.clone()));
            }
            validate_instances(&entry.id, entry.width, entry.height, &entry.instances)?;
            for inst in &entry.instances {
                if !self.categories.contains(&inst.category) {
                    return Err(DataError::Image {
                        id: entry.id.clone(),
                        message: format!("category `{}` is not declared", inst.category),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn find(&self, id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.id == id)
    }

    pub fn image_path(&self, entry: &ImageEntry) -> Option<PathBuf> {
        let file = entry.file.as_ref()?;
        Some(match &self.root {
            Some(root) => root.join(file),
            None => PathBuf::from(file),
        })
    }

    /// Decode (or clone from memory) the pixels of image `index`.
    pub fn load_image(&self, index: usize) -> Result<AnnotatedImage, DataError> {
        let entry = &self.images[index];
        let pixels = match &entry.pixels {
            Some(p) => p.as_ref().clone(),
            None => {
                let path = self.image_path(entry).ok_or_else(|| DataError::Image {
                    id: entry.id.clone(),
                    message: "no pixel data and no image file".into(),
                })?;
                read_rgb(&path, entry)?
            }
        };
        AnnotatedImage::new(
            entry.id.clone(),
            entry.width,
            entry.height,
            pixels,
            entry.instances.clone(),
        )
    }

    /// Same dataset with every image's pixels held in memory.
    pub fn materialize(&self) -> Result<Dataset, DataError> {
        let mut out = self.clone();
        for (i, entry) in out.images.iter_mut().enumerate() {
            if entry.pixels.is_none() {
                entry.pixels = Some(Arc::new(self.load_image(i)?.pixels));
            }
        }
        Ok(out)
    }

    /// Subset by positional indices, keeping the category list.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            categories: self.categories.clone(),
            root: self.root.clone(),
        }
    }

    pub fn instance_count(&self) -> usize {
        self.images.iter().map(|e| e.instances.len()).sum()
    }
}

fn read_rgb(path: &Path, entry: &ImageEntry) -> Result<Vec<u8>, DataError> {
    let img = image::open(path).map_err(|source| DataError::Decode {
        path: path.to_owned(),
        source,
    })?;
    let rgb = img.to_rgb8();
    if rgb.width() != entry.width || rgb.height() != entry.height {
        return Err(DataError::Image {
            id: entry.id.clone(),
            message: format!(
                "{} is {}x{}, manifest says {}x{}",
                path.display(),
                rgb.width(),
                rgb.height(),
                entry.width,
                entry.height
            ),
        });
    }
    Ok(rgb.into_raw())
}

/// Encode RGB8 pixels as PNG.
pub fn save_png(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<(), DataError> {
    image::save_buffer_with_format(
        path,
        pixels,
        width,
        height,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|source| match source {
        image::ImageError::IoError(e) => DataError::io(path, e),
        other => DataError::Decode {
            path: path.to_owned(),
            source: other,
        },
    })
}

//! Synthetic aerial-style scenes for demos and tests: noisy background with
//! small textured objects that never overlap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, BBox, DataError, Dataset, Instance};
use crate::seed::{self, derive_seed_u64};

pub const CATEGORIES: [&str; 3] = ["plane", "ship", "vehicle"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub images: u32,
    pub width: u32,
    pub height: u32,
    pub min_objects: u32,
    pub max_objects: u32,
    pub min_side: u32,
    pub max_side: u32,
    /// Objects with sides above the small-size limit added per image.
    pub medium_objects: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 40,
            width: 64,
            height: 64,
            min_objects: 4,
            max_objects: 6,
            min_side: 3,
            max_side: 7,
            medium_objects: 0,
            seed: 0,
        }
    }
}

fn paint<R: Rng>(img: &mut AnnotatedImage, b: &BBox, rng: &mut R) {
    let r = b.pixel_rect();
    for y in r.y..r.y + r.h {
        for x in r.x..r.x + r.w {
            let i = (y as usize * img.width as usize + x as usize) * 3;
            for c in 0..3 {
                img.pixels[i + c] = rng.random_range(128..=255);
            }
        }
    }
}

fn place<R: Rng>(img: &AnnotatedImage, w: u32, h: u32, rng: &mut R) -> Option<BBox> {
    if w + 2 > img.width || h + 2 > img.height {
        return None;
    }
    for _ in 0..200 {
        let x = rng.random_range(1..=img.width - w - 1);
        let y = rng.random_range(1..=img.height - h - 1);
        let cand = BBox::new(x as f64, y as f64, w as f64, h as f64);
        // keep a one-pixel gap to every other object
        let grown = BBox::new(cand.x - 1.0, cand.y - 1.0, cand.w + 2.0, cand.h + 2.0);
        if img.instances.iter().all(|i| !i.bbox.overlaps(&grown)) {
            return Some(cand);
        }
    }
    None
}

pub fn generate_image(cfg: &SynthConfig, index: u32) -> AnnotatedImage {
    let mut rng = seed::rng(derive_seed_u64(cfg.seed, index as u64));
    let mut img = AnnotatedImage::blank(format!("syn{index:04}"), cfg.width, cfg.height);
    for p in img.pixels.iter_mut() {
        *p = rng.random_range(0..64);
    }
    for _ in 0..cfg.medium_objects {
        let side = rng.random_range(33..=40);
        if let Some(b) = place(&img, side, side, &mut rng) {
            paint(&mut img, &b, &mut rng);
            img.instances.push(Instance::new(b, CATEGORIES[0]));
        }
    }
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    for _ in 0..n {
        let w = rng.random_range(cfg.min_side..=cfg.max_side);
        let h = rng.random_range(cfg.min_side..=cfg.max_side);
        if let Some(b) = place(&img, w, h, &mut rng) {
            paint(&mut img, &b, &mut rng);
            let cat = CATEGORIES[rng.random_range(0..CATEGORIES.len() as u32) as usize];
            img.instances.push(Instance::new(b, cat));
        }
    }
    img
}

pub fn generate_images(cfg: &SynthConfig) -> Vec<AnnotatedImage> {
    (0..cfg.images).map(|i| generate_image(cfg, i)).collect()
}

/// In-memory dataset; categories follow [`CATEGORIES`] order.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    let mut d = Dataset::from_images(generate_images(cfg))?;
    d.categories = CATEGORIES.iter().map(|c| c.to_string()).collect();
    d.validate()?;
    Ok(d)
}

//! DOTA label files: one object per line,
//! `x1 y1 x2 y2 x3 y3 x4 y4 category difficult`.

use thiserror::Error;

use super::{BBox, Instance, Origin};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DotaError {
    #[error("line {0}: malformed annotation")]
    MalformedLine(usize),
    #[error("line {0}: box has no extent inside the image")]
    DegenerateBox(usize),
}

/// Parse one DOTA label file. Line numbers in errors are 1-based.
///
/// Each quadrilateral becomes its axis-aligned hull clipped to the image.
/// Header lines (`imagesource:...`, `gsd:...`) and blank lines are skipped.
pub fn parse_dota(text: &str, image_size: (u32, u32)) -> Result<Vec<Instance>, DotaError> {
    let (width, height) = image_size;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("imagesource") || trimmed.starts_with("gsd")
        {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 10 {
            return Err(DotaError::MalformedLine(line_no));
        }
        let mut coords = [0f64; 8];
        for (slot, field) in coords.iter_mut().zip(&fields[..8]) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or(DotaError::MalformedLine(line_no))?;
        }
        let category = fields[8];
        let difficult = match fields[9] {
            "0" => false,
            "1" => true,
            _ => return Err(DotaError::MalformedLine(line_no)),
        };
        let hull = quad_hull(&coords);
        let bbox = hull
            .clip(width, height)
            .ok_or(DotaError::DegenerateBox(line_no))?;
        out.push(Instance {
            bbox,
            category: category.to_owned(),
            difficult,
            origin: Origin::Original,
        });
    }
    Ok(out)
}

/// Axis-aligned hull of the four vertices (before clipping).
pub fn quad_hull(coords: &[f64; 8]) -> BBox {
    let xs = coords.iter().step_by(2);
    let ys = coords.iter().skip(1).step_by(2);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    BBox::from_corners(x0, y0, x1, y1)
}

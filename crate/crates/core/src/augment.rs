//! Small-object copy-paste operators.
//!
//! A [`Policy`] picks one of three operators, a per-image probability `p`
//! and a paste multiplicity `m`. Each selected small object is copied
//! verbatim (no blending) to `m` random locations of the same image that do
//! not intersect any existing or previously pasted object.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotatedImage, BBox, Instance, Origin, PixelRect, SizeClass};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AugmentError {
    #[error("source box {w}x{h} does not fit the placement area")]
    SourceTooLarge { w: u32, h: u32 },
    #[error("policy set is empty")]
    EmptyPolicySet,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operation {
    #[serde(rename = "single")]
    SingleObject,
    #[serde(rename = "multiple")]
    MultipleObjects,
    #[serde(rename = "all")]
    AllObjects,
}

impl Operation {
    pub const ALL: [Operation; 3] = [
        Operation::SingleObject,
        Operation::MultipleObjects,
        Operation::AllObjects,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Operation::SingleObject => "single",
            Operation::MultipleObjects => "multiple",
            Operation::AllObjects => "all",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Operation {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Operation::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| AugmentError::InvalidPolicy(format!("unknown operation `{s}`")))
    }
}

pub const MIN_PASTES: u8 = 1;
pub const MAX_PASTES: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub op: Operation,
    pub p: f64,
    pub m: u8,
}

impl Policy {
    pub fn new(op: Operation, p: f64, m: u8) -> Result<Self, AugmentError> {
        let policy = Policy { op, p, m };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(AugmentError::InvalidPolicy(format!(
                "p = {} is outside [0, 1]",
                self.p
            )));
        }
        if !(MIN_PASTES..=MAX_PASTES).contains(&self.m) {
            return Err(AugmentError::InvalidPolicy(format!(
                "m = {} is outside [{MIN_PASTES}, {MAX_PASTES}]",
                self.m
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub max_attempts: u32,
    /// Pixels kept free along every image border.
    pub margin: u32,
    pub rng_seed: u64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        PlacementConfig {
            max_attempts: 50,
            margin: 0,
            rng_seed: 0,
        }
    }
}

/// Where a policy came from during search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fold: u32,
    pub trial: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyEntry {
    pub policy: Policy,
    pub provenance: Option<Provenance>,
}

impl From<Policy> for PolicyEntry {
    fn from(policy: Policy) -> Self {
        PolicyEntry {
            policy,
            provenance: None,
        }
    }
}

/// The final policy collection used during training; one entry is drawn
/// uniformly per image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicySet {
    pub entries: Vec<PolicyEntry>,
}

impl PolicySet {
    pub fn new(entries: Vec<PolicyEntry>) -> Self {
        PolicySet { entries }
    }

    pub fn from_policies(policies: impl IntoIterator<Item = Policy>) -> Self {
        PolicySet {
            entries: policies.into_iter().map(PolicyEntry::from).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn policies(&self) -> impl Iterator<Item = &Policy> {
        self.entries.iter().map(|e| &e.policy)
    }

    /// Uniformly pick one entry.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&PolicyEntry, AugmentError> {
        if self.entries.is_empty() {
            return Err(AugmentError::EmptyPolicySet);
        }
        let i = rng.random_range(0..self.entries.len() as u32) as usize;
        Ok(&self.entries[i])
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRecord {
    op: Operation,
    p: f64,
    m: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fold: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trial: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    loss: Option<f64>,
}

/// Error from reading a policy file; `path` names the offending field,
/// e.g. `[2].p`.
#[derive(Debug, Error, PartialEq)]
#[error("policy file error at `{path}`: {message}")]
pub struct PolicyFileError {
    pub path: String,
    pub message: String,
}

/// Parse `[{"op": "single"|"multiple"|"all", "p": .., "m": ..}, ...]`.
/// Optional `fold`, `trial` and `loss` keys are read as provenance.
pub fn parse_policy_file(text: &str) -> Result<PolicySet, PolicyFileError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let records: Vec<PolicyRecord> = serde_path_to_error::deserialize(de).map_err(|e| {
        PolicyFileError {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        }
    })?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let policy = Policy {
            op: r.op,
            p: r.p,
            m: r.m,
        };
        if let Err(AugmentError::InvalidPolicy(message)) = policy.validate() {
            let field = if message.starts_with("p ") { "p" } else { "m" };
            return Err(PolicyFileError {
                path: format!("[{i}].{field}"),
                message,
            });
        }
        let provenance = match (r.fold, r.trial, r.loss) {
            (Some(fold), Some(trial), Some(loss)) => Some(Provenance { fold, trial, loss }),
            (None, None, None) => None,
            _ => {
                return Err(PolicyFileError {
                    path: format!("[{i}]"),
                    message: "provenance needs all of `fold`, `trial` and `loss`".into(),
                })
            }
        };
        entries.push(PolicyEntry { policy, provenance });
    }
    Ok(PolicySet { entries })
}

pub fn write_policy_file(set: &PolicySet) -> String {
    let records: Vec<PolicyRecord> = set
        .entries
        .iter()
        .map(|e| PolicyRecord {
            op: e.policy.op,
            p: e.policy.p,
            m: e.policy.m,
            fold: e.provenance.map(|p| p.fold),
            trial: e.provenance.map(|p| p.trial),
            loss: e.provenance.map(|p| p.loss),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&records).expect("policies serialize");
    s.push('\n');
    s
}

/// Original, non-difficult small objects: the only valid copy sources.
pub fn is_eligible_source(inst: &Instance) -> bool {
    inst.origin == Origin::Original && !inst.difficult && inst.size_class() == SizeClass::Small
}

/// Indices into `img.instances` of the objects to copy, in ascending order.
/// Empty when the operator cannot apply (no eligible object, or fewer than
/// two for [`Operation::MultipleObjects`]).
pub fn select_sources<R: Rng + ?Sized>(
    img: &AnnotatedImage,
    op: Operation,
    rng: &mut R,
) -> Vec<usize> {
    let eligible: Vec<usize> = img
        .instances
        .iter()
        .enumerate()
        .filter(|(_, inst)| is_eligible_source(inst))
        .map(|(i, _)| i)
        .collect();
    let n = eligible.len();
    match op {
        Operation::SingleObject if n >= 1 => {
            vec![eligible[rng.random_range(0..n as u32) as usize]]
        }
        Operation::MultipleObjects if n >= 2 => {
            let k = rng.random_range(2..=n as u32) as usize;
            let mut picked: Vec<usize> = index::sample(rng, n, k)
                .into_iter()
                .map(|j| eligible[j])
                .collect();
            picked.sort_unstable();
            picked
        }
        Operation::AllObjects => eligible,
        _ => Vec::new(),
    }
}

/// Rejection-sample a top-left pixel corner for a `w x h` rectangle that
/// stays inside the margins and intersects none of `occupied`.
fn sample_corner<R: Rng + ?Sized>(
    width: u32,
    height: u32,
    w: u32,
    h: u32,
    occupied: &[PixelRect],
    cfg: &PlacementConfig,
    rng: &mut R,
) -> Result<Option<(u32, u32)>, AugmentError> {
    let too_large = AugmentError::SourceTooLarge { w, h };
    let x_hi = width
        .checked_sub(cfg.margin)
        .and_then(|v| v.checked_sub(w))
        .filter(|&hi| hi >= cfg.margin)
        .ok_or(too_large.clone())?;
    let y_hi = height
        .checked_sub(cfg.margin)
        .and_then(|v| v.checked_sub(h))
        .filter(|&hi| hi >= cfg.margin)
        .ok_or(too_large)?;
    for _ in 0..cfg.max_attempts.max(1) {
        let x = rng.random_range(cfg.margin..=x_hi);
        let y = rng.random_range(cfg.margin..=y_hi);
        let cand = PixelRect { x, y, w, h };
        if !occupied.iter().any(|o| o.overlaps(&cand)) {
            return Ok(Some((x, y)));
        }
    }
    Ok(None)
}

/// Find a location for a copy of `source_box` that does not intersect any
/// box in `occupied`. The returned box has the same `w`, `h` and the same
/// sub-pixel offset as the source. `None` after `cfg.max_attempts` misses.
pub fn find_paste_location<R: Rng + ?Sized>(
    img: &AnnotatedImage,
    source_box: &BBox,
    occupied: &[BBox],
    cfg: &PlacementConfig,
    rng: &mut R,
) -> Result<Option<BBox>, AugmentError> {
    let src = source_box.pixel_rect();
    let occupied: Vec<PixelRect> = occupied.iter().map(BBox::pixel_rect).collect();
    let corner = sample_corner(img.width, img.height, src.w, src.h, &occupied, cfg, rng)?;
    Ok(corner.map(|(x, y)| shifted(source_box, &src, x, y)))
}

fn shifted(source_box: &BBox, src: &PixelRect, x: u32, y: u32) -> BBox {
    BBox::new(
        x as f64 + (source_box.x - src.x as f64),
        y as f64 + (source_box.y - src.y as f64),
        source_box.w,
        source_box.h,
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentStats {
    /// The probability gate fired.
    pub applied: bool,
    pub selected: usize,
    pub pasted: usize,
    pub skipped: usize,
}

impl std::ops::AddAssign for AugmentStats {
    fn add_assign(&mut self, rhs: Self) {
        self.applied |= rhs.applied;
        self.selected += rhs.selected;
        self.pasted += rhs.pasted;
        self.skipped += rhs.skipped;
    }
}

/// Apply one policy. See [`apply_policy_with_stats`].
pub fn apply_policy<R: Rng + ?Sized>(
    img: &AnnotatedImage,
    policy: &Policy,
    cfg: &PlacementConfig,
    rng: &mut R,
) -> AnnotatedImage {
    apply_policy_with_stats(img, policy, cfg, rng).0
}

/// With probability `1 - p` the image is returned unchanged. Otherwise every
/// selected source is pasted up to `m` times; placements that fail are
/// skipped. Pasted objects never overlap each other or existing objects.
pub fn apply_policy_with_stats<R: Rng + ?Sized>(
    img: &AnnotatedImage,
    policy: &Policy,
    cfg: &PlacementConfig,
    rng: &mut R,
) -> (AnnotatedImage, AugmentStats) {
    let mut stats = AugmentStats::default();
    if rng.random::<f64>() >= policy.p {
        return (img.clone(), stats);
    }
    stats.applied = true;
    let sources = select_sources(img, policy.op, rng);
    stats.selected = sources.len();
    if sources.is_empty() {
        return (img.clone(), stats);
    }

    let mut out = img.clone();
    let mut occupied: Vec<PixelRect> = img.instances.iter().map(|i| i.bbox.pixel_rect()).collect();
    for &src_idx in &sources {
        let source = &img.instances[src_idx];
        let rect = source.bbox.pixel_rect();
        let patch = img.crop(&rect);
        for _ in 0..policy.m {
            match sample_corner(img.width, img.height, rect.w, rect.h, &occupied, cfg, rng) {
                Ok(Some((x, y))) => {
                    out.blit(&patch, rect.w, rect.h, x, y);
                    occupied.push(PixelRect { x, y, w: rect.w, h: rect.h });
                    out.instances.push(Instance {
                        bbox: shifted(&source.bbox, &rect, x, y),
                        category: source.category.clone(),
                        difficult: false,
                        origin: Origin::Pasted,
                    });
                    stats.pasted += 1;
                }
                Ok(None) | Err(_) => {
                    debug!(
                        "image {}: no free location for a {}x{} paste",
                        img.id, rect.w, rect.h
                    );
                    stats.skipped += 1;
                }
            }
        }
    }
    (out, stats)
}

/// Draw one policy uniformly from `policies` and apply it.
pub fn apply_policy_set<R: Rng + ?Sized>(
    img: &AnnotatedImage,
    policies: &PolicySet,
    cfg: &PlacementConfig,
    rng: &mut R,
) -> Result<AnnotatedImage, AugmentError> {
    apply_policy_set_with_stats(img, policies, cfg, rng).map(|(img, _)| img)
}

pub fn apply_policy_set_with_stats<R: Rng + ?Sized>(
    img: &AnnotatedImage,
    policies: &PolicySet,
    cfg: &PlacementConfig,
    rng: &mut R,
) -> Result<(AnnotatedImage, AugmentStats), AugmentError> {
    let entry = *policies.choose(rng)?;
    Ok(apply_policy_with_stats(img, &entry.policy, cfg, rng))
}

//! Desk-scale stand-in for a trained detector.
//!
//! The oracle never sees the policy that produced a dataset. It recovers
//! what happened from the data alone: each pasted object is traced back to
//! its source by pixel identity, and the per-image pattern of sources gives
//! the operator, the fraction of augmented images and the paste count.

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EvaluatorError, LossEvaluator};
use crate::augment::{is_eligible_source, Operation, Policy};
use crate::data::{Dataset, Origin};
use crate::seed::{self, derive_seed, derive_seed_u64};

fn one() -> f64 {
    1.0
}

/// Target policy, term weights and Gaussian noise level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub op: Operation,
    pub p: f64,
    pub m: u8,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "one")]
    pub w_op: f64,
    #[serde(default = "one")]
    pub w_p: f64,
    #[serde(default = "one")]
    pub w_m: f64,
    #[serde(default)]
    pub seed: u64,
}

impl OracleSpec {
    pub fn new(target: Policy, sigma: f64) -> Self {
        OracleSpec {
            op: target.op,
            p: target.p,
            m: target.m,
            sigma,
            w_op: 1.0,
            w_p: 1.0,
            w_m: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        Policy::new(self.op, self.p, self.m).map_err(|e| e.to_string())?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(format!("sigma = {} must be finite and non-negative", self.sigma));
        }
        for (name, w) in [("w_op", self.w_op), ("w_p", self.w_p), ("w_m", self.w_m)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("{name} = {w} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleModel {
    pub fold: u32,
}

/// Statistics the oracle reads off an augmented dataset.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PasteStats {
    /// Images with at least one pasted object over images with at least
    /// one eligible source.
    pub applied_fraction: f64,
    /// Most frequent operator pattern among informative images.
    pub dominant_op: Option<Operation>,
    /// Pasted objects per distinct source object.
    pub mean_pastes: f64,
}

pub fn paste_stats(d: &Dataset) -> Result<PasteStats, EvaluatorError> {
    let mut eligible_images = 0usize;
    let mut augmented = 0usize;
    let mut votes = [0usize; 3];
    let mut total_pasted = 0usize;
    let mut total_sources = 0usize;
    for i in 0..d.len() {
        let entry = &d.images[i];
        let eligible: Vec<usize> = entry
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| is_eligible_source(inst))
            .map(|(j, _)| j)
            .collect();
        if eligible.is_empty() {
            continue;
        }
        eligible_images += 1;
        let pasted: Vec<usize> = entry
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.origin == Origin::Pasted)
            .map(|(j, _)| j)
            .collect();
        if pasted.is_empty() {
            continue;
        }
        let img = d.load_image(i)?;
        let source_patches: Vec<(usize, Vec<u8>)> = eligible
            .iter()
            .map(|&j| (j, img.crop(&img.instances[j].bbox.pixel_rect())))
            .collect();
        let mut sources = BTreeSet::new();
        for &j in &pasted {
            let inst = &img.instances[j];
            let patch = img.crop(&inst.bbox.pixel_rect());
            let found = source_patches.iter().find(|(s, src_patch)| {
                let src = &img.instances[*s];
                src.category == inst.category
                    && src.bbox.w == inst.bbox.w
                    && src.bbox.h == inst.bbox.h
                    && *src_patch == patch
            });
            if let Some((s, _)) = found {
                sources.insert(*s);
            }
        }
        if sources.is_empty() {
            continue;
        }
        augmented += 1;
        total_pasted += pasted.len();
        total_sources += sources.len();
        let k = sources.len();
        let e = eligible.len();
        if e >= 2 {
            let op = if k == e {
                Operation::AllObjects
            } else if k == 1 {
                Operation::SingleObject
            } else {
                Operation::MultipleObjects
            };
            votes[op.index()] += 1;
        }
    }
    let max_votes = votes.iter().copied().max().unwrap_or(0);
    Ok(PasteStats {
        applied_fraction: if eligible_images == 0 {
            0.0
        } else {
            augmented as f64 / eligible_images as f64
        },
        dominant_op: (max_votes > 0)
            .then(|| Operation::ALL[votes.iter().position(|&v| v == max_votes).unwrap()]),
        mean_pastes: if total_sources == 0 {
            0.0
        } else {
            total_pasted as f64 / total_sources as f64
        },
    })
}

/// Loss = `w_op * [op != op*] + w_p * |fraction - p*| + w_m * |pastes - m*| / 2`
/// plus `N(0, sigma)` noise seeded by the data, so equal inputs give equal
/// losses.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    spec: OracleSpec,
}

impl SyntheticOracle {
    pub fn new(spec: OracleSpec) -> Result<Self, EvaluatorError> {
        spec.validate().map_err(EvaluatorError::Other)?;
        Ok(SyntheticOracle { spec })
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn noiseless_loss(&self, stats: &PasteStats) -> f64 {
        let s = &self.spec;
        let op_term = if stats.dominant_op == Some(s.op) { 0.0 } else { 1.0 };
        s.w_op * op_term
            + s.w_p * (stats.applied_fraction - s.p).abs()
            + s.w_m * (stats.mean_pastes - s.m as f64).abs() / 2.0
    }

    fn fingerprint(d: &Dataset, fold: u32, base: u64) -> u64 {
        let mut h = derive_seed_u64(base, fold as u64);
        for entry in &d.images {
            h = derive_seed(h, &entry.id);
            for inst in entry.instances.iter().filter(|i| i.origin == Origin::Pasted) {
                h = derive_seed_u64(h, inst.bbox.x.to_bits());
                h = derive_seed_u64(h, inst.bbox.y.to_bits());
            }
        }
        h
    }
}

impl LossEvaluator for SyntheticOracle {
    type Model = OracleModel;

    fn train(&self, _d_m: &Dataset, fold: u32) -> Result<OracleModel, EvaluatorError> {
        Ok(OracleModel { fold })
    }

    fn loss(&self, model: &OracleModel, d: &Dataset) -> Result<f64, EvaluatorError> {
        let stats = paste_stats(d)?;
        let mut loss = self.noiseless_loss(&stats);
        if self.spec.sigma > 0.0 {
            let mut rng = seed::rng(Self::fingerprint(d, model.fold, self.spec.seed));
            let noise = Normal::new(0.0, self.spec.sigma).expect("sigma validated");
            loss += noise.sample(&mut rng);
        }
        Ok(loss)
    }

    fn concurrent(&self) -> bool {
        true
    }
}

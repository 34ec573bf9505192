//! Tree-structured Parzen Estimator over a flat, mixed search space.
//!
//! Observed trials are split into a "good" set (the `gamma` fraction with
//! the lowest loss) and a "bad" set. Each dimension gets an independent
//! density for both sets: smoothed frequencies for discrete dimensions and a
//! truncated Gaussian mixture for continuous ones. Candidates are drawn from
//! the good densities `l` and the one maximizing `log l - log g` is proposed.

use std::f64::consts::PI;
use std::io::{self, BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::augment::{Operation, Policy, PolicyEntry, Provenance};

#[derive(Debug, Clone, PartialEq)]
pub enum Dim {
    Categorical { choices: Vec<String> },
    Uniform { lo: f64, hi: f64 },
    IntUniform { lo: i64, hi: i64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamValue {
    Choice(usize),
    Real(f64),
    Int(i64),
}

pub type Point = Vec<ParamValue>;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("dimension {0}: categorical dimension has no choices")]
    NoChoices(usize),
    #[error("dimension {0}: lower bound must be below upper bound")]
    EmptyRange(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    dims: Vec<Dim>,
}

impl ParamSpace {
    pub fn new(dims: Vec<Dim>) -> Result<Self, SpaceError> {
        for (i, d) in dims.iter().enumerate() {
            match d {
                Dim::Categorical { choices } if choices.is_empty() => {
                    return Err(SpaceError::NoChoices(i))
                }
                Dim::Uniform { lo, hi } if !lo.is_finite() || !hi.is_finite() || lo >= hi => return Err(SpaceError::EmptyRange(i)),
                Dim::IntUniform { lo, hi } if lo >= hi => return Err(SpaceError::EmptyRange(i)),
                _ => {}
            }
        }
        Ok(ParamSpace { dims })
    }

    /// `[operation, p, m]`: `Categorical{single, multiple, all}`,
    /// `Uniform{0, 1}`, `IntUniform{1, 3}`.
    pub fn policy_space() -> Self {
        ParamSpace {
            dims: vec![
                Dim::Categorical {
                    choices: Operation::ALL.iter().map(|o| o.as_str().to_owned()).collect(),
                },
                Dim::Uniform { lo: 0.0, hi: 1.0 },
                Dim::IntUniform { lo: 1, hi: 3 },
            ],
        }
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn contains(&self, point: &[ParamValue]) -> bool {
        point.len() == self.dims.len()
            && self.dims.iter().zip(point).all(|(d, v)| match (d, v) {
                (Dim::Categorical { choices }, ParamValue::Choice(c)) => *c < choices.len(),
                (Dim::Uniform { lo, hi }, ParamValue::Real(x)) => lo <= x && x <= hi,
                (Dim::IntUniform { lo, hi }, ParamValue::Int(k)) => lo <= k && k <= hi,
                _ => false,
            })
    }
}

/// Map a point of [`ParamSpace::policy_space`] to a policy.
pub fn point_to_policy(point: &[ParamValue]) -> Option<Policy> {
    match point {
        [ParamValue::Choice(op), ParamValue::Real(p), ParamValue::Int(m)] => Policy::new(
            *Operation::ALL.get(*op)?,
            *p,
            u8::try_from(*m).ok()?,
        )
        .ok(),
        _ => None,
    }
}

pub fn policy_to_point(policy: &Policy) -> Point {
    vec![
        ParamValue::Choice(policy.op.index()),
        ParamValue::Real(policy.p),
        ParamValue::Int(policy.m as i64),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub params: Point,
    pub loss: f64,
    pub index: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub gamma: f64,
    pub n_startup: u32,
    pub n_candidates: u32,
    pub bandwidth_floor: f64,
    pub prior_weight: f64,
    /// Add a wide kernel (centre of the range, sd = range width, weight
    /// `prior_weight`) to every continuous density.
    #[serde(default = "enabled")]
    pub consider_prior: bool,
    /// Raise each continuous bandwidth to at least `(hi - lo) / min(100, n + 1)`.
    #[serde(default = "enabled")]
    pub adaptive_floor: bool,
    pub rng_seed: u64,
}

fn enabled() -> bool {
    true
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig {
            gamma: 0.25,
            n_startup: 10,
            n_candidates: 24,
            bandwidth_floor: 1e-3,
            prior_weight: 1.0,
            consider_prior: true,
            adaptive_floor: true,
            rng_seed: 0,
        }
    }
}

impl TpeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("gamma = {} must lie in (0, 1)", self.gamma));
        }
        if self.n_startup < 1 {
            return Err("n_startup must be at least 1".into());
        }
        if self.n_candidates < 1 {
            return Err("n_candidates must be at least 1".into());
        }
        if self.bandwidth_floor.is_nan() || self.bandwidth_floor <= 0.0 {
            return Err("bandwidth_floor must be positive".into());
        }
        if self.prior_weight.is_nan() || self.prior_weight <= 0.0 {
            return Err("prior_weight must be positive".into());
        }
        Ok(())
    }
}

/// `ceil(gamma * n)` lowest-loss trials (ties by lower index) and the rest.
pub fn split_trials(history: &[Trial], gamma: f64) -> (Vec<&Trial>, Vec<&Trial>) {
    let mut sorted: Vec<&Trial> = history.iter().collect();
    sorted.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
    let n_good = ((gamma * history.len() as f64).ceil() as usize)
        .max(1)
        .min(history.len());
    let bad = sorted.split_off(n_good);
    (sorted, bad)
}

/// One-dimensional density estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum Density {
    /// Smoothed frequencies over `lo, lo+1, ...` (choice indices use `lo = 0`).
    Discrete { lo: i64, probs: Vec<f64> },
    /// Flat density on `[lo, hi]`.
    Flat { lo: f64, hi: f64 },
    /// Weighted Gaussian kernels, each truncated to `[lo, hi]`.
    Parzen {
        lo: f64,
        hi: f64,
        centers: Vec<f64>,
        sigmas: Vec<f64>,
        /// Normalized mixture weights.
        weights: Vec<f64>,
        /// Per-kernel probability mass inside `[lo, hi]`.
        mass: Vec<f64>,
    },
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn smoothed(n_choices: usize, counts: impl Iterator<Item = usize>, prior_weight: f64) -> Vec<f64> {
    let mut tally = vec![0usize; n_choices];
    let mut n = 0usize;
    for c in counts {
        tally[c] += 1;
        n += 1;
    }
    let denom = n as f64 + prior_weight * n_choices as f64;
    tally
        .into_iter()
        .map(|c| (c as f64 + prior_weight) / denom)
        .collect()
}

/// Fit the density of `dim` to `observations` (values of that dimension).
pub fn density(dim: &Dim, observations: &[ParamValue], cfg: &TpeConfig) -> Density {
    match dim {
        Dim::Categorical { choices } => Density::Discrete {
            lo: 0,
            probs: smoothed(
                choices.len(),
                observations.iter().filter_map(|v| match v {
                    ParamValue::Choice(c) => Some(*c),
                    _ => None,
                }),
                cfg.prior_weight,
            ),
        },
        Dim::IntUniform { lo, hi } => Density::Discrete {
            lo: *lo,
            probs: smoothed(
                (hi - lo + 1) as usize,
                observations.iter().filter_map(|v| match v {
                    ParamValue::Int(k) => Some((k - lo) as usize),
                    _ => None,
                }),
                cfg.prior_weight,
            ),
        },
        Dim::Uniform { lo, hi } => {
            let mut centers: Vec<f64> = observations
                .iter()
                .filter_map(|v| match v {
                    ParamValue::Real(x) => Some(*x),
                    _ => None,
                })
                .collect();
            if centers.is_empty() {
                return Density::Flat { lo: *lo, hi: *hi };
            }
            let n = centers.len() as f64;
            let sd = if centers.len() > 1 {
                let mean = centers.iter().sum::<f64>() / n;
                (centers.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let mut bandwidth = (1.06 * sd * n.powf(-0.2)).max(cfg.bandwidth_floor);
            if cfg.adaptive_floor {
                bandwidth = bandwidth.max((hi - lo) / (n + 1.0).min(100.0));
            }
            let mut sigmas = vec![bandwidth; centers.len()];
            let mut weights = vec![1.0; centers.len()];
            if cfg.consider_prior {
                centers.push(0.5 * (lo + hi));
                sigmas.push(hi - lo);
                weights.push(cfg.prior_weight);
            }
            let total: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= total);
            let mass = centers
                .iter()
                .zip(&sigmas)
                .map(|(c, s)| normal_cdf((hi - c) / s) - normal_cdf((lo - c) / s))
                .collect();
            Density::Parzen {
                lo: *lo,
                hi: *hi,
                centers,
                sigmas,
                weights,
                mass,
            }
        }
    }
}

impl Density {
    /// Log-density (log-probability for discrete dimensions) at `value`.
    pub fn score(&self, value: &ParamValue) -> f64 {
        match (self, value) {
            (Density::Discrete { lo, probs }, ParamValue::Choice(c)) if *lo == 0 => {
                probs.get(*c).map_or(f64::NEG_INFINITY, |p| p.ln())
            }
            (Density::Discrete { lo, probs }, ParamValue::Int(k)) => usize::try_from(k - lo)
                .ok()
                .and_then(|i| probs.get(i))
                .map_or(f64::NEG_INFINITY, |p| p.ln()),
            (Density::Flat { lo, hi }, ParamValue::Real(x)) => {
                if (lo..=hi).contains(&x) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            (
                Density::Parzen {
                    lo,
                    hi,
                    centers,
                    sigmas,
                    weights,
                    mass,
                },
                ParamValue::Real(x),
            ) => {
                if !(lo..=hi).contains(&x) {
                    return f64::NEG_INFINITY;
                }
                let terms = centers.iter().enumerate().map(|(i, c)| {
                    let u = (x - c) / sigmas[i];
                    weights[i].ln() - 0.5 * u * u - (sigmas[i] * (2.0 * PI).sqrt()).ln() - mass[i].ln()
                });
                log_sum_exp(terms)
            }
            _ => f64::NEG_INFINITY,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, as_choice: bool) -> ParamValue {
        match self {
            Density::Discrete { lo, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                if as_choice {
                    ParamValue::Choice(pick)
                } else {
                    ParamValue::Int(lo + pick as i64)
                }
            }
            Density::Flat { lo, hi } => ParamValue::Real(rng.random_range(*lo..=*hi)),
            Density::Parzen {
                lo,
                hi,
                centers,
                sigmas,
                weights,
                ..
            } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = centers.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let (c, sigma) = (centers[k], sigmas[k]);
                // centers lie inside [lo, hi] and sigma <= hi - lo, so each
                // draw lands inside with probability above 1/3
                for _ in 0..1000 {
                    let z: f64 = StandardNormal.sample(rng);
                    let x = c + sigma * z;
                    if (lo..=hi).contains(&&x) {
                        return ParamValue::Real(x);
                    }
                }
                ParamValue::Real(c.clamp(*lo, *hi))
            }
        }
    }
}

pub fn sample_uniform<R: Rng + ?Sized>(space: &ParamSpace, rng: &mut R) -> Point {
    space
        .dims
        .iter()
        .map(|d| match d {
            Dim::Categorical { choices } => {
                ParamValue::Choice(rng.random_range(0..choices.len() as u32) as usize)
            }
            Dim::Uniform { lo, hi } => ParamValue::Real(rng.random_range(*lo..=*hi)),
            Dim::IntUniform { lo, hi } => ParamValue::Int(rng.random_range(*lo..=*hi)),
        })
        .collect()
}

/// Propose the next point to evaluate.
pub fn suggest<R: Rng + ?Sized>(
    space: &ParamSpace,
    history: &[Trial],
    cfg: &TpeConfig,
    rng: &mut R,
) -> Point {
    if history.len() < cfg.n_startup as usize {
        return sample_uniform(space, rng);
    }
    let (good, bad) = split_trials(history, cfg.gamma);
    let models: Vec<(Density, Density, bool)> = space
        .dims
        .iter()
        .enumerate()
        .map(|(i, dim)| {
            let obs = |set: &[&Trial]| set.iter().map(|t| t.params[i]).collect::<Vec<_>>();
            (
                density(dim, &obs(&good), cfg),
                density(dim, &obs(&bad), cfg),
                matches!(dim, Dim::Categorical { .. }),
            )
        })
        .collect();

    let mut best: Option<(f64, Point)> = None;
    for _ in 0..cfg.n_candidates {
        let cand: Point = models
            .iter()
            .map(|(l, _, is_choice)| l.sample(rng, *is_choice))
            .collect();
        let score: f64 = models
            .iter()
            .zip(&cand)
            .map(|((l, g, _), v)| l.score(v) - g.score(v))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, cand));
        }
    }
    best.expect("n_candidates >= 1").1
}

#[derive(Debug, Error)]
pub enum ObjectiveFailure<E: std::error::Error + 'static> {
    #[error("objective failed at trial {index}: {source}")]
    Failed {
        index: u64,
        #[source]
        source: E,
        history: Vec<Trial>,
    },
    #[error("objective returned non-finite loss {loss} at trial {index}")]
    NonFinite {
        index: u64,
        loss: f64,
        history: Vec<Trial>,
    },
}

impl<E: std::error::Error + 'static> ObjectiveFailure<E> {
    pub fn index(&self) -> u64 {
        match self {
            ObjectiveFailure::Failed { index, .. } | ObjectiveFailure::NonFinite { index, .. } => {
                *index
            }
        }
    }

    /// Trials completed before the failure.
    pub fn history(&self) -> &[Trial] {
        match self {
            ObjectiveFailure::Failed { history, .. }
            | ObjectiveFailure::NonFinite { history, .. } => history,
        }
    }

    pub fn into_history(self) -> Vec<Trial> {
        match self {
            ObjectiveFailure::Failed { history, .. }
            | ObjectiveFailure::NonFinite { history, .. } => history,
        }
    }
}

/// Ask/tell optimizer state.
#[derive(Debug, Clone)]
pub struct Tpe<R> {
    space: ParamSpace,
    cfg: TpeConfig,
    history: Vec<Trial>,
    rng: R,
}

impl<R: Rng> Tpe<R> {
    pub fn new(space: ParamSpace, cfg: TpeConfig, rng: R) -> Self {
        Tpe {
            space,
            cfg,
            history: Vec::new(),
            rng,
        }
    }

    pub fn ask(&mut self) -> Point {
        suggest(&self.space, &self.history, &self.cfg, &mut self.rng)
    }

    /// Record an evaluated point; returns its trial index.
    pub fn tell(&mut self, params: Point, loss: f64) -> u64 {
        let index = self.history.len() as u64;
        self.history.push(Trial {
            params,
            loss,
            index,
        });
        index
    }

    pub fn history(&self) -> &[Trial] {
        &self.history
    }

    pub fn into_history(self) -> Vec<Trial> {
        self.history
    }
}

/// Run `n_trials` suggest/evaluate rounds and return the full history.
pub fn optimize<R, F, E>(
    space: &ParamSpace,
    mut objective: F,
    n_trials: u32,
    cfg: &TpeConfig,
    rng: &mut R,
) -> Result<Vec<Trial>, ObjectiveFailure<E>>
where
    R: Rng + ?Sized,
    F: FnMut(&[ParamValue]) -> Result<f64, E>,
    E: std::error::Error + 'static,
{
    let mut history: Vec<Trial> = Vec::with_capacity(n_trials as usize);
    for index in 0..n_trials as u64 {
        let params = suggest(space, &history, cfg, rng);
        let loss = match objective(&params) {
            Ok(loss) => loss,
            Err(source) => {
                return Err(ObjectiveFailure::Failed {
                    index,
                    source,
                    history,
                })
            }
        };
        if !loss.is_finite() {
            return Err(ObjectiveFailure::NonFinite {
                index,
                loss,
                history,
            });
        }
        history.push(Trial {
            params,
            loss,
            index,
        });
    }
    Ok(history)
}

/// One line of a `trials_fold{k}.jsonl` file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub index: u64,
    pub op: Operation,
    pub p: f64,
    pub m: u8,
    pub loss: f64,
}

impl TrialRecord {
    pub fn from_trial(t: &Trial) -> Option<Self> {
        let policy = point_to_policy(&t.params)?;
        Some(TrialRecord {
            index: t.index,
            op: policy.op,
            p: policy.p,
            m: policy.m,
            loss: t.loss,
        })
    }

    pub fn policy(&self) -> Policy {
        Policy {
            op: self.op,
            p: self.p,
            m: self.m,
        }
    }

    pub fn entry(&self, fold: u32) -> PolicyEntry {
        PolicyEntry {
            policy: self.policy(),
            provenance: Some(Provenance {
                fold,
                trial: self.index,
                loss: self.loss,
            }),
        }
    }
}

pub fn write_trials_jsonl<W: Write>(mut out: W, trials: &[Trial]) -> io::Result<()> {
    for t in trials {
        let rec = TrialRecord::from_trial(t).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, "trial is not a policy point")
        })?;
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read JSON-lines trial records; blank lines are ignored.
pub fn read_trials_jsonl<R: BufRead>(input: R) -> io::Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        rec.policy()
            .validate()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        if !rec.loss.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("line {}: non-finite loss", i + 1),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

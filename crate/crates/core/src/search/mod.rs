//! K-fold augmentation policy search.
//!
//! The training set is split into K folds. For each fold a model is
//! trained once on `d_m` without augmentation; TPE then searches policies
//! whose augmented version of the held-out `d_a` gets the lowest loss under
//! that model. The top-N policies of every fold are pooled into the final
//! policy set.

mod oracle;
mod subprocess;

use std::fs;
use std::path::Path;
use std::time::Duration;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::augment::PolicySet;
use crate::augment::{
    apply_policy_with_stats, write_policy_file, PlacementConfig, Policy, PolicyEntry,
};
use crate::data::{DataError, Dataset};
use crate::seed::{self, derive_seed};
use crate::tpe::{
    self, point_to_policy, write_trials_jsonl, ObjectiveFailure, ParamSpace, TpeConfig, Trial,
    TrialRecord,
};

pub use oracle::{OracleModel, OracleSpec, SyntheticOracle};
pub use subprocess::{SubprocessEvaluator, SubprocessModel};

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("evaluator protocol error: {message}")]
    Protocol { message: String, stderr: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Other(String),
}

impl EvaluatorError {
    pub fn protocol(message: impl Into<String>, stderr: impl Into<String>) -> Self {
        EvaluatorError::Protocol {
            message: message.into(),
            stderr: stderr.into(),
        }
    }
}

/// Boundary to the detector: train on a split, then score augmented data.
/// Lower loss means the data looks more like what the model was trained on.
pub trait LossEvaluator: Sync {
    type Model: Send + Sync;

    fn train(&self, d_m: &Dataset, fold: u32) -> Result<Self::Model, EvaluatorError>;

    fn loss(&self, model: &Self::Model, d: &Dataset) -> Result<f64, EvaluatorError>;

    /// Whether `loss` may run concurrently on one model. Folds run in
    /// parallel only when this is true.
    fn concurrent(&self) -> bool {
        false
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(String),
    #[error("dataset has {images} images, fewer than k = {k}")]
    TooFewImages { images: usize, k: u32 },
    #[error("need {needed} trials, history has {available}")]
    NotEnoughTrials { needed: usize, available: usize },
    #[error("fold {fold}: evaluator failed during training: {source}")]
    Training {
        fold: u32,
        #[source]
        source: EvaluatorError,
    },
    #[error("fold {fold}, trial {trial}: evaluator failed: {source}")]
    Evaluator {
        fold: u32,
        trial: u64,
        #[source]
        source: EvaluatorError,
        history: Vec<Trial>,
    },
    #[error("fold {fold}, trial {trial}: evaluator returned non-finite loss {loss}")]
    NonFiniteLoss {
        fold: u32,
        trial: u64,
        loss: f64,
        history: Vec<Trial>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SearchError {
    /// Whether the failure came from the evaluator rather than from
    /// configuration or local I/O.
    pub fn is_evaluator_failure(&self) -> bool {
        matches!(
            self,
            SearchError::Training { .. }
                | SearchError::Evaluator { .. }
                | SearchError::NonFiniteLoss { .. }
        )
    }

    pub fn partial_history(&self) -> &[Trial] {
        match self {
            SearchError::Evaluator { history, .. } | SearchError::NonFiniteLoss { history, .. } => {
                history
            }
            _ => &[],
        }
    }

    /// Standard error captured from a failing evaluator command, if any.
    pub fn evaluator_stderr(&self) -> Option<&str> {
        match self {
            SearchError::Training { source, .. } | SearchError::Evaluator { source, .. } => match source {
                EvaluatorError::Protocol { stderr, .. } if !stderr.trim().is_empty() => Some(stderr),
                _ => None,
            },
            _ => None,
        }
    }
}

/// How the probability `p` of a candidate policy is applied to `d_a`
/// while scoring it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Exactly `round(p * |d_a|)` images, chosen at random, are augmented.
    #[default]
    Stratified,
    /// Every image is augmented regardless of `p`.
    Bypass,
    /// Each image is augmented independently with probability `p`.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub k_folds: u32,
    pub num_search: u32,
    pub top_n: u32,
    pub seed: u64,
    pub placement: PlacementConfig,
    pub tpe: TpeConfig,
    pub gate: GateMode,
    /// Upper bound on folds searched in parallel. Left out of the report so
    /// that outputs do not depend on it.
    #[serde(skip, default = "one_worker")]
    pub workers: u32,
}

fn one_worker() -> u32 {
    1
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            k_folds: 5,
            num_search: 200,
            top_n: 4,
            seed: 0,
            placement: PlacementConfig::default(),
            tpe: TpeConfig::default(),
            gate: GateMode::default(),
            workers: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let fail = |m: String| Err(SearchError::Config(m));
        if self.k_folds < 2 {
            return fail(format!("k = {} must be at least 2", self.k_folds));
        }
        if self.num_search < 1 {
            return fail("num_search must be at least 1".into());
        }
        if self.top_n < 1 {
            return fail("top_n must be at least 1".into());
        }
        if self.top_n > self.num_search {
            return fail(format!(
                "top_n = {} exceeds num_search = {}",
                self.top_n, self.num_search
            ));
        }
        if self.placement.max_attempts < 1 {
            return fail("max_attempts must be at least 1".into());
        }
        self.tpe.validate().map_err(SearchError::Config)
    }

    /// Seed of fold `k`'s random stream.
    pub fn fold_seed(&self, fold: u32) -> u64 {
        self.seed ^ fold as u64
    }
}

#[derive(Debug, Clone)]
pub struct FoldPair {
    pub d_m: Dataset,
    pub d_a: Dataset,
    pub fold_index: u32,
}

/// Shuffle image order with `seed`, cut into `k` contiguous chunks (sizes
/// differ by at most one, larger chunks first) and hold out one chunk per
/// fold.
pub fn kfold_split(d: &Dataset, k: u32, seed: u64) -> Result<Vec<FoldPair>, SearchError> {
    if k < 2 {
        return Err(SearchError::Config(format!("k = {k} must be at least 2")));
    }
    let n = d.len();
    if n < k as usize {
        return Err(SearchError::TooFewImages { images: n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));

    let k = k as usize;
    let (base, extra) = (n / k, n % k);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for i in 0..k {
        let size = base + usize::from(i < extra);
        bounds.push(bounds[i] + size);
    }
    Ok((0..k)
        .map(|i| {
            let held: Vec<usize> = order[bounds[i]..bounds[i + 1]].to_vec();
            let rest: Vec<usize> = order[..bounds[i]]
                .iter()
                .chain(&order[bounds[i + 1]..])
                .copied()
                .collect();
            FoldPair {
                d_m: d.subset(&rest),
                d_a: d.subset(&held),
                fold_index: i as u32,
            }
        })
        .collect())
}

/// Apply `policy` to a copy of `d` according to `gate`. `d` must hold its
/// pixels in memory. Unaugmented images keep their entry unchanged.
pub fn augment_dataset(
    d: &Dataset,
    policy: &Policy,
    gate: GateMode,
    placement: &PlacementConfig,
    seed: u64,
) -> Result<Dataset, DataError> {
    let n = d.len();
    let mut chosen = vec![false; n];
    let mut per_image = *policy;
    match gate {
        GateMode::Stratified => {
            let count = (policy.p * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut seed::rng(seed));
            for &i in order.iter().take(count) {
                chosen[i] = true;
            }
            per_image.p = 1.0;
        }
        GateMode::Bypass => {
            chosen.fill(true);
            per_image.p = 1.0;
        }
        GateMode::PerImage => chosen.fill(true),
    }

    let mut out = d.clone();
    for (i, entry) in out.images.iter_mut().enumerate() {
        if !chosen[i] {
            continue;
        }
        let img = d.load_image(i)?;
        let mut rng = seed::rng(derive_seed(seed, &img.id));
        let (aug, stats) = apply_policy_with_stats(&img, &per_image, placement, &mut rng);
        if stats.pasted > 0 {
            entry.instances = aug.instances;
            entry.pixels = Some(std::sync::Arc::new(aug.pixels));
        }
    }
    Ok(out)
}

/// Train once on `d_m`, then run `num_search` TPE trials scored on the
/// augmented `d_a`. Returns the full trial history.
pub fn search_fold<E: LossEvaluator, R: Rng + ?Sized>(
    fold: &FoldPair,
    evaluator: &E,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<Vec<Trial>, SearchError> {
    let fold_index = fold.fold_index;
    let model = evaluator
        .train(&fold.d_m, fold_index)
        .map_err(|source| SearchError::Training {
            fold: fold_index,
            source,
        })?;
    let d_a = fold.d_a.materialize()?;
    let space = ParamSpace::policy_space();

    // augmentation seeds come from their own stream so the TPE stream only
    // depends on the history
    let mut aug_seeds = seed::rng(derive_seed(cfg.fold_seed(fold_index), "augment"));
    let objective = |point: &[tpe::ParamValue]| -> Result<f64, EvaluatorError> {
        let policy = point_to_policy(point)
            .ok_or_else(|| EvaluatorError::Other(format!("point {point:?} is not a policy")))?;
        let trial_seed: u64 = aug_seeds.random();
        let augmented = augment_dataset(&d_a, &policy, cfg.gate, &cfg.placement, trial_seed)?;
        evaluator.loss(&model, &augmented)
    };
    tpe::optimize(&space, objective, cfg.num_search, &cfg.tpe, rng).map_err(|e| match e {
        ObjectiveFailure::Failed {
            index,
            source,
            history,
        } => SearchError::Evaluator {
            fold: fold_index,
            trial: index,
            source,
            history,
        },
        ObjectiveFailure::NonFinite {
            index,
            loss,
            history,
        } => SearchError::NonFiniteLoss {
            fold: fold_index,
            trial: index,
            loss,
            history,
        },
    })
}

/// The `n` lowest-loss trials, ties by lower index. Identical parameter
/// sets are kept.
pub fn select_top_n(history: &[Trial], n: usize) -> Result<Vec<&Trial>, SearchError> {
    if history.len() < n {
        return Err(SearchError::NotEnoughTrials {
            needed: n,
            available: history.len(),
        });
    }
    let mut sorted: Vec<&Trial> = history.iter().collect();
    sorted.sort_by(|a, b| a.loss.total_cmp(&b.loss).then(a.index.cmp(&b.index)));
    sorted.truncate(n);
    Ok(sorted)
}

#[derive(Debug)]
pub struct FoldOutcome {
    pub fold_index: u32,
    pub history: Vec<Trial>,
    /// Selected trial indices, best first. Empty for failed folds.
    pub selected: Vec<u64>,
    pub error: Option<SearchError>,
}

impl FoldOutcome {
    pub fn best_loss(&self) -> Option<f64> {
        self.history.iter().map(|t| t.loss).min_by(f64::total_cmp)
    }
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub config: SearchConfig,
    pub folds: Vec<FoldOutcome>,
}

impl SearchOutcome {
    pub fn is_complete(&self) -> bool {
        self.folds.iter().all(|f| f.error.is_none())
    }

    /// Top-N policies of every completed fold, in fold order.
    pub fn policy_set(&self) -> PolicySet {
        let mut entries = Vec::new();
        for fold in &self.folds {
            for &idx in &fold.selected {
                let trial = &fold.history[idx as usize];
                let rec = TrialRecord::from_trial(trial).expect("search trials are policies");
                entries.push(rec.entry(fold.fold_index));
            }
        }
        PolicySet::new(entries)
    }

    pub fn first_error(&self) -> Option<&SearchError> {
        self.folds.iter().find_map(|f| f.error.as_ref())
    }

    /// Write `policies.json`, `trials_fold{k}.jsonl` and `search_report.json`
    /// into `dir`. Wall-clock time is only recorded when `elapsed` is given.
    pub fn write_outputs(&self, dir: &Path, elapsed: Option<Duration>) -> Result<(), SearchError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| SearchError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for fold in &self.folds {
            let path = dir.join(format!("trials_fold{}.jsonl", fold.fold_index));
            let mut buf = Vec::new();
            write_trials_jsonl(&mut buf, &fold.history).map_err(io_err(&path))?;
            fs::write(&path, buf).map_err(io_err(&path))?;
        }
        let path = dir.join("policies.json");
        fs::write(&path, write_policy_file(&self.policy_set())).map_err(io_err(&path))?;

        let report = SearchReport {
            complete: self.is_complete(),
            config: self.config,
            folds: self
                .folds
                .iter()
                .map(|f| FoldReport {
                    fold: f.fold_index,
                    trials: f.history.len(),
                    best_loss: f.best_loss(),
                    error: f.error.as_ref().map(|e| e.to_string()),
                })
                .collect(),
            policies: self.policy_set().len(),
            wall_clock_secs: elapsed.map(|d| d.as_secs_f64()),
        };
        let path = dir.join("search_report.json");
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(())
    }
}

#[derive(Serialize)]
struct SearchReport {
    complete: bool,
    config: SearchConfig,
    folds: Vec<FoldReport>,
    policies: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_clock_secs: Option<f64>,
}

#[derive(Serialize)]
struct FoldReport {
    fold: u32,
    trials: usize,
    best_loss: Option<f64>,
    error: Option<String>,
}

fn run_fold<E: LossEvaluator>(fold: &FoldPair, evaluator: &E, cfg: &SearchConfig) -> FoldOutcome {
    let fold_index = fold.fold_index;
    let mut rng = seed::rng(cfg.fold_seed(fold_index));
    match search_fold(fold, evaluator, cfg, &mut rng) {
        Ok(history) => {
            let selected = select_top_n(&history, cfg.top_n as usize)
                .map(|top| top.iter().map(|t| t.index).collect())
                .unwrap_or_default();
            info!(
                "fold {fold_index}: {} trials, best loss {:?}",
                history.len(),
                history.iter().map(|t| t.loss).min_by(f64::total_cmp)
            );
            FoldOutcome {
                fold_index,
                history,
                selected,
                error: None,
            }
        }
        Err(e) => {
            warn!("fold {fold_index} failed: {e}");
            FoldOutcome {
                fold_index,
                history: e.partial_history().to_vec(),
                selected: Vec::new(),
                error: Some(e),
            }
        }
    }
}

/// Full search. A failed fold does not stop the others; check
/// [`SearchOutcome::is_complete`].
pub fn run_search<E: LossEvaluator>(
    d: &Dataset,
    evaluator: &E,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let folds = kfold_split(d, cfg.k_folds, cfg.seed)?;
    let outcomes: Vec<FoldOutcome> = if evaluator.concurrent() && cfg.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers as usize)
            .build()
            .map_err(|e| SearchError::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            folds
                .par_iter()
                .map(|f| run_fold(f, evaluator, cfg))
                .collect()
        })
    } else {
        folds.iter().map(|f| run_fold(f, evaluator, cfg)).collect()
    };
    Ok(SearchOutcome {
        config: *cfg,
        folds: outcomes,
    })
}

/// Plain random search over the policy space with the same fold/evaluation
/// plumbing; the baseline TPE is compared against.
pub fn random_search_fold<E: LossEvaluator, R: Rng + ?Sized>(
    fold: &FoldPair,
    evaluator: &E,
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<Vec<Trial>, SearchError> {
    let mut random_cfg = *cfg;
    random_cfg.tpe.n_startup = u32::MAX;
    search_fold(fold, evaluator, &random_cfg, rng)
}

/// Entries with provenance, as written to `policies.json`.
pub fn top_entries(history: &[Trial], n: usize, fold: u32) -> Result<Vec<PolicyEntry>, SearchError> {
    Ok(select_top_n(history, n)?
        .into_iter()
        .filter_map(|t| TrialRecord::from_trial(t).map(|r| r.entry(fold)))
        .collect())
}

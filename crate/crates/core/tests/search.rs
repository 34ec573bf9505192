mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;

use smallaug::augment::{Operation, Policy};
use smallaug::data::{load_manifest, write_manifest, Dataset, ImageEntry};
use smallaug::search::{
    kfold_split, run_search, search_fold, EvaluatorError, LossEvaluator, OracleSpec, SearchConfig, SearchError,
    SubprocessEvaluator, SyntheticOracle,
};
use smallaug::seed;
use smallaug::synth::{generate_dataset, SynthConfig};

use common::*;

fn bare_dataset(n: usize) -> Dataset {
    let images = (0..n).map(|i| ImageEntry::new(format!("img{i:03}"), 8, 8)).collect();
    Dataset::new(images, vec![]).unwrap()
}

fn ids(d: &Dataset) -> Vec<String> {
    d.images.iter().map(|e| e.id.clone()).collect()
}

struct Constant;

impl LossEvaluator for Constant {
    type Model = ();

    fn train(&self, _: &Dataset, _: u32) -> Result<(), EvaluatorError> {
        Ok(())
    }

    fn loss(&self, _: &(), _: &Dataset) -> Result<f64, EvaluatorError> {
        Ok(1.0)
    }
}

#[test]
fn seven_images_in_three_folds() {
    let folds = kfold_split(&bare_dataset(7), 3, 0).unwrap();
    let sizes: Vec<usize> = folds.iter().map(|f| f.d_a.len()).collect();
    assert_eq!(sizes, vec![3, 2, 2]);
    assert!(folds.iter().all(|f| f.d_m.len() + f.d_a.len() == 7));
}

#[test]
fn different_seeds_permute_differently() {
    let d = bare_dataset(12);
    let order = |s| kfold_split(&d, 3, s).unwrap().iter().flat_map(|f| ids(&f.d_a)).collect::<Vec<_>>();
    assert_eq!(order(4), order(4));
    assert_ne!(order(4), order(5));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn folds_are_disjoint_and_cover_the_dataset(n in 2usize..40, k in 2u32..10, s in any::<u64>()) {
        prop_assume!(n >= k as usize);
        let d = bare_dataset(n);
        let folds = kfold_split(&d, k, s).unwrap();
        prop_assert_eq!(folds.len(), k as usize);
        let mut held = BTreeSet::new();
        for f in &folds {
            let a: BTreeSet<String> = ids(&f.d_a).into_iter().collect();
            let m: BTreeSet<String> = ids(&f.d_m).into_iter().collect();
            prop_assert!(a.is_disjoint(&m));
            prop_assert_eq!(a.len() + m.len(), n);
            for id in a {
                prop_assert!(held.insert(id), "image held out twice");
            }
        }
        prop_assert_eq!(held.len(), n);
        let sizes: Vec<usize> = folds.iter().map(|f| f.d_a.len()).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }
}

#[test]
fn too_few_images_for_the_folds() {
    assert!(matches!(
        kfold_split(&bare_dataset(2), 3, 0),
        Err(SearchError::TooFewImages { images: 2, k: 3 })
    ));
}

fn oracle_run(num_search: u32, s: u64, spec: OracleSpec) -> Vec<smallaug::tpe::Trial> {
    let d = generate_dataset(&SynthConfig { seed: s, ..SynthConfig::default() }).unwrap();
    let folds = kfold_split(&d, 2, s).unwrap();
    let cfg = SearchConfig {
        num_search,
        seed: s,
        ..SearchConfig::default()
    };
    let oracle = SyntheticOracle::new(spec).unwrap();
    search_fold(&folds[0], &oracle, &cfg, &mut seed::rng(cfg.fold_seed(0))).unwrap()
}

#[test]
fn fold_search_runs_the_requested_trials() {
    let spec = OracleSpec::new(Policy::new(Operation::SingleObject, 0.5, 2).unwrap(), 0.05);
    let history = oracle_run(30, 1, spec);
    assert_eq!(history.len(), 30);
    assert!(history.iter().all(|t| t.loss.is_finite()));
    assert_eq!(oracle_run(1, 2, spec).len(), 1);
}

#[test]
fn fold_search_finds_the_planted_optimum() {
    let spec = OracleSpec {
        w_op: 0.5,
        w_p: 1.0,
        w_m: 0.0,
        ..OracleSpec::new(Policy::new(Operation::MultipleObjects, 0.6, 2).unwrap(), 0.0)
    };
    let mut hits = 0;
    for s in 0..20 {
        let history = oracle_run(60, s, spec);
        let best = history.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).unwrap();
        let policy = smallaug::tpe::point_to_policy(&best.params).unwrap();
        if policy.op == Operation::MultipleObjects && (policy.p - 0.6).abs() < 0.15 {
            hits += 1;
        }
    }
    assert!(hits >= 18, "{hits}/20 seeds found the optimum");
}

#[test]
fn selections_accumulate_over_folds() {
    let d = generate_dataset(&SynthConfig { images: 12, ..SynthConfig::default() }).unwrap();
    let oracle = SyntheticOracle::new(OracleSpec::new(Policy::new(Operation::AllObjects, 0.3, 1).unwrap(), 0.01)).unwrap();
    let cfg = SearchConfig {
        k_folds: 2,
        num_search: 12,
        top_n: 3,
        ..SearchConfig::default()
    };
    let outcome = run_search(&d, &oracle, &cfg).unwrap();
    assert!(outcome.is_complete());
    let set = outcome.policy_set();
    assert_eq!(set.entries.len(), 6);
    for e in &set.entries {
        let prov = e.provenance.unwrap();
        let trial = &outcome.folds[prov.fold as usize].history[prov.trial as usize];
        assert_eq!(trial.loss, prov.loss);
        assert_eq!(smallaug::tpe::point_to_policy(&trial.params), Some(e.policy));
    }
}

#[test]
fn constant_loss_keeps_the_first_trials() {
    let d = generate_dataset(&SynthConfig { images: 6, ..SynthConfig::default() }).unwrap();
    let cfg = SearchConfig {
        k_folds: 3,
        num_search: 5,
        top_n: 2,
        ..SearchConfig::default()
    };
    let outcome = run_search(&d, &Constant, &cfg).unwrap();
    assert!(outcome.is_complete(), "{:?}", outcome.first_error());
    for fold in &outcome.folds {
        assert_eq!(fold.selected, vec![0, 1]);
    }
    assert_eq!(outcome.policy_set().entries.len(), 6);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((entry.strip_prefix(dir).unwrap().display().to_string(), fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn search_leaves_the_dataset_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let d = generate_dataset(&SynthConfig { images: 8, ..SynthConfig::default() }).unwrap();
    let manifest = write_manifest(&d, tmp.path()).unwrap();
    let before = snapshot(tmp.path());
    let loaded = load_manifest(&manifest).unwrap();
    let oracle = SyntheticOracle::new(OracleSpec::new(Policy::new(Operation::AllObjects, 1.0, 3).unwrap(), 0.0)).unwrap();
    let cfg = SearchConfig {
        k_folds: 2,
        num_search: 6,
        top_n: 1,
        ..SearchConfig::default()
    };
    run_search(&loaded, &oracle, &cfg).unwrap();
    assert_eq!(snapshot(tmp.path()), before);
}

fn stub(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    format!("sh {}", path.display())
}

fn subprocess_case(loss_body: &str) -> (tempfile::TempDir, Result<f64, EvaluatorError>) {
    let tmp = tempfile::tempdir().unwrap();
    let train = stub(tmp.path(), "train.sh", "test -f \"$SMALLAUG_MANIFEST\" || exit 9\necho \"$SMALLAUG_OUT/model.bin\"");
    let loss = stub(tmp.path(), "loss.sh", loss_body);
    let eval = SubprocessEvaluator::new(train, loss, tmp.path().join("work"));
    let d = generate_dataset(&SynthConfig { images: 3, ..SynthConfig::default() }).unwrap();
    let model = eval.train(&d, 0).unwrap();
    assert!(model.artifact.ends_with("model.bin"));
    let result = eval.loss(&model, &d);
    (tmp, result)
}

#[test]
fn subprocess_loss_is_read_from_the_last_line() {
    let (_tmp, result) = subprocess_case("echo progress\necho '{\"loss\": 0.5}'");
    assert_eq!(result.unwrap(), 0.5);
}

#[test]
fn subprocess_failure_captures_stderr() {
    let (_tmp, result) = subprocess_case("echo 'out of memory' >&2\nexit 1");
    match result {
        Err(EvaluatorError::Protocol { stderr, .. }) => assert!(stderr.contains("out of memory")),
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

#[test]
fn subprocess_non_finite_loss_is_rejected() {
    let (_tmp, result) = subprocess_case("echo '{\"loss\": \"NaN\"}'");
    match result {
        Err(EvaluatorError::Protocol { message, .. }) => assert!(message.contains("non-finite"), "{message}"),
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

#[test]
fn subprocess_sees_the_model_path() {
    let (_tmp, result) = subprocess_case("case \"$SMALLAUG_MODEL\" in */model.bin) echo '{\"loss\": 0.25}';; *) exit 3;; esac");
    assert_eq!(result.unwrap(), 0.25);
}

#[test]
fn planted_loss_has_a_unique_grid_optimum() {
    assert_eq!(grid_optimum(planted_loss).0, Operation::SingleObject);
}

use proptest::prelude::*;
use rand::Rng;

use smallaug::seed;
use smallaug::tpe::{density, split_trials, suggest, Dim, ParamSpace, ParamValue, TpeConfig, Trial};

/// Composite Simpson rule over `[lo, hi]` with `intervals` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
    let h = (hi - lo) / intervals as f64;
    let mut sum = f(lo) + f(hi);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(lo + i as f64 * h);
    }
    sum * h / 3.0
}

fn op_index(space: &ParamSpace, name: &str) -> usize {
    match &space.dims()[0] {
        Dim::Categorical { choices } => choices.iter().position(|c| c == name).unwrap(),
        other => panic!("unexpected first dimension {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn continuous_density_integrates_to_one(
        (lo, width) in (-5.0..5.0f64, 0.5..10.0f64),
        fractions in proptest::collection::vec(0.0..=1.0f64, 0..30),
        safeguards in any::<bool>(),
    ) {
        let hi = lo + width;
        let dim = Dim::Uniform { lo, hi };
        let obs: Vec<ParamValue> = fractions.iter().map(|f| ParamValue::Real(lo + f * width)).collect();
        let cfg = TpeConfig { consider_prior: safeguards, adaptive_floor: safeguards, ..TpeConfig::default() };
        let d = density(&dim, &obs, &cfg);
        let mass = simpson(|x| d.score(&ParamValue::Real(x)).exp(), lo, hi, 200_000);
        prop_assert!((mass - 1.0).abs() < 1e-6, "mass {}", mass);
    }

    #[test]
    fn discrete_density_sums_to_one(
        obs in proptest::collection::vec(0usize..5, 0..30),
        prior_weight in 0.1..5.0f64,
    ) {
        let cfg = TpeConfig { prior_weight, ..TpeConfig::default() };
        let cat = Dim::Categorical { choices: (0..5).map(|i| i.to_string()).collect() };
        let d = density(&cat, &obs.iter().map(|&c| ParamValue::Choice(c)).collect::<Vec<_>>(), &cfg);
        let total: f64 = (0..5).map(|c| d.score(&ParamValue::Choice(c)).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);

        let int = Dim::IntUniform { lo: -2, hi: 2 };
        let d = density(&int, &obs.iter().map(|&c| ParamValue::Int(c as i64 - 2)).collect::<Vec<_>>(), &cfg);
        let total: f64 = (-2..=2).map(|k| d.score(&ParamValue::Int(k)).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_respects_gamma_and_order(
        losses in proptest::collection::vec(0u32..1000, 1..60),
        gamma in 0.05..0.95f64,
    ) {
        let history: Vec<Trial> = losses
            .iter()
            .enumerate()
            .map(|(i, &l)| Trial { params: vec![], loss: l as f64, index: i as u64 })
            .collect();
        let (good, bad) = split_trials(&history, gamma);
        let expected = ((gamma * history.len() as f64).ceil() as usize).clamp(1, history.len());
        prop_assert_eq!(good.len(), expected);
        prop_assert_eq!(good.len() + bad.len(), history.len());
        let worst_good = good.iter().map(|t| t.loss).fold(f64::MIN, f64::max);
        let best_bad = bad.iter().map(|t| t.loss).fold(f64::MAX, f64::min);
        prop_assert!(worst_good <= best_bad);
    }
}

#[test]
fn startup_draws_are_uniform_over_operations() {
    let space = ParamSpace::policy_space();
    let cfg = TpeConfig::default();
    let mut rng = seed::rng(3);
    let n = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let point = suggest(&space, &[], &cfg, &mut rng);
        assert!(space.contains(&point));
        match point[0] {
            ParamValue::Choice(c) => counts[c] += 1,
            other => panic!("operation drawn as {other:?}"),
        }
    }
    let expected = n as f64 / 3.0;
    let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for c in counts {
        assert!((c as f64 - expected).abs() <= 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn suggestion_follows_the_good_operation() {
    let space = ParamSpace::policy_space();
    let single = op_index(&space, "single");
    let all = op_index(&space, "all");
    let cfg = TpeConfig::default();
    let mut hist_rng = seed::rng(17);
    let history: Vec<Trial> = (0..40)
        .map(|i| {
            let good = i % 4 == 0;
            Trial {
                params: vec![
                    ParamValue::Choice(if good { single } else { all }),
                    ParamValue::Real(hist_rng.random_range(0.0..=1.0)),
                    ParamValue::Int(hist_rng.random_range(1..=3)),
                ],
                loss: if good { 0.1 } else { 0.9 } + hist_rng.random_range(0.0..0.01),
                index: i,
            }
        })
        .collect();
    let hits = (0..1000u64)
        .filter(|&s| suggest(&space, &history, &cfg, &mut seed::rng(s))[0] == ParamValue::Choice(single))
        .count();
    assert!(hits >= 900, "single suggested {hits}/1000 times");
}

#[test]
fn suggestion_is_deterministic() {
    let space = ParamSpace::policy_space();
    let cfg = TpeConfig::default();
    let mut rng = seed::rng(5);
    let history: Vec<Trial> = (0..25)
        .map(|i| {
            let params = suggest(&space, &[], &cfg, &mut rng);
            Trial { params, loss: rng.random(), index: i }
        })
        .collect();
    let a = suggest(&space, &history, &cfg, &mut seed::rng(99));
    let b = suggest(&space, &history, &cfg, &mut seed::rng(99));
    assert_eq!(a, b);
}

use timba::masking::Mask;
use timba::pipeline::{impute, metrics, Grid, Normalizer};
use timba::Error;

mod common;

fn setup() -> (timba::model::Timba, Grid, Mask, Normalizer, timba::NdArray) {
    let model = common::tiny_model(1);
    // 15 steps: two full windows plus an end-aligned tail
    let truth = common::series(3, 15);
    let observed = common::holes(3, 15, 4);
    let z = Normalizer::fit(&truth, &observed, 0..15);
    let a_hat = common::graph(3).normalized;
    (model, truth, observed, z, a_hat)
}

#[test]
fn observed_entries_pass_through_bit_identical() {
    let (model, truth, observed, z, a_hat) = setup();
    let res = impute(&model, &truth, &observed, &z, &a_hat, 3, 5).unwrap();
    for n in 0..3 {
        for s in 0..15 {
            if observed.get(n, s) {
                assert_eq!(res.imputed.get(n, s).to_bits(), truth.get(n, s).to_bits());
            } else {
                assert!(res.imputed.get(n, s).is_finite());
            }
        }
    }
    assert_eq!(res.samples.len(), 3);
}

#[test]
fn fixed_seed_replays_exactly() {
    let (model, truth, observed, z, a_hat) = setup();
    let targets = observed.not();
    let a = impute(&model, &truth, &observed, &z, &a_hat, 4, 9).unwrap().score(&truth, &targets).unwrap();
    let b = impute(&model, &truth, &observed, &z, &a_hat, 4, 9).unwrap().score(&truth, &targets).unwrap();
    assert_eq!(a.imputed, b.imputed);
    assert_eq!(a.metrics, b.metrics);
    let c = impute(&model, &truth, &observed, &z, &a_hat, 4, 10).unwrap();
    assert_ne!(a.imputed, c.imputed);
}

#[test]
fn metrics_ignore_non_target_entries() {
    let (model, truth, observed, z, a_hat) = setup();
    let targets = observed.not();
    let res = impute(&model, &truth, &observed, &z, &a_hat, 2, 1).unwrap();
    let base = metrics(&res.imputed, &truth, &targets).unwrap();
    let mut moved = res.imputed.clone();
    let mut truth2 = truth.clone();
    for n in 0..3 {
        for s in 0..15 {
            if !targets.get(n, s) {
                moved.set(n, s, moved.get(n, s) + 100.0);
                truth2.set(n, s, -50.0);
            }
        }
    }
    assert_eq!(metrics(&moved, &truth2, &targets).unwrap(), base);
}

#[test]
fn zero_draws_and_empty_targets_are_errors() {
    let (model, truth, observed, z, a_hat) = setup();
    assert!(impute(&model, &truth, &observed, &z, &a_hat, 0, 1).is_err());
    let none = Mask::full(3, 15, false);
    assert!(matches!(metrics(&truth, &truth, &none), Err(Error::EmptyTargets)));
}

#[test]
fn shape_mismatch_is_rejected() {
    let (model, _, _, z, a_hat) = setup();
    let wrong = common::series(2, 15);
    assert!(impute(&model, &wrong, &Mask::full(2, 15, true), &z, &a_hat, 1, 0).is_err());
}

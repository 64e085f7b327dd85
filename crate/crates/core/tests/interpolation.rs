use proptest::prelude::*;
use proptest::test_runner::RngSeed;

use timba::masking::Mask;
use timba::pipeline::{linear_interpolate, Grid};

/// Fills each entry from the nearest observed neighbours on either side,
/// searched independently per entry.
fn oracle(values: &Grid, observed: &Mask) -> Grid {
    let mut out = values.clone();
    for n in 0..values.nodes() {
        let obs: Vec<usize> = (0..values.steps()).filter(|&s| observed.get(n, s)).collect();
        for s in 0..values.steps() {
            if observed.get(n, s) {
                continue;
            }
            let left = obs.iter().rev().find(|&&o| o < s);
            let right = obs.iter().find(|&&o| o > s);
            let v = match (left, right) {
                (Some(&a), Some(&b)) => {
                    let w = (s - a) as f64 / (b - a) as f64;
                    values.get(n, a) + w * (values.get(n, b) - values.get(n, a))
                }
                (Some(&a), None) => values.get(n, a),
                (None, Some(&b)) => values.get(n, b),
                (None, None) => 0.0,
            };
            out.set(n, s, v);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig {
        rng_seed: RngSeed::Fixed(6),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn matches_per_gap_line_oracle(
        (nodes, steps, vals, bits) in (1usize..4, 1usize..25).prop_flat_map(|(n, s)| (
            Just(n),
            Just(s),
            prop::collection::vec(-10.0f64..10.0, n * s),
            prop::collection::vec(any::<bool>(), n * s),
        ))
    ) {
        let g = Grid::new(nodes, steps, vals).unwrap();
        let m = Mask::new(nodes, steps, bits).unwrap();
        let got = linear_interpolate(&g, &m);
        let want = oracle(&g, &m);
        for (a, b) in got.values.values().iter().zip(want.values()) {
            prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let empty: Vec<usize> = (0..nodes).filter(|&n| (0..steps).all(|s| !m.get(n, s))).collect();
        prop_assert_eq!(got.empty_nodes, empty);
    }
}

#[test]
fn observed_entries_are_untouched() {
    let g = Grid::new(1, 5, vec![1.0, 7.0, 3.0, 9.0, 5.0]).unwrap();
    let m = Mask::new(1, 5, vec![true, false, true, false, true]).unwrap();
    let out = linear_interpolate(&g, &m).values;
    assert_eq!(out.values(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
}

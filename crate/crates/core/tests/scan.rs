use timba::ssm::{scan_equivalence, scan_parallel, scan_sequential, scan_states_parallel, scan_states_sequential, DiscretizedSteps};
use timba::tape::{ScanMode, Tape};

mod common;

#[test]
fn parallel_scan_matches_sequential_across_lengths() {
    let check = scan_equivalence(11, 100, 16, &[8, 64, 256, 1024]);
    assert_eq!(check.instances, 100);
    assert!(check.max_dev < 1e-9, "{check:?}");
}

#[test]
fn first_chunk_is_bitwise_sequential() {
    let (l, n) = (40, 3);
    let a: Vec<f64> = (0..l * n).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37).sin()).collect();
    let b: Vec<f64> = (0..l * n).map(|i| ((i as f64) * 1.3).cos()).collect();
    let seq = scan_states_sequential(&a, &b, n);
    let par = scan_states_parallel(&a, &b, n, 16);
    assert_eq!(&seq[..16 * n], &par[..16 * n]);
    // a single chunk covering everything is the sequential scan
    assert_eq!(seq, scan_states_parallel(&a, &b, n, l));
}

#[test]
fn readout_agrees_for_chunk_of_one() {
    let (l, n) = (9, 2);
    let a = [-1.0, -2.0];
    let delta: Vec<f64> = (0..l).map(|t| 0.01 + 0.01 * t as f64).collect();
    let bc: Vec<f64> = (0..l * n).map(|i| (i as f64 * 0.7).sin()).collect();
    let x: Vec<f64> = (0..l).map(|t| (t as f64).cos()).collect();
    let steps = DiscretizedSteps::from_continuous(&a, &delta, &bc, &bc, &x);
    let s = scan_sequential(&steps, &x, 0.5);
    let p = scan_parallel(&steps, &x, 0.5, 1);
    assert!(s.iter().zip(&p).all(|(u, v)| (u - v).abs() < 1e-12));
}

#[test]
fn tape_scan_modes_agree_in_value_and_gradient() {
    let (bsz, l, c, n) = (2, 13, 3, 4);
    let run = |mode: ScanMode| {
        let mut t = Tape::new();
        let x = t.param(common::randn(&[bsz, l, c], 1));
        let delta = t.param(common::randn(&[bsz, l, c], 2).map(|v| 0.05 + 0.02 * v.abs()));
        let b = t.param(common::randn(&[bsz, l, n], 4));
        let cc = t.param(common::randn(&[bsz, l, n], 5));
        let a_log = t.param(common::randn(&[c, n], 3));
        let d = t.param(common::randn(&[c], 6));
        let y = t.selective_scan(x, delta, b, cc, a_log, d, mode).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        (t.value(y).clone(), g.wrt_all(&[x, delta, b, cc, a_log, d]))
    };
    let (ys, gs) = run(ScanMode::Sequential);
    let (yp, gp) = run(ScanMode::Parallel(4));
    assert!(ys.max_abs_diff(&yp) < 1e-12);
    for (a, b) in gs.iter().zip(&gp) {
        assert!(a.max_abs_diff(b) < 1e-10);
    }
}

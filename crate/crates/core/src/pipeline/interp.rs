//! Linear interpolation in time, the conditioner fed to the prior encoder
//! and the Lin-ITP baseline.

use crate::masking::Mask;

use super::data::Grid;

/// Interpolated grid plus the nodes that had nothing to interpolate from.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub values: Grid,
    /// Nodes without any observed entry; these rows are zero-filled.
    pub empty_nodes: Vec<usize>,
}

/// Per node, joins observed neighbours with straight lines and extends the
/// first and last observed values as constants to the edges. Callers
/// working on whole series should warn about [`Interpolation::empty_nodes`].
pub fn linear_interpolate(values: &Grid, observed: &Mask) -> Interpolation {
    let (n, l) = (values.nodes(), values.steps());
    assert_eq!((observed.nodes(), observed.steps()), (n, l), "mask does not match the grid");
    let mut out = Grid::zeros(n, l);
    let mut empty_nodes = Vec::new();
    for node in 0..n {
        let obs: Vec<usize> = (0..l).filter(|&s| observed.get(node, s)).collect();
        let (Some(&first), Some(&last)) = (obs.first(), obs.last()) else {
            empty_nodes.push(node);
            continue;
        };
        for s in 0..=first {
            out.set(node, s, values.get(node, first));
        }
        for s in last..l {
            out.set(node, s, values.get(node, last));
        }
        for pair in obs.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (va, vb) = (values.get(node, a), values.get(node, b));
            out.set(node, a, va);
            for s in a + 1..b {
                let w = (s - a) as f64 / (b - a) as f64;
                out.set(node, s, va + w * (vb - va));
            }
            out.set(node, b, vb);
        }
    }
    Interpolation { values: out, empty_nodes }
}

//! Series containers, splits, normalization, and the on-disk dataset format.
//!
//! Dataset CSV: a header row of node ids, then one row per time step with
//! one column per node; an empty cell is a missing value. The companion
//! adjacency file is a headerless `N x N` numeric CSV grid.

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::tensor::NdArray;

/// Real-valued `[nodes, steps]` grid, node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    nodes: usize,
    steps: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(nodes: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nodes * steps {
            return Err(Error::Data(format!("{} values for a {nodes}x{steps} grid", values.len())));
        }
        Ok(Self { nodes, steps, values })
    }

    pub fn zeros(nodes: usize, steps: usize) -> Self {
        Self { nodes, steps, values: vec![0.0; nodes * steps] }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, node: usize, step: usize) -> f64 {
        self.values[node * self.steps + step]
    }

    pub fn set(&mut self, node: usize, step: usize, v: f64) {
        self.values[node * self.steps + step] = v;
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.values[node * self.steps..(node + 1) * self.steps]
    }

    pub fn window(&self, start: usize, len: usize) -> Grid {
        let mut values = Vec::with_capacity(self.nodes * len);
        for n in 0..self.nodes {
            values.extend_from_slice(&self.row(n)[start..start + len]);
        }
        Grid { nodes: self.nodes, steps: len, values }
    }

    /// Writes `w` into columns `[start, start + w.steps())` where `filter` is set.
    pub fn paste(&mut self, start: usize, w: &Grid, filter: impl Fn(usize, usize) -> bool) {
        for n in 0..self.nodes {
            for s in 0..w.steps {
                if filter(n, start + s) {
                    self.set(n, start + s, w.get(n, s));
                }
            }
        }
    }

    pub fn to_ndarray(&self) -> NdArray {
        NdArray::new(vec![self.nodes, self.steps], self.values.clone()).expect("shape")
    }
}

/// Contiguous train/validation/test ranges along time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// 70% / 10% / 20% of `steps`.
    pub fn standard(steps: usize) -> Self {
        Self::fractions(steps, 0.7, 0.1)
    }

    pub fn fractions(steps: usize, train: f64, val: f64) -> Self {
        let a = (steps as f64 * train).round() as usize;
        let b = ((steps as f64 * (train + val)).round() as usize).max(a);
        Self { train: 0..a, val: a..b, test: b..steps }
    }
}

/// Per-node standardization fitted on observed training entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(values: &Grid, observed: &Mask, range: Range<usize>) -> Self {
        let mut mean = Vec::with_capacity(values.nodes);
        let mut std = Vec::with_capacity(values.nodes);
        for n in 0..values.nodes {
            let obs: Vec<f64> = range.clone().filter(|&s| observed.get(n, s)).map(|s| values.get(n, s)).collect();
            if obs.is_empty() {
                mean.push(0.0);
                std.push(1.0);
                continue;
            }
            let m = obs.iter().sum::<f64>() / obs.len() as f64;
            let v = obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / obs.len() as f64;
            mean.push(m);
            std.push(if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn identity(nodes: usize) -> Self {
        Self { mean: vec![0.0; nodes], std: vec![1.0; nodes] }
    }

    pub fn normalize(&self, g: &Grid) -> Grid {
        let mut out = g.clone();
        for n in 0..g.nodes {
            for s in 0..g.steps {
                out.set(n, s, (g.get(n, s) - self.mean[n]) / self.std[n]);
            }
        }
        out
    }

    pub fn denormalize(&self, g: &Grid) -> Grid {
        let mut out = g.clone();
        for n in 0..g.nodes {
            for s in 0..g.steps {
                out.set(n, s, g.get(n, s) * self.std[n] + self.mean[n]);
            }
        }
        out
    }
}

/// Reads a dataset CSV into node ids, values (0 where missing), and the observed mask.
pub fn read_dataset_csv(path: &Path) -> Result<(Vec<String>, Grid, Mask)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let ids: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let n = ids.len();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::Data(format!("row {} has {} cells, expected {n}", line + 2, rec.len())));
        }
        let row = rec
            .iter()
            .map(|c| {
                let c = c.trim();
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|e| Error::Data(format!("row {}: {c:?}: {e}", line + 2)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let steps = rows.len();
    let mut grid = Grid::zeros(n, steps);
    let mut mask = Mask::full(n, steps, false);
    for (s, row) in rows.iter().enumerate() {
        for (node, v) in row.iter().enumerate() {
            if let Some(v) = v {
                grid.set(node, s, *v);
                mask.set(node, s, true);
            }
        }
    }
    Ok((ids, grid, mask))
}

pub fn write_dataset_csv(path: &Path, ids: &[String], values: &Grid, observed: &Mask) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ids)?;
    for s in 0..values.steps {
        let row: Vec<String> = (0..values.nodes)
            .map(|n| if observed.get(n, s) { format!("{}", values.get(n, s)) } else { String::new() })
            .collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_adjacency_csv(path: &Path) -> Result<NdArray> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for c in rec.iter() {
            data.push(c.trim().parse::<f64>().map_err(|e| Error::Data(format!("adjacency: {c:?}: {e}")))?);
        }
        rows += 1;
    }
    if rows * rows != data.len() {
        return Err(Error::Data(format!("adjacency is not square: {rows} rows, {} values", data.len())));
    }
    Ok(NdArray::new(vec![rows, rows], data)?)
}

pub fn write_adjacency_csv(path: &Path, adj: &NdArray) -> Result<()> {
    let n = adj.shape()[0];
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{}", adj.get(&[i, j]))).collect();
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_fractions() {
        let s = Split::standard(100);
        assert_eq!((s.train, s.val, s.test), (0..70, 70..80, 80..100));
    }

    #[test]
    fn csv_round_trip_preserves_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let g = Grid::new(2, 3, vec![1.5, 2.0, -3.25, 0.1, 0.2, 0.3]).unwrap();
        let mut m = Mask::full(2, 3, true);
        m.set(1, 1, false);
        write_dataset_csv(&path, &["a".into(), "b".into()], &g, &m).unwrap();
        let (ids, g2, m2) = read_dataset_csv(&path).unwrap();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(m2, m);
        assert_eq!(g2.get(0, 2), -3.25);
        assert_eq!(g2.get(1, 1), 0.0);
    }

    #[test]
    fn normalizer_inverts() {
        let g = Grid::new(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let m = Mask::full(2, 4, true);
        let z = Normalizer::fit(&g, &m, 0..4);
        assert_eq!(z.std[1], 1.0);
        let back = z.denormalize(&z.normalize(&g));
        assert!(back.values().iter().zip(g.values()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

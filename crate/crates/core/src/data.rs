//! Signal and distance loading, normalization, splitting and windowing.
//!
//! Signals CSV: one row per 5-minute step, one column per sensor, optional
//! header row, blank cells for missing readings. Distances CSV: rows of
//! `from,to,distance` with an optional header.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Raw signals `(T_total, N, F)` plus a missing-reading mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signals {
    pub values: Tensor,
    /// `true` where the reading was missing and imputed.
    pub missing: Vec<bool>,
}

impl Signals {
    pub fn new(values: Tensor, missing: Vec<bool>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Data(format!("signals must be (T, N, F), got {:?}", values.shape())));
        }
        if missing.len() != values.len() {
            return Err(Error::Data("mask length does not match the signals".into()));
        }
        Ok(Self { values, missing })
    }

    /// Fully observed signals from `rows[t][v]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let values = Tensor::matrix(rows)?.reshape(&[rows.len(), n, 1])?;
        let len = values.len();
        Self::new(values, vec![false; len])
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    /// Series of feature `f` at node `v` over `range`.
    pub fn series(&self, v: usize, f: usize, range: Range<usize>) -> Vec<f64> {
        range.map(|t| self.values.get(&[t, v, f])).collect()
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_records(text: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(out)
}

fn is_header(cells: &[String]) -> bool {
    cells.iter().any(|c| !c.is_empty() && c.parse::<f64>().is_err())
}

/// Parses signals CSV text. Blank cells are forward-filled from the previous
/// step; a blank in the first step takes the column mean.
pub fn parse_signals(text: &str) -> Result<Signals> {
    let mut records = csv_records(text)?;
    if records.first().is_some_and(|(_, cells)| is_header(cells)) {
        records.remove(0);
    }
    let Some((_, first)) = records.first() else {
        return Err(Error::Data("signals file has no data rows".into()));
    };
    let n = first.len();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::with_capacity(records.len());
    for (line, cells) in &records {
        if cells.len() != n {
            return Err(Error::Parse {
                line: *line,
                message: format!("expected {n} columns, found {}", cells.len()),
            });
        }
        let row = cells
            .iter()
            .enumerate()
            .map(|(col, c)| {
                if c.is_empty() {
                    return Ok(None);
                }
                match c.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(Error::Parse {
                        line: *line,
                        message: format!("column {} holds non-numeric value {c:?}", col + 1),
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }

    let t_total = rows.len();
    let mut values = Tensor::zeros(&[t_total, n, 1]);
    let mut missing = vec![false; t_total * n];
    for v in 0..n {
        let observed: Vec<f64> = rows.iter().filter_map(|r| r[v]).collect();
        if observed.is_empty() {
            return Err(Error::Data(format!("sensor column {} has no readings", v + 1)));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let mut last = mean;
        for (t, row) in rows.iter().enumerate() {
            let x = match row[v] {
                Some(x) => x,
                None => {
                    missing[t * n + v] = true;
                    last
                }
            };
            values.set(&[t, v, 0], x);
            last = x;
        }
    }
    Signals::new(values, missing)
}

pub fn load_signals(path: impl AsRef<Path>) -> Result<Signals> {
    parse_signals(&read_text(path.as_ref())?)
}

/// Road-network edges `(from, to, distance)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorDistances {
    pub edges: Vec<(usize, usize, f64)>,
}

impl SensorDistances {
    /// Population standard deviation of the listed distances.
    pub fn std_dev(&self) -> f64 {
        let d: Vec<f64> = self.edges.iter().map(|e| e.2).collect();
        let (_, std) = mean_std(&d);
        std
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("from,to,distance\n");
        for (i, j, d) in &self.edges {
            s.push_str(&format!("{i},{j},{d}\n"));
        }
        s
    }
}

pub fn parse_distances(text: &str, n_nodes: usize) -> Result<SensorDistances> {
    let mut records = csv_records(text)?;
    if records.first().is_some_and(|(_, cells)| is_header(cells)) {
        records.remove(0);
    }
    let mut edges = Vec::with_capacity(records.len());
    for (line, cells) in records {
        let parse_err = |message: String| Error::Parse { line, message };
        if cells.len() != 3 {
            return Err(parse_err(format!("expected from,to,distance, found {} fields", cells.len())));
        }
        let idx = |c: &str| {
            c.parse::<usize>()
                .map_err(|_| parse_err(format!("invalid sensor index {c:?}")))
                .and_then(|i| {
                    if i < n_nodes {
                        Ok(i)
                    } else {
                        Err(parse_err(format!("sensor index {i} out of range for {n_nodes} sensors")))
                    }
                })
        };
        let (i, j) = (idx(&cells[0])?, idx(&cells[1])?);
        let d = cells[2]
            .parse::<f64>()
            .ok()
            .filter(|d| d.is_finite() && *d >= 0.0)
            .ok_or_else(|| parse_err(format!("invalid distance {:?}", cells[2])))?;
        edges.push((i, j, d));
    }
    Ok(SensorDistances { edges })
}

pub fn load_distances(path: impl AsRef<Path>, n_nodes: usize) -> Result<SensorDistances> {
    parse_distances(&read_text(path.as_ref())?, n_nodes)
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Time ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Part {
    Train,
    Val,
    Test,
}

impl Split {
    /// Chronological 6:2:2 split of `t_total` steps.
    pub fn ratio_622(t_total: usize) -> Self {
        let train = t_total * 6 / 10;
        let val = t_total * 2 / 10;
        Self {
            train: 0..train,
            val: train..train + val,
            test: train + val..t_total,
        }
    }

    pub fn range(&self, part: Part) -> Range<usize> {
        match part {
            Part::Train => self.train.clone(),
            Part::Val => self.val.clone(),
            Part::Test => self.test.clone(),
        }
    }
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScore {
    /// Fits on the observed entries of `rows` (all nodes pooled per feature).
    pub fn fit(signals: &Signals, rows: Range<usize>) -> Result<Self> {
        let (n, f) = (signals.nodes(), signals.features());
        let mut mean = Vec::with_capacity(f);
        let mut std = Vec::with_capacity(f);
        for feat in 0..f {
            let mut xs = Vec::new();
            for t in rows.clone() {
                for v in 0..n {
                    let i = (t * n + v) * f + feat;
                    if !signals.missing[i] {
                        xs.push(signals.values.data()[i]);
                    }
                }
            }
            let (m, s) = mean_std(&xs);
            if !(s > 0.0) {
                return Err(Error::Data(format!("feature {feat} has zero variance on the training split")));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self { mean, std })
    }

    /// Applies to any tensor whose last axis is the feature axis.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| v * s + m)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let width = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let k = i % width;
            *v = f(*v, self.mean[k], self.std[k]);
        }
        out
    }
}

/// Start offsets of the stride-1 windows inside `range`: each window reads
/// `window` input steps followed by `horizon` target steps.
pub fn make_windows(range: Range<usize>, window: usize, horizon: usize) -> Result<Vec<usize>> {
    let need = window + horizon;
    if range.len() < need {
        return Err(Error::Data(format!(
            "range of {} steps is shorter than window + horizon = {need}",
            range.len()
        )));
    }
    Ok((range.start..=range.end - need).collect())
}

/// One batch of windows in `(batch, N, T, F)` layout.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    /// Normalized targets `(batch, N, S, F)`.
    pub targets: Tensor,
    /// Targets on the original scale.
    pub targets_raw: Tensor,
    /// Input windows on the original scale.
    pub inputs_raw: Tensor,
    /// `true` where the target was observed.
    pub observed: Vec<bool>,
}

/// Normalized, split, windowed dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficDataset {
    pub signals: Signals,
    pub normalized: Tensor,
    pub split: Split,
    pub stats: ZScore,
    pub window: usize,
    pub horizon: usize,
}

impl TrafficDataset {
    pub fn new(signals: Signals, window: usize, horizon: usize) -> Result<Self> {
        let split = Split::ratio_622(signals.steps());
        for part in [Part::Train, Part::Val, Part::Test] {
            make_windows(split.range(part), window, horizon)?;
        }
        let stats = ZScore::fit(&signals, split.train.clone())?;
        let normalized = stats.forward(&signals.values);
        Ok(Self {
            signals,
            normalized,
            split,
            stats,
            window,
            horizon,
        })
    }

    /// Uses given statistics instead of fitting them, e.g. those stored with
    /// a trained model.
    pub fn with_stats(signals: Signals, window: usize, horizon: usize, stats: ZScore) -> Result<Self> {
        if stats.mean.len() != signals.features() {
            return Err(Error::Data(format!(
                "statistics cover {} features, signals have {}",
                stats.mean.len(),
                signals.features()
            )));
        }
        let mut ds = Self::new(signals, window, horizon)?;
        ds.normalized = stats.forward(&ds.signals.values);
        ds.stats = stats;
        Ok(ds)
    }

    pub fn nodes(&self) -> usize {
        self.signals.nodes()
    }

    pub fn features(&self) -> usize {
        self.signals.features()
    }

    pub fn windows(&self, part: Part) -> Vec<usize> {
        make_windows(self.split.range(part), self.window, self.horizon).expect("checked at construction")
    }

    /// Node series over the training split, for temporal graph construction.
    pub fn training_series(&self, feature: usize) -> Vec<Vec<f64>> {
        (0..self.nodes())
            .map(|v| self.signals.series(v, feature, self.split.train.clone()))
            .collect()
    }

    /// Gathers windows starting at `starts`.
    pub fn batch(&self, starts: &[usize]) -> Batch {
        let (n, f) = (self.nodes(), self.features());
        let (t, s) = (self.window, self.horizon);
        let b = starts.len();
        let mut inputs = Tensor::zeros(&[b, n, t, f]);
        let mut inputs_raw = Tensor::zeros(&[b, n, t, f]);
        let mut targets = Tensor::zeros(&[b, n, s, f]);
        let mut targets_raw = Tensor::zeros(&[b, n, s, f]);
        let mut observed = vec![true; b * n * s * f];
        let norm = self.normalized.data();
        let raw = self.signals.values.data();
        for (bi, &start) in starts.iter().enumerate() {
            for v in 0..n {
                for step in 0..t + s {
                    for k in 0..f {
                        let src = ((start + step) * n + v) * f + k;
                        if step < t {
                            let dst = ((bi * n + v) * t + step) * f + k;
                            inputs.data_mut()[dst] = norm[src];
                            inputs_raw.data_mut()[dst] = raw[src];
                        } else {
                            let dst = ((bi * n + v) * s + step - t) * f + k;
                            targets.data_mut()[dst] = norm[src];
                            targets_raw.data_mut()[dst] = raw[src];
                            observed[dst] = !self.signals.missing[src];
                        }
                    }
                }
            }
        }
        Batch {
            inputs,
            targets,
            targets_raw,
            inputs_raw,
            observed,
        }
    }
}

/// Everything needed to rebuild a dataset exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub signals_path: Option<String>,
    pub distances_path: Option<String>,
    pub t_total: usize,
    pub nodes: usize,
    pub split: Split,
    pub stats: ZScore,
    pub window: usize,
    pub horizon: usize,
}

impl Manifest {
    pub fn new(ds: &TrafficDataset, signals_path: Option<String>, distances_path: Option<String>) -> Self {
        Self {
            signals_path,
            distances_path,
            t_total: ds.signals.steps(),
            nodes: ds.nodes(),
            split: ds.split.clone(),
            stats: ds.stats.clone(),
            window: ds.window,
            horizon: ds.horizon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_small_csv() {
        let s = parse_signals("1,2\n3,4\n").unwrap();
        assert_eq!(s.values.shape(), &[2, 2, 1]);
        assert_eq!(s.values.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(s.missing.iter().all(|m| !m));

        let with_header = parse_signals("s0,s1\n1,2\n3,4\n").unwrap();
        assert_eq!(with_header.values, s.values);
    }

    #[test]
    fn parse_errors() {
        assert!(parse_signals("").is_err());
        match parse_signals("1,2\n3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_signals("1,2\n3,4\n5,x\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn blank_cells_forward_fill() {
        let s = parse_signals("1,2\n,4\n5,\n").unwrap();
        assert_eq!(s.values.data(), &[1.0, 2.0, 1.0, 4.0, 5.0, 4.0]);
        assert_eq!(s.missing, vec![false, false, true, false, false, true]);

        let first = parse_signals(",2\n4,6\n").unwrap();
        assert_eq!(first.values.data()[0], 4.0);
        assert!(first.missing[0]);
    }

    #[test]
    fn distances() {
        let d = parse_distances("from,to,distance\n0,1,350.5\n1,2,100\n", 3).unwrap();
        assert_eq!(d.edges, vec![(0, 1, 350.5), (1, 2, 100.0)]);
        assert!(parse_distances("0,3,1\n", 3).is_err());
        assert!(parse_distances("0,1,-1\n", 3).is_err());
        assert_eq!(parse_distances(&d.to_csv(), 3).unwrap(), d);
    }

    #[test]
    fn zscore_examples() {
        let s = Signals::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let z = ZScore::fit(&s, 0..2).unwrap();
        assert_eq!((z.mean[0], z.std[0]), (1.0, 1.0));
        assert_eq!(z.forward(&s.values).data(), &[-1.0, 1.0]);

        let c = Signals::from_rows(&[vec![3.0], vec![3.0]]).unwrap();
        assert!(ZScore::fit(&c, 0..2).unwrap_err().to_string().contains("feature 0"));
    }

    #[test]
    fn window_counts() {
        assert_eq!(make_windows(0..24, 12, 12).unwrap().len(), 1);
        assert_eq!(make_windows(10..35, 12, 12).unwrap(), vec![10, 11]);
        assert!(make_windows(0..23, 12, 12).is_err());
    }

    #[test]
    fn split_is_622() {
        let s = Split::ratio_622(100);
        assert_eq!((s.train, s.val, s.test), (0..60, 60..80, 80..100));
    }

    #[test]
    fn batch_layout() {
        let rows: Vec<Vec<f64>> = (0..40).map(|t| vec![t as f64, 100.0 + t as f64]).collect();
        let ds = TrafficDataset::new(Signals::from_rows(&rows).unwrap(), 3, 2).unwrap();
        let b = ds.batch(&[5]);
        assert_eq!(b.inputs.shape(), &[1, 2, 3, 1]);
        assert_eq!(b.inputs_raw.data(), &[5.0, 6.0, 7.0, 105.0, 106.0, 107.0]);
        assert_eq!(b.targets_raw.data(), &[8.0, 9.0, 108.0, 109.0]);
        let back = ds.stats.inverse(&b.targets);
        assert!(back.max_abs_diff(&b.targets_raw) < 1e-10);
    }
}

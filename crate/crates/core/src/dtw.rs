//! Dynamic time warping between scalar series.

use crate::error::{Error, Result};

/// DTW distance with absolute-difference local cost and the
/// `{match, insertion, deletion}` step set.
///
/// With `band = Some(w)` only cells with `|i - j| <= max(w, |len_x - len_y|)`
/// are visited (Sakoe-Chiba band); the widening keeps the end cell reachable.
pub fn dtw_distance(x: &[f64], y: &[f64], band: Option<usize>) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("dtw of an empty series".into()));
    }
    let (n, m) = (x.len(), y.len());
    let w = band.map_or(usize::MAX, |w| w.max(n.abs_diff(m)));

    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr.fill(f64::INFINITY);
        let lo = if w == usize::MAX { 1 } else { i.saturating_sub(w).max(1) };
        let hi = if w == usize::MAX { m } else { (i + w).min(m) };
        for j in lo..=hi {
            let cost = (x[i - 1] - y[j - 1]).abs();
            curr[j] = cost + prev[j - 1].min(prev[j]).min(curr[j - 1]);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// Symmetric matrix of pairwise DTW distances.
pub fn pairwise_dtw(series: &[Vec<f64>], band: Option<usize>) -> Result<Vec<Vec<f64>>> {
    let n = series.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dtw_distance(&series[i], &series[j], band)?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

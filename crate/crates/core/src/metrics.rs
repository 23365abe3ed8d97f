//! MAE, RMSE and MAPE with masking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<()> {
    if y.len() != yhat.len() || mask.is_some_and(|m| m.len() != y.len()) {
        return Err(Error::Dimension(format!(
            "metric inputs have lengths {}, {} and mask {:?}",
            y.len(),
            yhat.len(),
            mask.map(<[bool]>::len)
        )));
    }
    Ok(())
}

fn kept(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

fn mean_over(y: &[f64], yhat: &[f64], mask: Option<&[bool]>, f: impl Fn(f64, f64) -> Option<f64>) -> Result<f64> {
    check(y, yhat, mask)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..y.len() {
        if kept(mask, i) {
            if let Some(v) = f(y[i], yhat[i]) {
                sum += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric);
    }
    Ok(sum / count as f64)
}

/// `mask[i] = true` keeps point `i`.
pub fn mae(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    mean_over(y, yhat, mask, |a, b| Some((a - b).abs()))
}

pub fn rmse(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    Ok(mean_over(y, yhat, mask, |a, b| Some((a - b).powi(2)))?.sqrt())
}

/// Percent; zero targets are skipped.
pub fn mape(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    Ok(100.0 * mean_over(y, yhat, mask, |a, b| (a != 0.0).then(|| ((a - b) / a).abs()))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every kept target is zero.
    pub mape: Option<f64>,
}

impl Scores {
    pub fn compute(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<Self> {
        Ok(Self {
            mae: mae(y, yhat, mask)?,
            rmse: rmse(y, yhat, mask)?,
            mape: match mape(y, yhat, mask) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric) => None,
                Err(e) => return Err(e),
            },
        })
    }
}

/// Overall and per-horizon scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: Scores,
    pub horizons: Vec<Scores>,
    pub masked: usize,
}

impl MetricReport {
    /// `y` and `yhat` are flattened `(.., S, F)` arrays; the horizon index of
    /// entry `i` is `(i / features) % horizon`.
    pub fn compute(y: &[f64], yhat: &[f64], mask: Option<&[bool]>, horizon: usize, features: usize) -> Result<Self> {
        check(y, yhat, mask)?;
        let overall = Scores::compute(y, yhat, mask)?;
        let mut horizons = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let idx: Vec<usize> = (0..y.len()).filter(|i| (i / features) % horizon == h).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let ps: Vec<f64> = idx.iter().map(|&i| yhat[i]).collect();
            let ms: Option<Vec<bool>> = mask.map(|m| idx.iter().map(|&i| m[i]).collect());
            horizons.push(Scores::compute(&ys, &ps, ms.as_deref())?);
        }
        let masked = mask.map_or(0, |m| m.iter().filter(|k| !**k).count());
        Ok(Self {
            overall,
            horizons,
            masked,
        })
    }

    pub fn to_table(&self) -> String {
        let fmt_mape = |m: Option<f64>| m.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}%"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10}", "horizon", "MAE", "RMSE", "MAPE");
        for (h, sc) in self.horizons.iter().enumerate() {
            let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4} {:>10}", h + 1, sc.mae, sc.rmse, fmt_mape(sc.mape));
        }
        let o = &self.overall;
        let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4} {:>10}", "overall", o.mae, o.rmse, fmt_mape(o.mape));
        let _ = writeln!(s, "masked points: {}", self.masked);
        s
    }
}

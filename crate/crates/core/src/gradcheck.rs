//! Central finite-difference verification of reverse-mode gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entries with both gradients below this magnitude are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Checks a scalar function of one tensor.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(point), h, tol)
}

/// Checks a scalar function of several tensors against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = out.backward()?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.value().item();
        if !v.is_finite() {
            return Err(Error::InvalidArgument("function is not finite near the point".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
        tol,
    };
    let mut shifted = points.to_vec();
    for (i, point) in points.iter().enumerate() {
        for j in 0..point.len() {
            let x = point.data()[j];
            shifted[i].data_mut()[j] = x + h;
            let up = eval(&shifted)?;
            shifted[i].data_mut()[j] = x - h;
            let down = eval(&shifted)?;
            shifted[i].data_mut()[j] = x;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error || report.coordinates == 0 {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(|_, x| Ok(x.mul(x)?.sum()), &Tensor::vector(&[3.0]), 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!((r.worst_analytic - 6.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly zero: the one-sided derivative disagrees with the centered one.
        let r = grad_check(|_, x| Ok(x.relu().sum()), &Tensor::vector(&[0.0]), 1e-5, 1e-4).unwrap();
        assert!(!r.passed());
    }
}

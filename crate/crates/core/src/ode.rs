//! Continuous-depth hypergraph propagation.
//!
//! Both branches evolve a node signal `X(t)` of shape `(.., N, T, F)` under
//!
//! ```text
//! dX/dt = X0 + (1/K) sum_k [ ln(A_k) x1 X + ln(U_k) x2 X + ln(Q_k) x3 X ]
//! ```
//!
//! where `A_k` is the k-th power of the hypergraph transform and `x_n` is the
//! mode-n product. The temporal branch is the `K = 1` case. The matrix
//! logarithm is either its first-order expansion `M - I` (used for training)
//! or the exact principal logarithm of a symmetric positive-definite matrix.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::linalg::{matrix_log, sym_eigen};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnMode {
    /// `ln(M) ~ M - I`.
    #[default]
    Taylor,
    /// Eigendecomposition logarithm; symmetric positive-definite inputs only.
    /// The result is recorded as a constant, so no gradient reaches `M`.
    Exact,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    Euler,
    Rk4,
}

impl std::str::FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "rk4" => Ok(Solver::Rk4),
            other => Err(Error::InvalidArgument(format!("unknown solver {other:?}"))),
        }
    }
}

/// The logarithm operator selected by `mode`.
pub fn log_operator<'t>(m: Var<'t>, mode: LnMode) -> Result<Var<'t>> {
    let (r, c) = m.value().matrix_dims("log_operator")?;
    if r != c {
        return Err(Error::Dimension(format!("logarithm of a non-square {r}x{c} matrix")));
    }
    match mode {
        LnMode::Taylor => m.sub(m.tape().constant(Tensor::eye(r))),
        LnMode::Exact => Ok(m.tape().constant(matrix_log(&m.value())?)),
    }
}

/// `[A, A^2, ..., A^K]` by repeated multiplication.
pub fn mixhop_powers<'t>(a: Var<'t>, k: usize) -> Result<Vec<Var<'t>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("MixHop depth must be at least 1".into()));
    }
    let mut powers = vec![a];
    for _ in 1..k {
        let next = powers.last().unwrap().matmul(a)?;
        powers.push(next);
    }
    Ok(powers)
}

fn mean_log<'t>(ms: &[Var<'t>], mode: LnMode) -> Result<Var<'t>> {
    let logs = ms
        .iter()
        .map(|m| log_operator(*m, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(Var::sum_of(&logs)?.scale(1.0 / ms.len() as f64))
}

/// Linear dynamics `dX/dt = X0 + G_node x1 X + G_time x2 X + G_feat x3 X`.
///
/// The K-term sums are linear in `X`, so they are folded into one generator
/// per mode once and reused by every solver stage.
#[derive(Clone, Copy, Debug)]
struct Generators<'t> {
    node: Var<'t>,
    time: Var<'t>,
    feature: Var<'t>,
}

impl<'t> Generators<'t> {
    fn apply(&self, x0: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != x0.shape() {
            return Err(Error::Dimension(format!(
                "state {:?} does not match restart {:?}",
                shape,
                x0.shape()
            )));
        }
        let a = x.mode_product(self.node, 1)?;
        let u = x.mode_product(self.time, 2)?;
        let q = x.mode_product(self.feature, 3)?;
        Var::sum_of(&[x0, a, u, q])
    }
}

/// Right-hand side of the spatial (MixHop) branch.
#[derive(Clone, Debug)]
pub struct SpatialOdeDynamics<'t> {
    transforms: Vec<Var<'t>>,
    time_mixers: Vec<Var<'t>>,
    feature_mixers: Vec<Var<'t>>,
    x0: Var<'t>,
    ln_mode: LnMode,
    gens: Generators<'t>,
}

impl<'t> SpatialOdeDynamics<'t> {
    /// `transform` is the normalized hypergraph matrix; its powers up to
    /// `K = time_mixers.len()` are taken here. `time_mixers[k]` (`T x T`) and
    /// `feature_mixers[k]` (`F x F`) are the already-constrained `U_k`, `Q_k`.
    pub fn new(
        transform: Var<'t>,
        time_mixers: Vec<Var<'t>>,
        feature_mixers: Vec<Var<'t>>,
        x0: Var<'t>,
        ln_mode: LnMode,
    ) -> Result<Self> {
        let k = time_mixers.len();
        if feature_mixers.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{k} time mixers but {} feature mixers",
                feature_mixers.len()
            )));
        }
        let transforms = mixhop_powers(transform, k)?;
        Self::with_transforms(transforms, time_mixers, feature_mixers, x0, ln_mode)
    }

    /// Uses the given `A_k` directly instead of powers of one matrix.
    pub fn with_transforms(
        transforms: Vec<Var<'t>>,
        time_mixers: Vec<Var<'t>>,
        feature_mixers: Vec<Var<'t>>,
        x0: Var<'t>,
        ln_mode: LnMode,
    ) -> Result<Self> {
        if transforms.is_empty() || transforms.len() != time_mixers.len() || transforms.len() != feature_mixers.len() {
            return Err(Error::InvalidArgument(format!(
                "need K >= 1 matching transforms, got {}/{}/{}",
                transforms.len(),
                time_mixers.len(),
                feature_mixers.len()
            )));
        }
        let gens = Generators {
            node: mean_log(&transforms, ln_mode)?,
            time: mean_log(&time_mixers, ln_mode)?,
            feature: mean_log(&feature_mixers, ln_mode)?,
        };
        Ok(Self {
            transforms,
            time_mixers,
            feature_mixers,
            x0,
            ln_mode,
            gens,
        })
    }

    pub fn depth(&self) -> usize {
        self.transforms.len()
    }

    pub fn transforms(&self) -> &[Var<'t>] {
        &self.transforms
    }

    pub fn ln_mode(&self) -> LnMode {
        self.ln_mode
    }

    pub fn restart(&self) -> Var<'t> {
        self.x0
    }

    /// Autonomous, so `_t` is unused.
    pub fn rhs(&self, x: Var<'t>, _t: f64) -> Result<Var<'t>> {
        self.gens.apply(self.x0, x)
    }

    /// One discrete MixHop hypergraph convolution of the restart tensor:
    /// `sum_k A_k x1 X0 x2 U_k x3 Q_k + X0`.
    pub fn discrete_step(&self) -> Result<Var<'t>> {
        discrete_propagation(&self.transforms, &self.time_mixers, &self.feature_mixers, self.x0)
    }
}

/// Right-hand side of the temporal (hyperedge evolving) branch.
#[derive(Clone, Debug)]
pub struct TemporalOdeDynamics<'t> {
    inner: SpatialOdeDynamics<'t>,
}

impl<'t> TemporalOdeDynamics<'t> {
    pub fn new(transform: Var<'t>, time_mixer: Var<'t>, feature_mixer: Var<'t>, x0: Var<'t>, ln_mode: LnMode) -> Result<Self> {
        Ok(Self {
            inner: SpatialOdeDynamics::with_transforms(vec![transform], vec![time_mixer], vec![feature_mixer], x0, ln_mode)?,
        })
    }

    pub fn rhs(&self, x: Var<'t>, t: f64) -> Result<Var<'t>> {
        self.inner.rhs(x, t)
    }

    pub fn restart(&self) -> Var<'t> {
        self.inner.x0
    }

    /// `A x1 X0 x2 U x3 Q + X0`.
    pub fn discrete_step(&self) -> Result<Var<'t>> {
        self.inner.discrete_step()
    }
}

/// `sum_k A_k x1 X0 x2 U_k x3 Q_k + X0`.
pub fn discrete_propagation<'t>(
    transforms: &[Var<'t>],
    time_mixers: &[Var<'t>],
    feature_mixers: &[Var<'t>],
    x0: Var<'t>,
) -> Result<Var<'t>> {
    let mut terms = Vec::with_capacity(transforms.len() + 1);
    for ((a, u), q) in transforms.iter().zip(time_mixers).zip(feature_mixers) {
        let y = x0.mode_product(*a, 1)?.mode_product(*u, 2)?.mode_product(*q, 3)?;
        terms.push(y);
    }
    terms.push(x0);
    Var::sum_of(&terms)
}

/// Fixed-step explicit integration of `dX/dt = rhs(X, t)` from `t = 0` to
/// `t_end`. Every stage is recorded on the tape, so gradients flow through
/// the whole trajectory.
pub fn integrate<'t, F>(mut rhs: F, x_init: Var<'t>, t_end: f64, steps: usize, solver: Solver) -> Result<Var<'t>>
where
    F: FnMut(Var<'t>, f64) -> Result<Var<'t>>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("integration needs at least one step".into()));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    let h = t_end / steps as f64;
    let mut x = x_init;
    for step in 0..steps {
        let t = step as f64 * h;
        x = match solver {
            Solver::Euler => x.add(rhs(x, t)?.scale(h))?,
            Solver::Rk4 => {
                let k1 = rhs(x, t)?;
                let k2 = rhs(x.add(k1.scale(h / 2.0))?, t + h / 2.0)?;
                let k3 = rhs(x.add(k2.scale(h / 2.0))?, t + h / 2.0)?;
                let k4 = rhs(x.add(k3.scale(h))?, t + h)?;
                let incr = Var::sum_of(&[k1, k2.scale(2.0), k3.scale(2.0), k4])?.scale(h / 6.0);
                x.add(incr)?
            }
        };
        if !x.value().is_finite() {
            return Err(Error::Integration { step });
        }
    }
    Ok(x)
}

/// `int_0^tau c^s ds` for `c` in `(0, 1)`.
fn power_integral(c: f64, tau: f64) -> f64 {
    let l = c.ln();
    if l.abs() < 1e-12 {
        tau
    } else {
        (c.powf(tau) - 1.0) / l
    }
}

fn unit_interval_eigen(m: &Tensor, what: &str) -> Result<(Vec<f64>, Tensor)> {
    let eig = sym_eigen(m)?;
    if let Some(l) = eig.values.iter().find(|&&l| !(l > 0.0 && l < 1.0)) {
        return Err(Error::Oracle(format!("{what} has eigenvalue {l} outside (0, 1)")));
    }
    Ok((eig.values, eig.vectors))
}

/// Closed-form value of
/// `X(t) = (1/K) sum_k int_0^{t+1} A_k^s x1 X0 x2 U_k^s x3 Q_k^s ds`
/// for symmetric positive-definite `A_k`, `U_k`, `Q_k` with spectra in
/// `(0, 1)`, evaluated in the joint eigenbasis of each triple.
pub fn analytic_oracle(transforms: &[Tensor], time_mixers: &[Tensor], feature_mixers: &[Tensor], x0: &Tensor, t: f64) -> Result<Tensor> {
    let k = transforms.len();
    if k == 0 || time_mixers.len() != k || feature_mixers.len() != k {
        return Err(Error::Oracle("need K >= 1 matching transforms".into()));
    }
    if x0.rank() != 3 {
        return Err(Error::Oracle(format!("restart must be N x T x F, got {:?}", x0.shape())));
    }
    let tau = t + 1.0;
    let mut total = Tensor::zeros(x0.shape());
    for i in 0..k {
        let (la, va) = unit_interval_eigen(&transforms[i], "node transform")?;
        let (lu, vu) = unit_interval_eigen(&time_mixers[i], "time mixer")?;
        let (lq, vq) = unit_interval_eigen(&feature_mixers[i], "feature mixer")?;
        let mut y = x0
            .mode_product(&va.transpose()?, 1)?
            .mode_product(&vu.transpose()?, 2)?
            .mode_product(&vq.transpose()?, 3)?;
        let (n, tt, f) = (la.len(), lu.len(), lq.len());
        for a in 0..n {
            for b in 0..tt {
                for c in 0..f {
                    let idx = (a * tt + b) * f + c;
                    y.data_mut()[idx] *= power_integral(la[a] * lu[b] * lq[c], tau);
                }
            }
        }
        let x = y.mode_product(&va, 1)?.mode_product(&vu, 2)?.mode_product(&vq, 3)?;
        total.add_assign(&x);
    }
    Ok(total.scale(1.0 / k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn scalar3(v: f64) -> Tensor {
        Tensor::new(vec![1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn identity_transforms_give_restart() {
        let tape = Tape::new();
        let x0 = tape.constant(Tensor::new(vec![2, 3, 1], vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]).unwrap());
        let x = tape.constant(Tensor::full(&[2, 3, 1], 7.0));
        let dynamics = SpatialOdeDynamics::new(
            tape.constant(Tensor::eye(2)),
            vec![tape.constant(Tensor::eye(3))],
            vec![tape.constant(Tensor::eye(1))],
            x0,
            LnMode::Taylor,
        )
        .unwrap();
        assert_eq!(dynamics.rhs(x, 0.3).unwrap().value().data(), x0.value().data());

        let temporal = TemporalOdeDynamics::new(
            tape.constant(Tensor::eye(2)),
            tape.constant(Tensor::eye(3)),
            tape.constant(Tensor::eye(1)),
            x0,
            LnMode::Taylor,
        )
        .unwrap();
        assert_eq!(temporal.rhs(x, 0.0).unwrap().value().data(), x0.value().data());
    }

    #[test]
    fn zero_state_and_restart() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let m = tape.constant(Tensor::matrix(&[vec![0.5, 0.2], vec![0.2, 0.5]]).unwrap());
        let d = SpatialOdeDynamics::new(m, vec![m, m], vec![m, m], z, LnMode::Taylor).unwrap();
        assert_eq!(d.rhs(z, 0.0).unwrap().value().max_abs(), 0.0);
    }

    #[test]
    fn scalar_exact_mode() {
        let (a, u, q, x0, x) = (0.7, 0.4, 0.9, 1.5, -0.8);
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::matrix(&[vec![v]]).unwrap());
        let d = SpatialOdeDynamics::new(c(a), vec![c(u)], vec![c(q)], tape.constant(scalar3(x0)), LnMode::Exact).unwrap();
        let r = d.rhs(tape.constant(scalar3(x)), 0.0).unwrap().value().item();
        let expected = x0 + (a.ln() + u.ln() + q.ln()) * x;
        assert!((r - expected).abs() < 1e-14);
    }

    #[test]
    fn temporal_rhs_is_linear_without_restart() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::matrix(&[vec![0.6, 0.3], vec![0.1, 0.8]]).unwrap());
        let z = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let d = TemporalOdeDynamics::new(m, m, m, z, LnMode::Taylor).unwrap();
        let x = Tensor::new(vec![2, 2, 2], (0..8).map(|i| i as f64 - 3.5).collect()).unwrap();
        let r1 = d.rhs(tape.constant(x.clone()), 0.0).unwrap().value();
        let r3 = d.rhs(tape.constant(x.scale(3.0)), 0.0).unwrap().value();
        assert!(r3.max_abs_diff(&r1.scale(3.0)) < 1e-12);
    }

    #[test]
    fn exact_mode_rejects_non_symmetric() {
        let tape = Tape::new();
        let m = tape.constant(Tensor::matrix(&[vec![0.6, 0.3], vec![0.1, 0.8]]).unwrap());
        assert!(log_operator(m, LnMode::Exact).is_err());
    }

    #[test]
    fn integrate_examples() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::vector(&[1.0]));
        fn zero_rhs(x: Var<'_>, _t: f64) -> Result<Var<'_>> {
            Ok(x.scale(0.0))
        }
        fn decay(x: Var<'_>, _t: f64) -> Result<Var<'_>> {
            Ok(x.scale(-1.0))
        }
        let out = integrate(zero_rhs, one, 1.0, 5, Solver::Rk4).unwrap();
        assert_eq!(out.value().item(), 1.0);

        let e = integrate(decay, one, 1.0, 100, Solver::Euler).unwrap().value().item();
        assert!((e - 0.99f64.powi(100)).abs() < 1e-14);
        assert!((e - 0.3660).abs() < 1e-4);
        let r = integrate(decay, one, 1.0, 10, Solver::Rk4).unwrap().value().item();
        let h: f64 = 0.1;
        let stage_poly = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((r - stage_poly.powi(10)).abs() < 1e-15);
        assert!((r - (-1f64).exp()).abs() < 4e-7);
    }

    #[test]
    fn integrate_reports_blowup_step() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::vector(&[1.0]));
        fn boom(x: Var<'_>, _t: f64) -> Result<Var<'_>> {
            Ok(x.scale(1e200))
        }
        match integrate(boom, one, 1.0, 10, Solver::Euler) {
            Err(Error::Integration { step }) => assert_eq!(step, 1),
            other => panic!("expected integration error, got {other:?}"),
        }
        assert!(integrate(boom, one, 1.0, 0, Solver::Euler).is_err());
        assert!(integrate(boom, one, 0.0, 1, Solver::Euler).is_err());
    }

    #[test]
    fn oracle_scalar_example() {
        let c = (-1f64).exp();
        let m = Tensor::matrix(&[vec![c]]).unwrap();
        let x = analytic_oracle(&[m.clone()], &[m.clone()], &[m], &scalar3(1.0), 0.0).unwrap();
        let expected = (1.0 - (-3f64).exp()) / 3.0;
        assert!((x.item() - expected).abs() < 1e-15);
        assert!((x.item() - 0.3167).abs() < 1e-4);
    }

    #[test]
    fn oracle_diagonal_splits_into_scalars() {
        let a = Tensor::diag(&[0.3, 0.8]);
        let one = Tensor::diag(&[0.5]);
        let x0 = Tensor::new(vec![2, 1, 1], vec![2.0, -1.0]).unwrap();
        let x = analytic_oracle(&[a], &[one.clone()], &[one], &x0, 0.5).unwrap();
        for (i, (lam, v)) in [(0.3, 2.0), (0.8, -1.0)].into_iter().enumerate() {
            let c: f64 = lam * 0.25;
            let expected = v * (c.powf(1.5) - 1.0) / c.ln();
            assert!((x.data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn oracle_rejects_unit_eigenvalue() {
        let i = Tensor::eye(1);
        assert!(analytic_oracle(&[i.clone()], &[i.clone()], &[i], &scalar3(1.0), 0.0).is_err());
    }

    #[test]
    fn mixhop_powers_are_consistent() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[vec![0.5, 0.25], vec![0.25, 0.5]]).unwrap());
        let p = mixhop_powers(a, 3).unwrap();
        let direct = p[1].value().matmul(&a.value()).unwrap();
        assert!(p[2].value().max_abs_diff(&direct) < 1e-10);
        assert!(mixhop_powers(a, 0).is_err());
    }
}

//! Finite-difference checks for every differentiable op.

use std::rc::Rc;

use proptest::prelude::*;
use sthode::gradcheck::{grad_check, grad_check_many, GradCheckReport};
use sthode::hypergraph::{adaptive_incidence, normalized_transform_var, Hypergraph};
use sthode::ode::{integrate, log_operator, LnMode, Solver, SpatialOdeDynamics};
use sthode::{Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Fixed pseudo-random weights so every output coordinate affects the loss.
fn probe(shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = ((i as f64 + 1.0) * 0.7548776662).fract() * 2.0 - 0.9;
    }
    t
}

fn weighted<'t>(v: Var<'t>) -> Result<Var<'t>> {
    let w = v.tape().constant(probe(&v.shape()));
    Ok(v.mul(w)?.sum())
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn assert_passed(r: GradCheckReport) {
    assert!(r.passed(), "{r:?}");
}

fn away_from(xs: &[f64], kinks: &[f64], margin: f64) -> bool {
    xs.iter().all(|x| kinks.iter().all(|k| (x - k).abs() > margin))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn add_sub_mul(a in values(6), b in values(6)) {
        let pts = [tensor(&[2, 3], a), tensor(&[2, 3], b)];
        assert_passed(grad_check_many(|_, x| weighted(x[0].add(x[1])?), &pts, H, TOL).unwrap());
        assert_passed(grad_check_many(|_, x| weighted(x[0].sub(x[1])?), &pts, H, TOL).unwrap());
        assert_passed(grad_check_many(|_, x| weighted(x[0].mul(x[1])?), &pts, H, TOL).unwrap());
    }

    #[test]
    fn div_const(a in values(4), d in prop::collection::vec(0.5..3.0f64, 4)) {
        let d = tensor(&[2, 2], d);
        assert_passed(grad_check(|_, x| weighted(x.div_const(&d)?), &tensor(&[2, 2], a), H, TOL).unwrap());
    }

    #[test]
    fn add_bias(a in values(6), b in values(3)) {
        let pts = [tensor(&[2, 3], a), tensor(&[3], b)];
        assert_passed(grad_check_many(|_, x| weighted(x[0].add_bias(x[1])?), &pts, H, TOL).unwrap());
    }

    #[test]
    fn scale_add_scalar_sum_of(a in values(4), b in values(4), c in -3.0..3.0f64) {
        let pts = [tensor(&[4], a), tensor(&[4], b)];
        assert_passed(
            grad_check_many(|_, x| weighted(Var::sum_of(&[x[0].scale(c), x[1].add_scalar(c), x[0]])?), &pts, H, TOL)
                .unwrap(),
        );
    }

    #[test]
    fn matmul_and_transpose(a in values(6), b in values(8)) {
        let pts = [tensor(&[3, 2], a), tensor(&[2, 4], b)];
        assert_passed(grad_check_many(|_, x| weighted(x[0].matmul(x[1])?), &pts, H, TOL).unwrap());
        assert_passed(grad_check_many(|_, x| weighted(x[1].transpose()?.matmul(x[0].transpose()?)?), &pts, H, TOL).unwrap());
    }

    #[test]
    fn mode_products(x in values(2 * 3 * 2 * 2), m1 in values(9), m2 in values(4), m3 in values(4)) {
        let pts = [tensor(&[2, 3, 2, 2], x), tensor(&[3, 3], m1), tensor(&[2, 2], m2), tensor(&[2, 2], m3)];
        for mode in 1..=3 {
            assert_passed(grad_check_many(|_, v| weighted(v[0].mode_product(v[mode], mode)?), &pts, H, TOL).unwrap());
        }
        assert_passed(grad_check_many(|_, v| weighted(v[0].contract_axis(v[2], 0)?), &pts, H, TOL).unwrap());
    }

    #[test]
    fn linear_and_outer(x in values(6), w in values(6), u in values(3), v in values(4)) {
        let pts = [tensor(&[2, 3], x), tensor(&[3, 2], w)];
        assert_passed(grad_check_many(|_, p| weighted(p[0].linear(p[1])?), &pts, H, TOL).unwrap());
        let pts = [tensor(&[3], u), tensor(&[4], v)];
        assert_passed(grad_check_many(|_, p| weighted(p[0].outer(p[1])?), &pts, H, TOL).unwrap());
    }

    #[test]
    fn softmax_rows(a in values(6)) {
        assert_passed(grad_check(|_, x| weighted(x.softmax_rows()?), &tensor(&[2, 3], a), H, TOL).unwrap());
    }

    #[test]
    fn squash(a in prop::collection::vec(-6.0..6.0f64, 5)) {
        assert_passed(grad_check(|_, x| weighted(x.squash01(1e-3)), &tensor(&[5], a), H, TOL).unwrap());
    }

    #[test]
    fn clamp_and_relu(a in values(6)) {
        prop_assume!(away_from(&a, &[0.0, 0.9], 1e-3));
        let p = tensor(&[6], a);
        assert_passed(grad_check(|_, x| weighted(x.clamp01(0.1)), &p, H, TOL).unwrap());
        assert_passed(grad_check(|_, x| weighted(x.relu()), &p, H, TOL).unwrap());
    }

    #[test]
    fn dilated_conv(x in values(2 * 5 * 2), w in values(2 * 2 * 3), dilation in 1usize..3) {
        let pts = [tensor(&[2, 5, 2], x), tensor(&[2, 2, 3], w)];
        assert_passed(grad_check_many(|_, v| weighted(v[0].dilated_causal_conv(v[1], dilation)?), &pts, H, TOL).unwrap());
    }

    #[test]
    fn concat_reshape(a in values(4), b in values(6)) {
        let pts = [tensor(&[2, 2], a), tensor(&[2, 3], b)];
        assert_passed(
            grad_check_many(|_, v| weighted(Var::concat_last(&[v[0], v[1]])?.reshape(&[5, 2])?), &pts, H, TOL).unwrap(),
        );
    }

    #[test]
    fn max_of(a in values(5), b in values(5), c in values(5)) {
        let gaps_ok = (0..5).all(|i| {
            let mut v = [a[i], b[i], c[i]];
            v.sort_by(f64::total_cmp);
            v[2] - v[1] > 1e-3
        });
        prop_assume!(gaps_ok);
        let pts = [tensor(&[5], a), tensor(&[5], b), tensor(&[5], c)];
        assert_passed(grad_check_many(|_, v| weighted(Var::max_of(v)?), &pts, H, TOL).unwrap());
    }

    #[test]
    fn sum_and_mean(a in values(6)) {
        let p = tensor(&[2, 3], a);
        assert_passed(grad_check(|_, x| Ok(x.mul(x)?.sum()), &p, H, TOL).unwrap());
        assert_passed(grad_check(|_, x| Ok(x.mul(x)?.mean()), &p, H, TOL).unwrap());
    }

    #[test]
    fn huber(p in values(6), y in values(6), keep in prop::collection::vec(any::<bool>(), 6)) {
        let delta = 1.0;
        let seams_ok = p.iter().zip(&y).all(|(a, b)| ((a - b).abs() - delta).abs() > 1e-3);
        prop_assume!(seams_ok && keep.iter().any(|k| *k));
        let mask = Rc::new(keep);
        let pts = [tensor(&[6], p), tensor(&[6], y)];
        assert_passed(
            grad_check_many(|_, v| v[0].huber(v[1], delta, Some(mask.clone())), &pts, H, TOL).unwrap(),
        );
        assert_passed(grad_check_many(|_, v| v[0].huber(v[1], delta, None), &pts, H, TOL).unwrap());
    }

    #[test]
    fn adaptive_incidence_embeddings(en in values(4), em in values(3)) {
        let hg = Hypergraph::new(4, vec![vec![0, 1], vec![1, 2, 3], vec![0, 3]], vec![1.0; 3]).unwrap();
        let pts = [tensor(&[4], en), tensor(&[3], em)];
        assert_passed(
            grad_check_many(
                |tape, v| {
                    let h = adaptive_incidence(tape.constant(hg.incidence()), v[0], v[1])?;
                    weighted(normalized_transform_var(&hg, h)?)
                },
                &pts,
                H,
                TOL,
            )
            .unwrap(),
        );
    }

    #[test]
    fn taylor_log(a in values(9)) {
        assert_passed(grad_check(|_, x| weighted(log_operator(x, LnMode::Taylor)?), &tensor(&[3, 3], a), H, TOL).unwrap());
    }
}

#[test]
fn integration_through_twenty_steps() {
    let a = Tensor::matrix(&[vec![0.6, 0.2, 0.0], vec![0.2, 0.5, 0.1], vec![0.0, 0.1, 0.7]]).unwrap();
    let u = Tensor::matrix(&[vec![0.9, 0.05], vec![0.02, 0.8]]).unwrap();
    let q = Tensor::matrix(&[vec![0.85]]).unwrap();
    let x0 = probe(&[1, 3, 2, 1]);
    for solver in [Solver::Euler, Solver::Rk4] {
        let r = grad_check_many(
            |_, v| {
                let dyn_ = SpatialOdeDynamics::new(v[0], vec![v[1]], vec![v[2]], v[3], LnMode::Taylor)?;
                let out = integrate(|x, t| dyn_.rhs(x, t), v[3], 1.0, 20, solver)?;
                weighted(out)
            },
            &[a.clone(), u.clone(), q.clone(), x0.clone()],
            H,
            1e-3,
        )
        .unwrap();
        assert_passed(r);
    }
}

#[test]
fn tape_leaves_without_gradients_stay_constant() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::vector(&[1.0, 2.0]));
    let p = tape.param(Tensor::vector(&[3.0, 4.0]));
    let g = c.mul(p).unwrap().sum().backward().unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap().data(), &[1.0, 2.0]);
}

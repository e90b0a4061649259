//! Randomised invariants across the public API.

use nalgebra::{DMatrix, DVector};
use nonlin_expect::expectation::{expectation, CylinderFunctional, ExpectationOptions};
use nonlin_expect::generator::{IsaacsEntry, IsaacsOrder, IsaacsSpec};
use nonlin_expect::oracle::{lower_bound, standard_family, McOptions, Policy};
use nonlin_expect::pde::SchemePlan;
use nonlin_expect::{ControlPoint, Expr, GeneratorSpec, Grid};
use proptest::prelude::*;

fn control_1d() -> impl Strategy<Value = ControlPoint> {
    (0.0f64..2.0, -1.0f64..1.0).prop_map(|(a, b)| ControlPoint::scalar(a, b).unwrap())
}

fn control_2d() -> impl Strategy<Value = ControlPoint> {
    (prop::array::uniform2(0.0f64..2.0), prop::array::uniform2(-1.0f64..1.0)).prop_map(|(a, b)| {
        ControlPoint::new(
            DMatrix::from_diagonal(&DVector::from_row_slice(&a)),
            DVector::from_row_slice(&b),
        )
        .unwrap()
    })
}

fn sublinear_2d() -> impl Strategy<Value = GeneratorSpec> {
    prop::collection::vec(control_2d(), 1..5).prop_map(|c| GeneratorSpec::sublinear(c).unwrap())
}

fn sym(v: [f64; 3]) -> Vec<f64> {
    vec![v[0], v[1], v[1], v[2]]
}

fn isaacs(s: &[f64], b: &[f64], order: IsaacsOrder) -> GeneratorSpec {
    let entries = s
        .iter()
        .zip(b)
        .map(|(&s, &b)| IsaacsEntry {
            sigma: vec![Expr::parse(&format!("{s} * (1 + 0.2 * cos(x))")).unwrap()],
            drift: vec![Expr::constant(b)],
        })
        .collect();
    GeneratorSpec::isaacs(
        1,
        IsaacsSpec {
            n_gamma: 2,
            n_lambda: 3,
            entries,
            order,
            lipschitz: 0.2 * s.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        },
    )
    .unwrap()
}

fn step_all(plan: &SchemePlan, u: &[f64]) -> Vec<f64> {
    let dt = plan.cfl_dt(1.0);
    let mut out = vec![0.0; u.len()];
    plan.step(u, dt, None, &mut out);
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sublinear_generator_is_homogeneous_and_subadditive(
        g in sublinear_2d(),
        p in prop::array::uniform2(-3.0f64..3.0),
        q in prop::array::uniform2(-3.0f64..3.0),
        a in prop::array::uniform3(-3.0f64..3.0),
        c in prop::array::uniform3(-3.0f64..3.0),
        alpha in 0.0f64..10.0,
    ) {
        let x = [0.3, -0.7];
        let (a, c) = (sym(a), sym(c));
        let v = g.evaluate(&x, &p, &a).unwrap();
        let scaled = g.evaluate(&x, &[alpha * p[0], alpha * p[1]], &a.iter().map(|v| alpha * v).collect::<Vec<_>>()).unwrap();
        prop_assert!((scaled - alpha * v).abs() <= 1e-12 * (1.0 + alpha) * (1.0 + v.abs()));

        let sum_p = [p[0] + q[0], p[1] + q[1]];
        let sum_a: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x + y).collect();
        let lhs = g.evaluate(&x, &sum_p, &sum_a).unwrap();
        let rhs = v + g.evaluate(&x, &q, &c).unwrap();
        prop_assert!(lhs <= rhs + 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn sup_inf_never_exceeds_inf_sup(
        s in prop::collection::vec(-1.5f64..1.5, 6),
        b in prop::collection::vec(-0.5f64..0.5, 6),
        x in -4.0f64..4.0,
        p in -3.0f64..3.0,
        a in -3.0f64..3.0,
    ) {
        let lower = isaacs(&s, &b, IsaacsOrder::SupInf);
        let upper = isaacs(&s, &b, IsaacsOrder::InfSup);
        let lo = lower.evaluate(&[x], &[p], &[a]).unwrap();
        let hi = upper.evaluate(&[x], &[p], &[a]).unwrap();
        prop_assert!(lo <= hi + 1e-14);
        let envelope = lower.isaacs_upper_envelope().unwrap();
        prop_assert!(hi <= envelope.evaluate(&[x], &[p], &[a]).unwrap() + 1e-14);
    }

    #[test]
    fn scheme_step_is_monotone_and_commutes_with_constants(
        controls in prop::collection::vec(control_1d(), 1..4),
        u in prop::collection::vec(-5.0f64..5.0, 41),
        bump in prop::collection::vec(0.0f64..2.0, 41),
        c in -10.0f64..10.0,
    ) {
        let g = GeneratorSpec::sublinear(controls).unwrap();
        let grid = Grid::uniform_1d(-2.0, 2.0, 41).unwrap();
        let plan = SchemePlan::new(&g, &grid).unwrap();
        let v: Vec<f64> = u.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let su = step_all(&plan, &u);
        let sv = step_all(&plan, &v);
        for (a, b) in su.iter().zip(&sv) {
            prop_assert!(*a <= *b + 1e-12);
        }
        let shifted: Vec<f64> = u.iter().map(|a| a + c).collect();
        let ss = step_all(&plan, &shifted);
        for (a, b) in su.iter().zip(&ss) {
            prop_assert!((a + c - b).abs() <= 1e-11);
        }
    }

    #[test]
    fn two_dimensional_scheme_is_monotone(
        g in sublinear_2d(),
        u in prop::collection::vec(-5.0f64..5.0, 121),
        bump in prop::collection::vec(0.0f64..2.0, 121),
    ) {
        let grid = Grid::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![11, 11]).unwrap();
        let plan = SchemePlan::new(&g, &grid).unwrap();
        let v: Vec<f64> = u.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let su = step_all(&plan, &u);
        let sv = step_all(&plan, &v);
        for (a, b) in su.iter().zip(&sv) {
            prop_assert!(*a <= *b + 1e-12);
        }
    }

    #[test]
    fn enlarging_the_policy_family_never_lowers_the_bound(extra in 0usize..2, seed in 0u64..1000) {
        let g = GeneratorSpec::sublinear(vec![
            ControlPoint::scalar(1.0, 0.0).unwrap(),
            ControlPoint::scalar(0.25, 0.0).unwrap(),
        ])
        .unwrap();
        let xi = CylinderFunctional::parse(vec![0.5], "max(x1, 0)", vec![0.0]).unwrap();
        let opts = McOptions { dt: 0.05, n_paths: 400, seed };
        let small = vec![Policy::constant(extra)];
        let big = standard_family(2, 0.5, 0.0);
        let lb_small = lower_bound(&g, &xi, &small, &opts).unwrap();
        let lb_big = lower_bound(&g, &xi, &big, &opts).unwrap();
        prop_assert!(lb_big.best.mean >= lb_small.best.mean);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn expectation_commutes_with_constants(c in -5.0f64..5.0, x0 in -1.0f64..1.0) {
        let g = GeneratorSpec::g_heat(0.25, 1.0).unwrap();
        let opts = ExpectationOptions { dx: 0.1, ..Default::default() };
        let xi = CylinderFunctional::parse(vec![0.5, 1.0], "max(x1 - x2, 0) - 0.5 * abs(x2)", vec![x0]).unwrap();
        let base = expectation(&g, &xi, &opts).unwrap();
        let shifted = expectation(&g, &xi.shifted(c), &opts).unwrap();
        prop_assert!((shifted - base - c).abs() <= 1e-10);
    }
}

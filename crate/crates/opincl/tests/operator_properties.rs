use std::sync::Arc;

use opincl::{Grid, GridFunction, KernelOperator, OperatorKind};
use proptest::prelude::*;

const N: usize = 17;

fn grid() -> Arc<Grid> {
    Arc::new(Grid::interval(0.0, 1.0, N).unwrap())
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

fn kind() -> impl Strategy<Value = OperatorKind> {
    prop_oneof![Just(OperatorKind::Volterra), Just(OperatorKind::Fredholm)]
}

fn op(kind: OperatorKind, c: f64) -> KernelOperator {
    KernelOperator::new(kind, grid(), 2, move |t, s| {
        let d = t[0] - s[0];
        vec![c * (-d).exp(), 0.3 * d, 0.1, c * (1.0 + t[0] * s[0])]
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lp_norm_triangle_and_homogeneity(a in values(N), b in values(N), p in prop_oneof![Just(1.0), Just(2.0), Just(3.5), Just(f64::INFINITY)], c in -4.0..4.0f64) {
        let fa = GridFunction::new(grid(), 1, a).unwrap();
        let fb = GridFunction::new(grid(), 1, b).unwrap();
        let na = fa.lp_norm(p).unwrap();
        prop_assert!(fa.add(&fb).unwrap().lp_norm(p).unwrap() <= na + fb.lp_norm(p).unwrap() + 1e-12);
        prop_assert!((fa.scale(c).lp_norm(p).unwrap() - c.abs() * na).abs() <= 1e-12 * (1.0 + na));
    }

    #[test]
    fn operators_are_linear(k in kind(), a in values(2 * N), b in values(2 * N), s in -2.0..2.0f64) {
        let a_op = op(k, 0.7);
        let fa = GridFunction::new(grid(), 2, a).unwrap();
        let fb = GridFunction::new(grid(), 2, b).unwrap();
        let lhs = a_op.apply(&fa.scale(s).add(&fb).unwrap()).unwrap();
        let rhs = a_op.apply(&fa).unwrap().scale(s).add(&a_op.apply(&fb).unwrap()).unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().sup_norm() <= 1e-12);
    }

    #[test]
    fn volterra_is_causal(a in values(2 * N), b in values(2 * N), cut in 1usize..N) {
        let a_op = op(OperatorKind::Volterra, 1.3);
        // b agrees with a up to node `cut`
        let mixed: Vec<f64> = (0..2 * N).map(|i| if i / 2 <= cut { a[i] } else { b[i] }).collect();
        let ua = a_op.apply(&GridFunction::new(grid(), 2, a).unwrap()).unwrap();
        let ub = a_op.apply(&GridFunction::new(grid(), 2, mixed).unwrap()).unwrap();
        for k in 0..=cut {
            prop_assert!((ua.value(k)[0] - ub.value(k)[0]).abs() <= 1e-14);
            prop_assert!((ua.value(k)[1] - ub.value(k)[1]).abs() <= 1e-14);
        }
    }

    #[test]
    fn adjoint_duality_is_exact(k in kind(), a in values(2 * N), b in values(2 * N)) {
        let a_op = op(k, 0.9);
        let u = GridFunction::new(grid(), 2, a).unwrap();
        let w = GridFunction::new(grid(), 2, b).unwrap();
        let lhs = a_op.apply(&u).unwrap().inner(&w).unwrap();
        let rhs = u.inner(&a_op.adjoint_apply(&w).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn computed_norm_bounds_the_action(k in kind(), a in values(2 * N), p in prop_oneof![Just(1.0), Just(2.0), Just(f64::INFINITY)]) {
        let a_op = op(k, 0.5);
        let u = GridFunction::new(grid(), 2, a).unwrap();
        let au = a_op.apply(&u).unwrap();
        prop_assert!(au.sup_norm() <= a_op.computed_opnorm(p).unwrap() * u.lp_norm(p).unwrap() + 1e-12);
    }

    #[test]
    fn interval_interpolation_reproduces_nodes(a in values(N)) {
        let f = GridFunction::new(grid(), 1, a.clone()).unwrap();
        for (k, v) in a.iter().enumerate() {
            let t = k as f64 / (N - 1) as f64;
            prop_assert!((f.interpolate(&[t]).unwrap()[0] - v).abs() <= 1e-12);
        }
    }
}

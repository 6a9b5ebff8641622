use opincl::second_order::{
    bidiff_interval_1d, chain_rule_check, dist2_second_difference_check, estimate_second, max_rule_check, BidiffMode,
    EstimateKind, EstimatorOptions, ScalarField, Schedule, SmoothMap,
};
use opincl::CompactSet;
use proptest::prelude::*;

fn dir(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn opts() -> EstimatorOptions {
    EstimatorOptions { z_samples: 9, ..EstimatorOptions::default() }
}

fn test_fields() -> Vec<ScalarField> {
    vec![
        ScalarField::new(2, |x| x[0].max(0.0).powi(2) + x[1] * x[1].abs()).with_lipschitz2(2.0),
        ScalarField::new(2, |x| (x[0] * x[0] + 0.5 * x[1] * x[1] - x[0] * x[1]).max(0.3 * x[0] * x[0])).with_lipschitz2(6.0),
        ScalarField::quadratic(2, vec![1.0, 0.5, 0.5, -2.0]).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sup_estimates_grow_with_the_sample(x in dir(2), extra in 1usize..6) {
        for f in test_fields() {
            let small = EstimatorOptions { z_samples: 4, ..EstimatorOptions::default() };
            let large = EstimatorOptions { z_samples: 4 + extra, ..EstimatorOptions::default() };
            let a = estimate_second(EstimateKind::F2PlusLocal, &f, &[0.0, 0.0], &x, None, &small).unwrap().value;
            let b = estimate_second(EstimateKind::F2PlusLocal, &f, &[0.0, 0.0], &x, None, &large).unwrap().value;
            prop_assert!(b >= a);
            let a = estimate_second(EstimateKind::Mixed, &f, &[0.0, 0.0], &x, Some(&[1.0, -0.5]), &small).unwrap().value;
            let b = estimate_second(EstimateKind::Mixed, &f, &[0.0, 0.0], &x, Some(&[1.0, -0.5]), &large).unwrap().value;
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn mixed_estimate_is_symmetric_and_even(x1 in dir(2), x2 in dir(2)) {
        for f in test_fields() {
            let m = |a: &[f64], b: &[f64]| estimate_second(EstimateKind::Mixed, &f, &[0.0, 0.0], a, Some(b), &opts()).unwrap().value;
            let base = m(&x1, &x2);
            let n1: Vec<f64> = x1.iter().map(|v| -v).collect();
            let n2: Vec<f64> = x2.iter().map(|v| -v).collect();
            prop_assert!((base - m(&x2, &x1)).abs() <= 1e-9 * (1.0 + base.abs()));
            prop_assert!((base - m(&n1, &n2)).abs() <= 1e-9 * (1.0 + base.abs()));
        }
    }

    #[test]
    fn lower_estimate_never_exceeds_upper(x in dir(2), x0 in dir(2)) {
        for f in test_fields() {
            for at in [vec![0.0, 0.0], x0.clone()] {
                let up = estimate_second(EstimateKind::F2PlusLocal, &f, &at, &x, None, &opts()).unwrap().value;
                let lo = estimate_second(EstimateKind::F2MinusLocal, &f, &at, &x, None, &opts()).unwrap().value;
                prop_assert!(lo <= up + 1e-9);
                let up = estimate_second(EstimateKind::F2PlusPoint, &f, &at, &x, None, &opts()).unwrap().value;
                let lo = estimate_second(EstimateKind::F2MinusPoint, &f, &at, &x, None, &opts()).unwrap().value;
                prop_assert!(lo <= up + 1e-9);
            }
        }
    }

    #[test]
    fn mixed_estimate_respects_the_declared_constant(x1 in dir(2), x2 in dir(2)) {
        for f in test_fields() {
            let k = f.declared_lipschitz2().unwrap();
            let v = estimate_second(EstimateKind::Mixed, &f, &[0.0, 0.0], &x1, Some(&x2), &opts()).unwrap().value;
            let n = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!(v.abs() <= k * n(&x1) * n(&x2) + 1e-8);
        }
    }
}

fn directions(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn closed_form_examples_at_twenty_directions() {
    let o = EstimatorOptions::default();
    let signed = ScalarField::signed_square();
    let half = ScalarField::half_square();
    let prod = ScalarField::abs_product();
    let quad_a = vec![2.0, 0.5, 0.5, 1.0];
    let quad = ScalarField::quadratic(2, quad_a.clone()).unwrap();
    for d in directions(1, 20, 11) {
        let x = d[0];
        let sym = estimate_second(EstimateKind::Sym2Plus, &signed, &[0.0], &d, None, &o).unwrap().value;
        assert_eq!(sym, 0.0);
        let pt = estimate_second(EstimateKind::F2PlusPoint, &signed, &[0.0], &d, None, &o).unwrap().value;
        assert!((pt - 2.0 * x * x.abs()).abs() <= 1e-9);
        let up = estimate_second(EstimateKind::F2PlusLocal, &half, &[0.0], &d, None, &o).unwrap().value;
        let lo = estimate_second(EstimateKind::F2MinusLocal, &half, &[0.0], &d, None, &o).unwrap().value;
        assert!((up - 2.0 * x * x).abs() <= 1e-9 && lo.abs() <= 1e-9);
    }
    for d in directions(2, 20, 12) {
        let v = estimate_second(EstimateKind::Sym2Plus, &prod, &[0.0, 0.0], &d, None, &o).unwrap().value;
        assert!((v - 2.0 * (d[0] * d[1]).abs()).abs() <= 1e-9);
        let q = 2.0 * (quad_a[0] * d[0] * d[0] + 2.0 * quad_a[1] * d[0] * d[1] + quad_a[3] * d[1] * d[1]);
        let v = estimate_second(EstimateKind::F2PlusLocal, &quad, &[0.0, 0.0], &d, None, &o).unwrap().value;
        assert!((v - q).abs() <= 1e-9);
        // away from the origin the quotient loses digits to cancellation, so
        // use steps of order one there (the quotient of a quadratic is exact in lambda)
        let coarse = EstimatorOptions::default().with_schedule(Schedule { lambda0: 1.0, ratio: 0.5, steps: 8 });
        let v = estimate_second(EstimateKind::F2PlusPoint, &quad, &[0.3, -0.7], &d, None, &coarse).unwrap().value;
        assert!((v - q).abs() <= 1e-9 * (1.0 + q.abs()), "{} vs {}", v, q);
    }
}

#[test]
fn bidifferential_intervals() {
    let o = EstimatorOptions::default();
    let i = bidiff_interval_1d(&ScalarField::quadratic(1, vec![1.0]).unwrap(), 0.0, &o, BidiffMode::Local).unwrap();
    assert!((i.lower - 2.0).abs() < 1e-9 && (i.upper - 2.0).abs() < 1e-9 && !i.empty);
    let i = bidiff_interval_1d(&ScalarField::half_square(), 0.0, &o, BidiffMode::Local).unwrap();
    assert!(i.lower.abs() < 1e-9 && (i.upper - 2.0).abs() < 1e-9);
    let i = bidiff_interval_1d(&ScalarField::signed_square(), 0.0, &o, BidiffMode::Local).unwrap();
    assert!((i.lower + 2.0).abs() < 1e-9 && (i.upper - 2.0).abs() < 1e-9);
    assert!(bidiff_interval_1d(&ScalarField::signed_square(), 0.0, &o, BidiffMode::Point).unwrap().empty);
}

#[test]
fn distance_squared_bounds_on_a_segment() {
    let c = CompactSet::hull(vec![vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let r = dist2_second_difference_check(&c, 10_000, 4).unwrap();
    assert!(r.max_violation_low <= 1e-10 && r.max_violation_high <= 1e-10);
}

#[test]
fn max_rule_corpus() {
    let o = EstimatorOptions::default();
    let sq = ScalarField::quadratic(1, vec![1.0]).unwrap();
    let shifted = ScalarField::new(1, |x| -1.0 + x[0] * x[0]);
    let dirs = vec![vec![1.0], vec![-0.5]];
    let r = max_rule_check(&[sq.clone(), shifted], &[0.0], &dirs, EstimateKind::F2PlusLocal, &o).unwrap();
    assert_eq!(r.active, vec![0]);
    assert!(r.holds && r.rows.iter().all(|row| (row.lhs - row.rhs).abs() < 1e-9));
    let twice = ScalarField::quadratic(1, vec![2.0]).unwrap();
    let r = max_rule_check(&[sq, twice], &[0.0], &dirs, EstimateKind::F2PlusLocal, &o).unwrap();
    assert_eq!(r.active, vec![0, 1]);
    assert!((r.rows[0].lhs - 4.0).abs() < 1e-9 && r.holds);
}

#[test]
fn chain_rule_corpus() {
    let o = EstimatorOptions::default().with_schedule(Schedule { lambda0: 1e-3, ratio: 0.5, steps: 16 });
    let dirs = directions(1, 100, 21);
    let phi = SmoothMap::linear(1, 1, vec![2.0]);
    let r = chain_rule_check(&ScalarField::half_square(), &phi, &[0.0], &dirs, &o, 1).unwrap();
    assert!(r.holds && r.warnings.is_empty(), "{:?}", r.warnings);
    for row in &r.rows {
        let x = row.direction[0];
        assert!((row.lhs - if x > 0.0 { 8.0 * x * x } else { 0.0 }).abs() < 1e-6);
    }
    let cubic = SmoothMap::new(1, 1, |x| vec![x[0] + x[0].powi(3)], |x| vec![1.0 + 3.0 * x[0] * x[0]]);
    let r = chain_rule_check(&ScalarField::signed_square(), &cubic, &[0.0], &dirs, &o, 2).unwrap();
    assert!(r.holds && r.warnings.is_empty());
}

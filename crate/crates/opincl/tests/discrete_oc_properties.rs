use opincl::discrete_oc::{
    contraction_check, costate_decay_ratio, geometric_controls, gradient_fd_check, logistic_problem, random_lq, remainder_check,
    scalar_lq, tail_truncation_study,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..10_000, n in 1usize..4, m in 1usize..3) {
        let p = random_lq(n, m, 50, seed).unwrap();
        let u = geometric_controls(50, m, 1.0, 0.8);
        let r = gradient_fd_check(&p, &u, 1e-5).unwrap();
        prop_assert!(r.max_relative_error <= 1e-6, "{}", r.max_relative_error);
    }

    #[test]
    fn state_response_is_contracted(seed in 0u64..10_000) {
        let p = random_lq(2, 2, 40, seed).unwrap();
        let u = geometric_controls(40, 2, 0.5, 0.7);
        prop_assert!(contraction_check(&p, &u, 20, seed).unwrap().holds);
    }

    #[test]
    fn linear_stability_bound(u in prop::collection::vec(-3.0..3.0f64, 30)) {
        let p = scalar_lq(0.5, 0.8, 1.0, 1.0, 0.0, 30).unwrap();
        let us: Vec<Vec<f64>> = u.iter().map(|v| vec![*v]).collect();
        let x = p.forward(&us).unwrap();
        for i in 1..=30 {
            let bound: f64 = (0..i).map(|k| 0.8 * 0.5f64.powi((i - 1 - k) as i32) * u[k].abs()).sum();
            prop_assert!(x[i][0].abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn second_order_remainder_within_the_estimate(seed in 0u64..10_000, h in prop::collection::vec(-1.0..1.0f64, 30)) {
        let p = random_lq(1, 1, 30, seed).unwrap();
        let u = geometric_controls(30, 1, 1.0, 0.5);
        let hs: Vec<Vec<f64>> = h.iter().map(|v| vec![*v]).collect();
        prop_assert!(remainder_check(&p, &u, &hs).unwrap().holds);
        let q = logistic_problem(vec![0.7], 30).unwrap();
        prop_assert!(remainder_check(&q, &u, &hs).unwrap().holds);
    }
}

#[test]
fn logistic_gradient_matches_central_differences() {
    let p = logistic_problem(vec![1.0, -0.5], 50).unwrap();
    let u = geometric_controls(50, 2, 1.0, 0.5);
    assert!(gradient_fd_check(&p, &u, 1e-5).unwrap().max_relative_error <= 1e-6);
}

#[test]
fn costate_tail_decays() {
    let p = scalar_lq(0.5, 1.0, 1.0, 1.0, 1.0, 60).unwrap();
    let u = geometric_controls(60, 1, 1.0, 0.5);
    let x = p.forward(&u).unwrap();
    let adj = p.adjoint(&u, &x).unwrap();
    assert!(adj.terminal_tail <= 1e-8);
    let ratio = costate_decay_ratio(&adj, 10, 1e-300).unwrap();
    assert!(ratio <= 2.0 * 0.25 + 1e-2, "{ratio}");
}

#[test]
fn truncation_converges_geometrically() {
    let p = scalar_lq(0.5, 1.0, 1.0, 1.0, 1.0, 20).unwrap();
    let u = geometric_controls(80, 1, 1.0, 0.5);
    let r = tail_truncation_study(&p, &u, &[20, 40, 80]).unwrap();
    let d: Vec<f64> = r.rows.iter().filter_map(|r| r.prefix_difference).collect();
    assert_eq!(d.len(), 2);
    assert!(d[1] <= d[0] / 10.0, "{d:?}");
}

use opincl::{dist_to_set, hausdorff, CompactSet};
use proptest::prelude::*;

fn point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, dim)
}

fn cloud(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(point(dim), 1..6)
}

fn set(dim: usize) -> impl Strategy<Value = CompactSet> {
    (cloud(dim), any::<bool>()).prop_map(move |(pts, convex)| CompactSet::new(dim, pts, convex).unwrap())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hausdorff_is_a_pseudometric(a in set(2), b in set(2), c in set(2)) {
        let ab = hausdorff(&a, &b).unwrap();
        prop_assert!(hausdorff(&a, &a).unwrap() <= 1e-12);
        prop_assert!((ab - hausdorff(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!(ab <= hausdorff(&a, &c).unwrap() + hausdorff(&c, &b).unwrap() + 1e-9);
    }

    #[test]
    fn distance_is_one_lipschitz_in_the_query(s in set(3), y in point(3), z in point(3)) {
        let dy = dist_to_set(&y, &s).unwrap().distance;
        let dz = dist_to_set(&z, &s).unwrap().distance;
        prop_assert!((dy - dz).abs() <= dist(&y, &z) + 1e-9);
    }

    #[test]
    fn nearest_point_realizes_the_distance(s in set(2), y in point(2)) {
        let r = dist_to_set(&y, &s).unwrap();
        prop_assert!((dist(&y, &r.nearest) - r.distance).abs() <= 1e-9);
        prop_assert!(r.index < s.points().len());
    }

    #[test]
    fn hull_is_never_farther_than_its_vertices(pts in cloud(2), y in point(2)) {
        let c = CompactSet::new(2, pts.clone(), false).unwrap();
        let h = CompactSet::new(2, pts, true).unwrap();
        prop_assert!(dist_to_set(&y, &h).unwrap().distance <= dist_to_set(&y, &c).unwrap().distance + 1e-12);
    }

    #[test]
    fn hull_projection_satisfies_the_obtuse_angle_condition(pts in cloud(2), y in point(2)) {
        let h = CompactSet::new(2, pts.clone(), true).unwrap();
        let p = dist_to_set(&y, &h).unwrap().nearest;
        // <y - p, v - p> <= 0 for every vertex v
        for v in &pts {
            let s: f64 = (0..2).map(|i| (y[i] - p[i]) * (v[i] - p[i])).sum();
            prop_assert!(s <= 1e-9);
        }
    }
}

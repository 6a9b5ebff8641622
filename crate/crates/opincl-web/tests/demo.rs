use opincl_web::{distance_demo, second_order_demo, volterra_demo};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn volterra_matches_exponential() {
    let v = parse(volterra_demo(0.5, 1.0, 1001));
    assert!(v["error"].is_null(), "{v}");
    assert_eq!(v["converged"], true);
    assert_eq!(v["bound_satisfied"], true);
    let t = v["t"].as_array().unwrap();
    let u = v["u"].as_array().unwrap();
    assert_eq!(t.len(), 1001);
    let worst = t.iter().zip(u).map(|(t, u)| (u.as_f64().unwrap() - (0.5 * t.as_f64().unwrap()).exp()).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-2, "{worst}");
}

#[test]
fn volterra_rejects_bad_grid() {
    let v = parse(volterra_demo(0.5, 1.0, 1));
    assert!(v["error"].as_str().unwrap().contains("nodes"));
}

#[test]
fn signed_square_estimates() {
    let v = parse(second_order_demo("signed-square", "[0]", "[1]"));
    let est = v["estimates"].as_array().unwrap();
    let get = |kind: &str| est.iter().find(|e| e["kind"] == kind).unwrap()["value"].as_f64().unwrap();
    assert!((get("f2-plus-point") - 2.0).abs() < 1e-9);
    assert!((get("f2-plus-local") - 2.0).abs() < 1e-9);
    assert!((get("f2-minus-local") + 2.0).abs() < 1e-9);
    assert!(get("sym2-plus").abs() < 1e-9);
}

#[test]
fn unknown_field_is_an_error() {
    let v = parse(second_order_demo("cube", "[0]", "[1]"));
    assert!(v["error"].as_str().unwrap().contains("cube"));
    let v = parse(second_order_demo("square", "[0, 1]", "[1]"));
    assert!(!v["error"].is_null());
}

#[test]
fn square_distance_and_hausdorff() {
    let square = "[[0,0],[1,0],[1,1],[0,1]]";
    let v = parse(distance_demo(square, "[2, 0.5]", "[[0,0],[2,0],[2,1],[0,1]]"));
    assert!((v["distance"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["nearest"][0].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["hausdorff_to_b"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let v = parse(distance_demo(square, "[0.5, 0.5]", "[]"));
    assert!(v["distance"].as_f64().unwrap().abs() < 1e-12);
    assert!(v["hausdorff_to_b"].is_null());
}

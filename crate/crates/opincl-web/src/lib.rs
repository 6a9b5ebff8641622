//! Browser bindings. Each export takes plain numbers or JSON text and returns
//! a JSON string; failures come back as `{"error": "..."}` so the page never
//! has to catch exceptions.

use std::sync::Arc;

use opincl::{
    dist_to_set, estimate_second, hausdorff, solve_volterra, CompactSet, EstimateKind, EstimatorOptions, Grid, GridFunction,
    KernelOperator, MultiMap, OperatorKind, ScalarField,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
struct VolterraView {
    t: Vec<f64>,
    u: Vec<f64>,
    x: Vec<f64>,
    bound_u: Vec<f64>,
    observed_u: Vec<f64>,
    iterations: usize,
    converged: bool,
    bound_satisfied: bool,
    slack: f64,
}

/// Solves u(t) in {slope * (Au)(t) + offset} with (Au)(t) = int_0^t u on [0, 1],
/// starting from u = 0.
#[wasm_bindgen]
pub fn volterra_demo(slope: f64, offset: f64, nodes: usize) -> String {
    respond(volterra(slope, offset, nodes).map_err(|e| e.to_string()))
}

fn volterra(slope: f64, offset: f64, nodes: usize) -> opincl::Result<VolterraView> {
    if !(2..=20_001).contains(&nodes) {
        return Err(opincl::Error::Input(format!("nodes must lie in 2..=20001, got {nodes}")));
    }
    let grid = Arc::new(Grid::interval(0.0, 1.0, nodes)?);
    let op = KernelOperator::scalar(OperatorKind::Volterra, grid.clone(), 1, |_, _| 1.0)?;
    let map = MultiMap::affine(grid.clone(), slope, vec![offset], 0.0)?;
    let u0 = GridFunction::constant(grid.clone(), &[0.0])?;
    let (sol, rep) = solve_volterra(&op, &map, &u0, 1e-12, 2000)?;
    Ok(VolterraView {
        t: (0..grid.len()).map(|k| grid.coords(k)[0]).collect(),
        u: sol.u.values().to_vec(),
        x: sol.x.values().to_vec(),
        bound_u: rep.bound_u.values().to_vec(),
        observed_u: rep.observed_u.values().to_vec(),
        iterations: sol.iterations(),
        converged: sol.converged,
        bound_satisfied: rep.satisfied,
        slack: rep.slack,
    })
}

#[derive(Serialize)]
struct SecondOrderView {
    field: String,
    estimates: Vec<EstimateView>,
}

#[derive(Serialize)]
struct EstimateView {
    kind: EstimateKind,
    value: f64,
    tail: Vec<f64>,
}

fn field_by_name(name: &str) -> Result<ScalarField, String> {
    match name {
        "signed-square" => Ok(ScalarField::signed_square()),
        "half-square" => Ok(ScalarField::half_square()),
        "abs-product" => Ok(ScalarField::abs_product()),
        "square" => ScalarField::quadratic(1, vec![1.0]).map_err(|e| e.to_string()),
        other => Err(format!("unknown field {other:?}; try signed-square, half-square, abs-product, square")),
    }
}

/// Every second-order estimate of a builtin field at `x0` along `direction`.
/// Both points are JSON arrays.
#[wasm_bindgen]
pub fn second_order_demo(field: &str, x0_json: &str, direction_json: &str) -> String {
    respond(second_order(field, x0_json, direction_json))
}

fn second_order(field: &str, x0_json: &str, direction_json: &str) -> Result<SecondOrderView, String> {
    let f = field_by_name(field)?;
    let x0: Vec<f64> = serde_json::from_str(x0_json).map_err(|e| format!("x0: {e}"))?;
    let d: Vec<f64> = serde_json::from_str(direction_json).map_err(|e| format!("direction: {e}"))?;
    let opts = EstimatorOptions::default();
    let estimates = EstimateKind::ALL
        .iter()
        .filter(|k| **k != EstimateKind::Mixed)
        .map(|k| {
            let e = estimate_second(*k, &f, &x0, &d, None, &opts).map_err(|e| e.to_string())?;
            Ok::<_, String>(EstimateView { kind: e.kind, value: e.value, tail: e.tail_values })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SecondOrderView { field: field.to_string(), estimates })
}

#[derive(Serialize)]
struct DistanceView {
    distance: f64,
    nearest: Vec<f64>,
    hausdorff_to_b: Option<f64>,
}

/// Distance from a point to the convex hull of `points`, and the Hausdorff
/// distance between that hull and the hull of `other` when it is nonempty.
/// Inputs are JSON arrays of equal-length coordinate arrays.
#[wasm_bindgen]
pub fn distance_demo(points_json: &str, query_json: &str, other_json: &str) -> String {
    respond(distance(points_json, query_json, other_json))
}

fn hull(json: &str, what: &str) -> Result<CompactSet, String> {
    let pts: Vec<Vec<f64>> = serde_json::from_str(json).map_err(|e| format!("{what}: {e}"))?;
    let dim = pts.first().map(Vec::len).ok_or_else(|| format!("{what}: no points"))?;
    CompactSet::new(dim, pts, true).map_err(|e| format!("{what}: {e}"))
}

fn distance(points_json: &str, query_json: &str, other_json: &str) -> Result<DistanceView, String> {
    let a = hull(points_json, "points")?;
    let y: Vec<f64> = serde_json::from_str(query_json).map_err(|e| format!("query: {e}"))?;
    let r = dist_to_set(&y, &a).map_err(|e| e.to_string())?;
    let other: Vec<Vec<f64>> = serde_json::from_str(other_json).map_err(|e| format!("other: {e}"))?;
    let hausdorff_to_b = if other.is_empty() {
        None
    } else {
        let b = hull(other_json, "other")?;
        Some(hausdorff(&a, &b).map_err(|e| e.to_string())?)
    };
    Ok(DistanceView { distance: r.distance, nearest: r.nearest, hausdorff_to_b })
}

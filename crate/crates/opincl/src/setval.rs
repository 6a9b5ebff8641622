//! Finite representations of compact sets in R^n.
//!
//! A set is either a point cloud or, when `convex_hint` is set, the convex
//! hull of its listed points. Distances to hulls are exact minimum-norm-point
//! projections, so downstream second differences of `d^2` stay at roundoff
//! level.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SetRecord", into = "SetRecord")]
pub struct CompactSet {
    dim: usize,
    convex_hint: bool,
    points: Vec<Vec<f64>>,
}

/// Plain record used for serialization: `{dim, convex_hint, points}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetRecord {
    pub dim: usize,
    #[serde(default)]
    pub convex_hint: bool,
    pub points: Vec<Vec<f64>>,
}

impl TryFrom<SetRecord> for CompactSet {
    type Error = Error;
    fn try_from(r: SetRecord) -> Result<Self> {
        CompactSet::new(r.dim, r.points, r.convex_hint)
    }
}

impl From<CompactSet> for SetRecord {
    fn from(s: CompactSet) -> Self {
        SetRecord { dim: s.dim, convex_hint: s.convex_hint, points: s.points }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetDistanceResult {
    pub distance: f64,
    pub nearest: Vec<f64>,
    /// Index of the nearest listed point. For hulls this is the vertex
    /// carrying the largest barycentric weight of `nearest`.
    pub index: usize,
}

impl CompactSet {
    pub fn new(dim: usize, points: Vec<Vec<f64>>, convex_hint: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("set dimension must be positive".into()));
        }
        if points.is_empty() {
            return Err(Error::Input("compact set needs at least one point".into()));
        }
        for p in &points {
            check_dim(dim, p.len())?;
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::Input("set coordinates must be finite".into()));
            }
        }
        Ok(CompactSet { dim, convex_hint, points })
    }

    pub fn singleton(point: Vec<f64>) -> Result<Self> {
        CompactSet::new(point.len(), vec![point], false)
    }

    pub fn hull(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        CompactSet::new(dim, points, true)
    }

    /// Regular polygon with `vertices` corners inscribed in the disc of the
    /// given radius, flagged convex. Used to stand in for 2-D balls.
    pub fn polygon_ball(center: &[f64], radius: f64, vertices: usize) -> Result<Self> {
        if center.len() != 2 || vertices < 3 || !(radius >= 0.0) {
            return Err(Error::Input("polygon ball needs a 2-D center, radius >= 0, >= 3 vertices".into()));
        }
        let pts = (0..vertices)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / vertices as f64;
                vec![center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            })
            .collect();
        CompactSet::new(2, pts, true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn convex_hint(&self) -> bool {
        self.convex_hint
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Largest norm of a listed point; equals sup{|y| : y in set} for hulls too.
    pub fn radius(&self) -> f64 {
        self.points.iter().map(|p| norm(p)).fold(0.0, f64::max)
    }
}

pub fn dist_to_set(y: &[f64], set: &CompactSet) -> Result<SetDistanceResult> {
    check_dim(set.dim, y.len())?;
    if !set.convex_hint || set.points.len() == 1 {
        let mut best = (f64::INFINITY, 0usize);
        for (i, p) in set.points.iter().enumerate() {
            let d2 = dist_sq(p, y);
            // strict comparison keeps the lowest index on ties
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        return Ok(SetDistanceResult {
            distance: best.0.sqrt(),
            nearest: set.points[best.1].clone(),
            index: best.1,
        });
    }
    let shifted: Vec<Vec<f64>> = set
        .points
        .iter()
        .map(|p| p.iter().zip(y).map(|(a, b)| a - b).collect())
        .collect();
    let (weights, x) = min_norm_point(&shifted);
    let mut index = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > weights[index] {
            index = i;
        }
    }
    Ok(SetDistanceResult {
        distance: norm(&x),
        nearest: x.iter().zip(y).map(|(a, b)| a + b).collect(),
        index,
    })
}

/// Hausdorff distance between the represented sets.
///
/// The one-sided excess sup_{a in A} d(a, B) is evaluated at the listed
/// points of A. That is exact when A is a point cloud, and exact for a hull A
/// whenever B is convex (d(., B) is then convex and peaks at a vertex).
pub fn hausdorff(a: &CompactSet, b: &CompactSet) -> Result<f64> {
    check_dim(a.dim, b.dim)?;
    Ok(excess(a, b)?.max(excess(b, a)?))
}

fn excess(a: &CompactSet, b: &CompactSet) -> Result<f64> {
    let mut e: f64 = 0.0;
    for p in &a.points {
        e = e.max(dist_to_set(p, b)?.distance);
    }
    Ok(e)
}

pub fn minkowski_shift(set: &CompactSet, v: &[f64]) -> Result<CompactSet> {
    check_dim(set.dim, v.len())?;
    let points = set
        .points
        .iter()
        .map(|p| p.iter().zip(v).map(|(a, b)| a + b).collect())
        .collect();
    CompactSet::new(set.dim, points, set.convex_hint)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub(crate) fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum-norm point of conv{q_i} by Wolfe's active-set method.
/// Returns the barycentric weights (one per input point) and the point.
fn min_norm_point(q: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = q.len();
    let dim = q[0].len();
    let max_sq = q.iter().map(|p| dot(p, p)).fold(0.0, f64::max);
    let tol = 1e-14 * max_sq.max(f64::MIN_POSITIVE);

    let mut start = 0;
    for i in 1..m {
        if dot(&q[i], &q[i]) < dot(&q[start], &q[start]) {
            start = i;
        }
    }
    let mut active = vec![start];
    let mut lam = vec![1.0];
    let mut x = q[start].clone();

    for _ in 0..(10 * m + 100) {
        let xx = dot(&x, &x);
        let mut j = 0;
        let mut best = f64::INFINITY;
        for (i, p) in q.iter().enumerate() {
            let v = dot(&x, p);
            if v < best {
                best = v;
                j = i;
            }
        }
        // Frank-Wolfe gap bounds |x|^2 - min |.|^2
        if xx - best <= tol || active.contains(&j) {
            break;
        }
        active.push(j);
        lam.push(0.0);

        loop {
            let alpha = affine_minimizer(q, &active);
            if alpha.iter().all(|a| *a > 1e-15) {
                lam = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (l, a) in lam.iter().zip(&alpha) {
                if *a <= 1e-15 && l - a > 0.0 {
                    theta = theta.min(l / (l - a));
                }
            }
            for (l, a) in lam.iter_mut().zip(&alpha) {
                *l = theta * a + (1.0 - theta) * *l;
            }
            let mut k = 0;
            let mut removed = false;
            while k < active.len() {
                if lam[k] <= 1e-15 {
                    active.remove(k);
                    lam.remove(k);
                    removed = true;
                } else {
                    k += 1;
                }
            }
            if !removed {
                // numerical stall: drop the smallest weight
                let (kmin, _) = lam
                    .iter()
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (i, l)| if *l < acc.1 { (i, *l) } else { acc });
                active.remove(kmin);
                lam.remove(kmin);
            }
            let s: f64 = lam.iter().sum();
            lam.iter_mut().for_each(|l| *l /= s);
            if active.len() == 1 {
                break;
            }
        }
        x = vec![0.0; dim];
        for (idx, l) in active.iter().zip(&lam) {
            for (xc, qc) in x.iter_mut().zip(&q[*idx]) {
                *xc += l * qc;
            }
        }
    }

    let mut weights = vec![0.0; m];
    for (idx, l) in active.iter().zip(&lam) {
        weights[*idx] = *l;
    }
    (weights, x)
}

/// Weights summing to one that minimize |sum a_i q_i| over the affine hull of
/// the active points.
fn affine_minimizer(q: &[Vec<f64>], active: &[usize]) -> Vec<f64> {
    let k = active.len();
    let mut sys = DMatrix::<f64>::zeros(k + 1, k + 1);
    for a in 0..k {
        for b in 0..k {
            sys[(a, b)] = dot(&q[active[a]], &q[active[b]]);
        }
        sys[(a, k)] = 1.0;
        sys[(k, a)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(k + 1);
    rhs[k] = 1.0;
    let sol = sys
        .clone()
        .lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| {
            sys.svd(true, true)
                .solve(&rhs, 1e-14)
                .unwrap_or_else(|_| DVector::from_element(k + 1, 1.0 / k as f64))
        });
    sol.iter().take(k).copied().collect()
}

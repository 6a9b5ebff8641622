//! Named kernels, multimaps, fields and control problems, and the closed
//! forms known for the builtin fields.

use std::sync::Arc;

use opincl::discrete_oc::{lq_problem, logistic_problem, random_lq};
use opincl::penalty::{Certificate, Endpoint, Integrand};
use opincl::second_order::{EstimateKind, ScalarField, SmoothMap};
use opincl::{CompactSet, DiscreteOCProblem, Grid, GridFunction, KernelOperator, MultiMap, OperatorKind, Result};

use crate::config::{
    CertificateSpec, EndpointName, FieldSpec, GridSpec, IntegrandName, KernelSpec, KindName, MultiMapSpec, OcSpec,
    OperatorSpec, SmoothMapSpec,
};

pub fn grid(spec: &GridSpec) -> Result<Arc<Grid>> {
    let g = match spec {
        GridSpec::Interval { t0, t1, nodes } => Grid::interval(*t0, *t1, *nodes)?,
        GridSpec::Box { lower, upper, nodes } => Grid::box_domain(lower.clone(), upper.clone(), nodes.clone())?,
    };
    Ok(Arc::new(g))
}

fn euclid(t: &[f64], s: &[f64]) -> f64 {
    t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn operator(spec: &OperatorSpec, grid: Arc<Grid>) -> Result<KernelOperator> {
    let d = spec.dim;
    let op = match &spec.kernel {
        KernelSpec::VolterraIdentity => KernelOperator::scalar(OperatorKind::Volterra, grid, d, |_, _| 1.0)?,
        KernelSpec::VolterraConstant { c } => {
            let c = *c;
            KernelOperator::scalar(OperatorKind::Volterra, grid, d, move |_, _| c)?
        }
        KernelSpec::VolterraExp { rate } => {
            let r = *rate;
            KernelOperator::scalar(OperatorKind::Volterra, grid, d, move |t, s| (r * (t[0] - s[0])).exp())?
        }
        KernelSpec::FredholmConstant { c } => {
            let c = *c;
            KernelOperator::scalar(OperatorKind::Fredholm, grid, d, move |_, _| c)?
        }
        KernelSpec::FredholmExp { c, rate } => {
            let (c, r) = (*c, *rate);
            KernelOperator::scalar(OperatorKind::Fredholm, grid, d, move |t, s| c * (-r * euclid(t, s)).exp())?
        }
        KernelSpec::Table { kind, values } => {
            let k = match kind {
                KindName::Volterra => OperatorKind::Volterra,
                KindName::Fredholm => OperatorKind::Fredholm,
            };
            KernelOperator::from_table(k, grid, d, values)?
        }
    };
    let op = match spec.lipschitz {
        Some(l) => op.with_lipschitz(l)?,
        None => op,
    };
    match spec.declared_norm {
        Some(a) => op.with_declared_opnorm(a),
        None => Ok(op),
    }
}

pub fn multimap(spec: &MultiMapSpec, grid: Arc<Grid>, dim: usize) -> Result<MultiMap> {
    match spec {
        MultiMapSpec::Affine { slope, offset, modulus_floor } => MultiMap::affine(grid, *slope, offset.clone(), *modulus_floor),
        MultiMapSpec::AffineBall { slope, offset, radius, vertices } => {
            MultiMap::affine_ball(grid, *slope, offset.clone(), *radius, *vertices)
        }
        MultiMapSpec::ConstantSet { points, convex, modulus } => {
            let d = points.first().map_or(0, |p| p.len());
            let set = CompactSet::new(d, points.clone(), *convex)?;
            MultiMap::constant(grid, dim, set, *modulus)
        }
    }
}

pub fn integrand(name: IntegrandName) -> Integrand {
    match name {
        IntegrandName::ControlSquare => Integrand::control_square(),
        IntegrandName::HalfQuadratic => Integrand::half_quadratic(),
        IntegrandName::AbsControl => Integrand::abs_control(),
    }
}

pub fn endpoint(name: EndpointName) -> Endpoint {
    match name {
        EndpointName::Zero => Endpoint::zero(),
    }
}

pub fn certificate(spec: &CertificateSpec, grid: Arc<Grid>, dim: usize) -> Result<Certificate> {
    match spec {
        CertificateSpec::Zero => Ok(Certificate::zero(grid, dim)),
        CertificateSpec::Constant { v_star, u_star, c1, c2 } => Ok(Certificate {
            v_star: GridFunction::constant(grid.clone(), v_star)?,
            u_star: GridFunction::constant(grid, u_star)?,
            c1: c1.clone(),
            c2: c2.clone(),
        }),
    }
}

fn square_dim(len: usize) -> Result<usize> {
    let d = (len as f64).sqrt().round() as usize;
    if d == 0 || d * d != len {
        return Err(opincl::Error::Input(format!("matrix with {len} entries is not square")));
    }
    Ok(d)
}

pub fn field(spec: &FieldSpec) -> Result<ScalarField> {
    Ok(match spec {
        FieldSpec::Quadratic { a, constant } => {
            let q = ScalarField::quadratic(square_dim(a.len())?, a.clone())?;
            if *constant == 0.0 {
                q
            } else {
                let (c, k, inner) = (*constant, q.declared_lipschitz2(), q.clone());
                let f = ScalarField::new(q.dim(), move |x| inner.eval(x).map_or(f64::NAN, |v| v + c));
                match k {
                    Some(k) => f.with_lipschitz2(k),
                    None => f,
                }
            }
        }
        FieldSpec::SignedSquare => ScalarField::signed_square(),
        FieldSpec::HalfSquare => ScalarField::half_square(),
        FieldSpec::AbsProduct => ScalarField::abs_product(),
        FieldSpec::MaxOfQuadratics { matrices } => {
            let fs: Vec<ScalarField> = matrices
                .iter()
                .map(|a| ScalarField::quadratic(square_dim(a.len())?, a.clone()))
                .collect::<Result<_>>()?;
            ScalarField::max_of(&fs)?
        }
        FieldSpec::DistanceSquaredToPolytope { vertices } => {
            ScalarField::distance_squared(CompactSet::hull(vertices.clone())?)
        }
        FieldSpec::Table1d { xs, ys } => {
            if xs.len() < 2 || xs.len() != ys.len() || xs.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(opincl::Error::Input("table needs >= 2 strictly increasing xs and matching ys".into()));
            }
            let (xs, ys) = (xs.clone(), ys.clone());
            ScalarField::new(1, move |x| {
                let t = x[0];
                let n = xs.len();
                let i = match xs.iter().position(|v| *v > t) {
                    Some(0) => 0,
                    Some(i) => i - 1,
                    None => n - 2,
                };
                let w = (t - xs[i]) / (xs[i + 1] - xs[i]);
                ys[i] + w * (ys[i + 1] - ys[i])
            })
        }
        FieldSpec::Negated { of } => field(of)?.negated(),
    })
}

pub fn smooth_map(spec: &SmoothMapSpec) -> Result<SmoothMap> {
    match spec {
        SmoothMapSpec::Linear { rows, cols, b } => {
            if b.len() != rows * cols {
                return Err(opincl::Error::DimensionMismatch { expected: rows * cols, found: b.len() });
            }
            Ok(SmoothMap::linear(*rows, *cols, b.clone()))
        }
        SmoothMapSpec::Polynomial1d { coeffs } => {
            let (c1, c2) = (coeffs.clone(), coeffs.clone());
            Ok(SmoothMap::new(
                1,
                1,
                move |x| vec![c1.iter().rev().fold(0.0, |acc, c| acc * x[0] + c)],
                move |x| {
                    let d: f64 = c2.iter().enumerate().skip(1).map(|(k, c)| k as f64 * c * x[0].powi(k as i32 - 1)).sum();
                    vec![d]
                },
            ))
        }
    }
}

/// Each spec expands to one or more problems; random instances draw their
/// seeds from `seeds`.
pub fn oc_problems(
    spec: &OcSpec,
    horizon: usize,
    seeds: &mut impl FnMut() -> u64,
) -> Result<Vec<(String, DiscreteOCProblem)>> {
    match spec {
        OcSpec::Lq { a, b, q, r, x0 } => {
            Ok(vec![("lq".into(), lq_problem(a.clone(), b.clone(), q.clone(), r.clone(), x0.clone(), horizon)?)])
        }
        OcSpec::RandomLq { n, m, count } => (0..*count)
            .map(|_| {
                let s = seeds();
                Ok((format!("random-lq-{n}x{m}-{s:016x}"), random_lq(*n, *m, horizon, s)?))
            })
            .collect(),
        OcSpec::Logistic { x0 } => Ok(vec![("logistic".into(), logistic_problem(x0.clone(), horizon)?)]),
    }
}

/// Known values of the estimators on builtin fields. Quadratics are exact
/// at every base point; the nonsmooth examples are tabulated at the origin.
pub fn closed_form(spec: &FieldSpec, kind: EstimateKind, x0: &[f64], d: &[f64]) -> Option<f64> {
    use EstimateKind::*;
    let at_origin = x0.iter().all(|v| *v == 0.0);
    match spec {
        FieldSpec::Quadratic { a, .. } if kind != Mixed => {
            let n = d.len();
            if a.len() != n * n {
                return None;
            }
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += a[i * n + j] * d[i] * d[j];
                }
            }
            Some(2.0 * s)
        }
        FieldSpec::SignedSquare if at_origin => match kind {
            Sym2Plus | Sym2Minus => Some(0.0),
            F2PlusPoint | F2MinusPoint => Some(2.0 * d[0] * d[0].abs()),
            F2PlusLocal => Some(2.0 * d[0] * d[0]),
            F2MinusLocal => Some(-2.0 * d[0] * d[0]),
            Mixed => None,
        },
        FieldSpec::HalfSquare if at_origin => match kind {
            F2PlusLocal => Some(2.0 * d[0] * d[0]),
            F2MinusLocal => Some(0.0),
            F2PlusPoint | F2MinusPoint => Some(2.0 * d[0].max(0.0).powi(2)),
            Sym2Plus | Sym2Minus => Some(d[0] * d[0]),
            Mixed => None,
        },
        FieldSpec::AbsProduct if at_origin => match kind {
            Sym2Plus | Sym2Minus | F2PlusPoint | F2MinusPoint => Some(2.0 * (d[0] * d[1]).abs()),
            _ => None,
        },
        _ => None,
    }
}

/// Deterministic listing of every named builtin with its parameters.
pub fn catalog() -> String {
    let sections: [(&str, &[&str]); 7] = [
        ("commands", &["solve-inclusion", "perturb", "penalty", "certify", "second-order", "grad-check", "dist2-check"]),
        (
            "kernels",
            &[
                "volterra-identity {}",
                "volterra-constant {c}",
                "volterra-exp {rate}            K(t,s) = exp(rate (t - s))",
                "fredholm-constant {c}",
                "fredholm-exp {c, rate}         K(t,s) = c exp(-rate |t - s|)",
                "table {kind, values}           scalar values on node pairs",
            ],
        ),
        (
            "multimaps",
            &[
                "affine {slope, offset, modulus_floor = 0}",
                "affine-ball {slope, offset, radius, vertices = 16}",
                "constant-set {points, convex = false, modulus}",
            ],
        ),
        (
            "fields",
            &[
                "quadratic {a, constant = 0}    <Ax, x> + constant",
                "signed-square {}               x |x|",
                "example3-half-square {}        max(x, 0)^2",
                "abs-product {}                 |x1 x2|",
                "max-of-quadratics {matrices}",
                "distance-squared-to-polytope {vertices}",
                "table1d {xs, ys}               piecewise linear",
                "negated {of}",
            ],
        ),
        ("smooth-maps", &["linear {rows, cols, b}", "polynomial1d {coeffs}"]),
        (
            "oc-problems",
            &[
                "lq {a, b, q, r, x0}            x+ = Ax + Bu, cost x'Qx + u'Ru",
                "random-lq {n, m, count = 1}    |A|_F = 0.6, |B|_F = 1",
                "logistic {x0}                  x+ = 0.5 tanh x + 0.5 u",
            ],
        ),
        ("integrands", &["control-square", "half-quadratic", "abs-control", "endpoint: zero"]),
    ];
    let mut out = String::new();
    for (name, items) in sections {
        out.push_str(name);
        out.push_str(":\n");
        for it in items {
            out.push_str("  ");
            out.push_str(it);
            out.push('\n');
        }
    }
    out
}

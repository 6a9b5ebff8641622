//! Second-order directional derivatives of nonsmooth functions, estimated
//! from difference quotients.
//!
//! The forward quotient at base point b is
//! (f(b + 2 lam x) - 2 f(b + lam x) + f(b)) / lam^2 with b = x0 + lam z.
//! The limit in lam is replaced by the max (or min) over the second half of
//! a geometric schedule, and the sup (or inf) over z by a finite sample, so a
//! sup-type estimate is a lower bound of the true value.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::setval::{dist_to_set, norm, CompactSet};

pub type FieldEval = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct ScalarField {
    dim: usize,
    eval: Arc<FieldEval>,
    declared_lipschitz2: Option<f64>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("dim", &self.dim)
            .field("declared_lipschitz2", &self.declared_lipschitz2)
            .finish()
    }
}

impl ScalarField {
    pub fn new(dim: usize, eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        ScalarField { dim, eval: Arc::new(eval), declared_lipschitz2: None }
    }

    /// Declares |f(y+a+b) - f(y+a) - f(y+b) + f(y)| <= K |a| |b| near the base point.
    pub fn with_lipschitz2(mut self, k: f64) -> Self {
        self.declared_lipschitz2 = Some(k);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn declared_lipschitz2(&self) -> Option<f64> {
        self.declared_lipschitz2
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let v = (self.eval)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation { at: format!("{x:?}"), message: "non-finite field value".into() })
        }
    }

    pub fn negated(&self) -> ScalarField {
        let f = self.eval.clone();
        ScalarField { dim: self.dim, eval: Arc::new(move |x| -f(x)), declared_lipschitz2: self.declared_lipschitz2 }
    }

    /// Pointwise maximum of several fields of equal dimension.
    pub fn max_of(fields: &[ScalarField]) -> Result<ScalarField> {
        let dim = fields.first().ok_or_else(|| Error::Input("max of an empty list".into()))?.dim;
        for f in fields {
            check_dim(dim, f.dim)?;
        }
        let evals: Vec<Arc<FieldEval>> = fields.iter().map(|f| f.eval.clone()).collect();
        Ok(ScalarField::new(dim, move |x| evals.iter().map(|e| e(x)).fold(f64::NEG_INFINITY, f64::max)))
    }

    /// ⟨Ax, x⟩ for a symmetric or general square matrix (row-major).
    pub fn quadratic(dim: usize, a: Vec<f64>) -> Result<ScalarField> {
        check_dim(dim * dim, a.len())?;
        let k = 2.0 * a.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(ScalarField::new(dim, move |x| {
            let mut s = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    s += a[i * dim + j] * x[i] * x[j];
                }
            }
            s
        })
        .with_lipschitz2(k))
    }

    /// x |x| in one dimension.
    pub fn signed_square() -> ScalarField {
        ScalarField::new(1, |x| x[0] * x[0].abs()).with_lipschitz2(2.0)
    }

    /// max(x, 0)^2 in one dimension.
    pub fn half_square() -> ScalarField {
        ScalarField::new(1, |x| x[0].max(0.0).powi(2)).with_lipschitz2(2.0)
    }

    /// |x1 x2| in two dimensions.
    pub fn abs_product() -> ScalarField {
        ScalarField::new(2, |x| (x[0] * x[1]).abs())
    }

    /// Squared distance to a compact set.
    pub fn distance_squared(set: CompactSet) -> ScalarField {
        let dim = set.dim();
        ScalarField::new(dim, move |x| dist_to_set(x, &set).map(|r| r.distance * r.distance).unwrap_or(f64::NAN))
            .with_lipschitz2(2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateKind {
    /// sup over z of the limsup of the forward quotient.
    F2PlusLocal,
    /// inf over z of the liminf of the forward quotient.
    F2MinusLocal,
    /// limsup of the forward quotient at z = 0.
    F2PlusPoint,
    /// liminf of the forward quotient at z = 0.
    F2MinusPoint,
    /// limsup of (f(x0 + lam x) - 2 f(x0) + f(x0 - lam x)) / lam^2.
    Sym2Plus,
    /// liminf of the symmetric quotient.
    Sym2Minus,
    /// sup over (z1, z2) of the limsup of the two-parameter mixed quotient.
    Mixed,
}

impl EstimateKind {
    pub const ALL: [EstimateKind; 7] = [
        EstimateKind::F2PlusLocal,
        EstimateKind::F2MinusLocal,
        EstimateKind::F2PlusPoint,
        EstimateKind::F2MinusPoint,
        EstimateKind::Sym2Plus,
        EstimateKind::Sym2Minus,
        EstimateKind::Mixed,
    ];

    fn is_upper(self) -> bool {
        matches!(self, EstimateKind::F2PlusLocal | EstimateKind::F2PlusPoint | EstimateKind::Sym2Plus | EstimateKind::Mixed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lambda0: f64,
    pub ratio: f64,
    pub steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { lambda0: 0.1, ratio: 0.5, steps: 16 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Input("schedule lambda0 must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Input("schedule ratio must lie in (0, 1)".into()));
        }
        if self.steps < 8 {
            return Err(Error::Input("schedule needs at least 8 steps".into()));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.steps).map(|j| self.lambda0 * self.ratio.powi(j as i32)).collect()
    }

    /// The last ceil(steps / 2) entries, over which limsup/liminf are surrogated.
    pub fn tail(&self) -> Vec<f64> {
        let l = self.lambdas();
        l[self.steps / 2..].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorOptions {
    #[serde(default)]
    pub schedule: Schedule,
    /// Number of random base directions z (Gaussian, cycling scales 0.1, 1, 10).
    #[serde(default = "default_z_samples")]
    pub z_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Extra base directions tried alongside the samples.
    #[serde(default)]
    pub hints: Vec<Vec<f64>>,
}

fn default_z_samples() -> usize {
    24
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { schedule: Schedule::default(), z_samples: default_z_samples(), seed: 0, hints: Vec::new() }
    }
}

impl EstimatorOptions {
    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondOrderEstimate {
    pub kind: EstimateKind,
    pub value: f64,
    pub lambda_schedule: Vec<f64>,
    pub z_samples: usize,
    /// Base direction at which the value was attained (the pair is flattened
    /// for the mixed kind); `None` for point kinds.
    pub attained_z: Option<Vec<f64>>,
    /// Quotients over the schedule tail at the attained base direction.
    pub tail_values: Vec<f64>,
}

const CANCEL: f64 = 64.0 * f64::EPSILON;

fn guarded(num: f64, scale: f64) -> f64 {
    if num.abs() < CANCEL * scale {
        0.0
    } else {
        num
    }
}

fn axpy(base: &[f64], terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = base.to_vec();
    for (c, v) in terms {
        for (o, vi) in out.iter_mut().zip(v.iter()) {
            *o += c * vi;
        }
    }
    out
}

fn forward_quotient(f: &ScalarField, x0: &[f64], z: &[f64], x: &[f64], lam: f64) -> Result<f64> {
    let b = axpy(x0, &[(lam, z)]);
    let f2 = f.eval(&axpy(&b, &[(2.0 * lam, x)]))?;
    let f1 = f.eval(&axpy(&b, &[(lam, x)]))?;
    let f0 = f.eval(&b)?;
    let scale = f2.abs().max(f1.abs()).max(f0.abs());
    Ok(guarded(f2 - 2.0 * f1 + f0, scale) / (lam * lam))
}

fn symmetric_quotient(f: &ScalarField, x0: &[f64], x: &[f64], lam: f64) -> Result<f64> {
    let fp = f.eval(&axpy(x0, &[(lam, x)]))?;
    let fm = f.eval(&axpy(x0, &[(-lam, x)]))?;
    let f0 = f.eval(x0)?;
    let scale = fp.abs().max(fm.abs()).max(f0.abs());
    Ok(guarded(fp - 2.0 * f0 + fm, scale) / (lam * lam))
}

#[allow(clippy::too_many_arguments)]
fn mixed_quotient(
    f: &ScalarField,
    x0: &[f64],
    z1: &[f64],
    z2: &[f64],
    x1: &[f64],
    x2: &[f64],
    l1: f64,
    l2: f64,
) -> Result<f64> {
    let b = axpy(x0, &[(l1, z1), (l2, z2)]);
    let f12 = f.eval(&axpy(&b, &[(l1, x1), (l2, x2)]))?;
    let f1 = f.eval(&axpy(&b, &[(l1, x1)]))?;
    let f2 = f.eval(&axpy(&b, &[(l2, x2)]))?;
    let f0 = f.eval(&b)?;
    let scale = f12.abs().max(f1.abs()).max(f2.abs()).max(f0.abs());
    Ok(guarded(f12 - f1 - f2 + f0, scale) / (l1 * l2))
}

fn gaussian_bases(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = [0.1, 1.0, 10.0];
    (0..count)
        .map(|k| (0..dim).map(|_| scales[k % 3] * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Base directions for the forward kinds: {0, samples, hints}, each paired
/// with its shift by -x, plus -2x.
fn base_set(x: &[f64], opts: &EstimatorOptions) -> Vec<Vec<f64>> {
    let dim = x.len();
    let mut bases = vec![vec![0.0; dim]];
    bases.extend(gaussian_bases(dim, opts.z_samples, opts.seed));
    bases.extend(opts.hints.iter().filter(|h| h.len() == dim).cloned());
    let mut out = Vec::with_capacity(2 * bases.len() + 1);
    for b in bases {
        let shifted = axpy(&b, &[(-1.0, x)]);
        out.push(b);
        out.push(shifted);
    }
    out.push(x.iter().map(|v| -2.0 * v).collect());
    out
}

fn tail_extreme(values: &[f64], upper: bool) -> f64 {
    if upper {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn estimate_second(
    kind: EstimateKind,
    f: &ScalarField,
    x0: &[f64],
    x: &[f64],
    x2: Option<&[f64]>,
    opts: &EstimatorOptions,
) -> Result<SecondOrderEstimate> {
    opts.schedule.validate()?;
    check_dim(f.dim(), x0.len())?;
    check_dim(f.dim(), x.len())?;
    let tail = opts.schedule.tail();
    let upper = kind.is_upper();
    let finish = |value: f64, attained_z: Option<Vec<f64>>, tail_values: Vec<f64>| SecondOrderEstimate {
        kind,
        value,
        lambda_schedule: opts.schedule.lambdas(),
        z_samples: opts.z_samples,
        attained_z,
        tail_values,
    };
    match kind {
        EstimateKind::F2PlusPoint | EstimateKind::F2MinusPoint => {
            let zero = vec![0.0; x.len()];
            let q: Vec<f64> = tail.iter().map(|l| forward_quotient(f, x0, &zero, x, *l)).collect::<Result<_>>()?;
            Ok(finish(tail_extreme(&q, upper), None, q))
        }
        EstimateKind::Sym2Plus | EstimateKind::Sym2Minus => {
            let q: Vec<f64> = tail.iter().map(|l| symmetric_quotient(f, x0, x, *l)).collect::<Result<_>>()?;
            Ok(finish(tail_extreme(&q, upper), None, q))
        }
        EstimateKind::F2PlusLocal | EstimateKind::F2MinusLocal => {
            let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
            for z in base_set(x, opts) {
                let q: Vec<f64> = tail.iter().map(|l| forward_quotient(f, x0, &z, x, *l)).collect::<Result<_>>()?;
                let v = tail_extreme(&q, upper);
                let better = match &best {
                    None => true,
                    Some((b, _, _)) => (upper && v > *b) || (!upper && v < *b),
                };
                if better {
                    best = Some((v, z, q));
                }
            }
            let (v, z, q) = best.expect("base set is never empty");
            Ok(finish(v, Some(z), q))
        }
        EstimateKind::Mixed => {
            let x2 = x2.ok_or_else(|| Error::Input("mixed estimate needs a second direction".into()))?;
            check_dim(f.dim(), x2.len())?;
            let dim = x.len();
            let samples = gaussian_bases(dim, 2 * opts.z_samples, opts.seed);
            let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![0.0; dim], vec![0.0; dim])];
            for pair in samples.chunks(2) {
                pairs.push((pair[0].clone(), pair[1].clone()));
                pairs.push((pair[1].clone(), pair[0].clone()));
            }
            for h in opts.hints.iter().filter(|h| h.len() == dim) {
                pairs.push((h.clone(), h.clone()));
            }
            let closed: Vec<(Vec<f64>, Vec<f64>)> = pairs
                .into_iter()
                .flat_map(|(a, b)| {
                    let sa = axpy(&a, &[(-1.0, x)]);
                    let sb = axpy(&b, &[(-1.0, x2)]);
                    [(a, b), (sa, sb)]
                })
                .collect();
            let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
            for (z1, z2) in closed {
                let mut q = Vec::with_capacity(tail.len() * tail.len());
                for l1 in &tail {
                    for l2 in &tail {
                        q.push(mixed_quotient(f, x0, &z1, &z2, x, x2, *l1, *l2)?);
                    }
                }
                let v = tail_extreme(&q, true);
                if best.as_ref().map_or(true, |(b, _, _)| v > *b) {
                    best = Some((v, [z1, z2].concat(), q));
                }
            }
            let (v, z, q) = best.expect("pair set is never empty");
            Ok(finish(v, Some(z), q))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BidiffMode {
    /// Sandwich by the local (sup/inf over z) derivatives.
    Local,
    /// Sandwich by the point quotients at z = 0.
    Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidiffInterval {
    pub lower: f64,
    pub upper: f64,
    pub empty: bool,
}

/// Coefficients q with q x^2 sandwiched between the lower and upper second
/// derivatives at x0, for a one-dimensional field (directions +1 and -1).
pub fn bidiff_interval_1d(f: &ScalarField, x0: f64, opts: &EstimatorOptions, mode: BidiffMode) -> Result<BidiffInterval> {
    check_dim(1, f.dim())?;
    let (up, lo) = match mode {
        BidiffMode::Local => (EstimateKind::F2PlusLocal, EstimateKind::F2MinusLocal),
        BidiffMode::Point => (EstimateKind::F2PlusPoint, EstimateKind::F2MinusPoint),
    };
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for dir in [1.0, -1.0] {
        lower = lower.max(estimate_second(lo, f, &[x0], &[dir], None, opts)?.value);
        upper = upper.min(estimate_second(up, f, &[x0], &[dir], None, opts)?.value);
    }
    Ok(BidiffInterval { lower, upper, empty: lower > upper + 1e-9 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dist2Report {
    pub trials: usize,
    /// Largest amount by which a second difference fell below 0.
    pub max_violation_low: f64,
    /// Largest amount by which a second difference exceeded its upper bound.
    pub max_violation_high: f64,
}

/// Random checks of the second-difference bounds for d_C^2 with C convex:
/// 0 <= d2(z+2x) - 2 d2(z+x) + d2(z) <= 2|x|^2,
/// 0 <= d2(z+x) - 2 d2(z) + d2(z-x) <= 2|x|^2,
/// and for z in C, |d2(z+x1+x2) - d2(z+x1) - d2(z+x2) + d2(z)| <= 4 |x1||x2|.
pub fn dist2_second_difference_check(set: &CompactSet, trials: usize, seed: u64) -> Result<Dist2Report> {
    if !set.convex_hint() && set.points().len() > 1 {
        return Err(Error::Precondition("distance-squared bounds need a convex set".into()));
    }
    let dim = set.dim();
    let d2 = |y: &[f64]| -> Result<f64> {
        let r = dist_to_set(y, set)?;
        Ok(r.distance * r.distance)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = 2.0 * set.radius().max(1.0);
    let gauss = |s: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let x_scales = [1e-3, 1e-2, 0.1, 1.0, 3.0];
    let mut low: f64 = 0.0;
    let mut high: f64 = 0.0;
    for trial in 0..trials {
        let z = gauss(spread, &mut rng);
        let x = gauss(x_scales[trial % x_scales.len()], &mut rng);
        let xx = norm(&x).powi(2);
        let fwd = d2(&axpy(&z, &[(2.0, &x)]))? - 2.0 * d2(&axpy(&z, &[(1.0, &x)]))? + d2(&z)?;
        let sym = d2(&axpy(&z, &[(1.0, &x)]))? - 2.0 * d2(&z)? + d2(&axpy(&z, &[(-1.0, &x)]))?;
        low = low.max(-fwd).max(-sym);
        high = high.max(fwd - 2.0 * xx).max(sym - 2.0 * xx);

        // base point inside C: a random convex combination of the vertices
        let weights: Vec<f64> = set.points().iter().map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
        let total: f64 = weights.iter().sum();
        let mut zc = vec![0.0; dim];
        for (p, w) in set.points().iter().zip(&weights) {
            for (o, pi) in zc.iter_mut().zip(p) {
                *o += w / total * pi;
            }
        }
        let x1 = gauss(x_scales[(trial + 1) % x_scales.len()], &mut rng);
        let x2 = gauss(x_scales[(trial + 3) % x_scales.len()], &mut rng);
        let mixed = d2(&axpy(&zc, &[(1.0, &x1), (1.0, &x2)]))? - d2(&axpy(&zc, &[(1.0, &x1)]))?
            - d2(&axpy(&zc, &[(1.0, &x2)]))?
            + d2(&zc)?;
        high = high.max(mixed.abs() - 4.0 * norm(&x1) * norm(&x2));
    }
    Ok(Dist2Report { trials, max_violation_low: low, max_violation_high: high })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RuleRow {
    pub direction: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaxRuleReport {
    pub active: Vec<usize>,
    pub rows: Vec<RuleRow>,
    /// Largest lhs - rhs over the directions.
    pub worst_excess: f64,
    pub holds: bool,
}

/// Upper estimate of max_i f_i against the max over active i of the
/// individual upper estimates.
pub fn max_rule_check(
    fields: &[ScalarField],
    x0: &[f64],
    directions: &[Vec<f64>],
    kind: EstimateKind,
    opts: &EstimatorOptions,
) -> Result<MaxRuleReport> {
    if !kind.is_upper() || kind == EstimateKind::Mixed {
        return Err(Error::Input("max rule compares upper forward or symmetric estimates".into()));
    }
    let values: Vec<f64> = fields.iter().map(|f| f.eval(x0)).collect::<Result<_>>()?;
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let active: Vec<usize> = (0..fields.len()).filter(|i| (values[*i] - top).abs() <= 1e-12).collect();
    let fmax = ScalarField::max_of(fields)?;
    let mut rows = Vec::with_capacity(directions.len());
    let mut worst = f64::NEG_INFINITY;
    for d in directions {
        let lhs = estimate_second(kind, &fmax, x0, d, None, opts)?.value;
        let mut rhs = f64::NEG_INFINITY;
        for i in &active {
            rhs = rhs.max(estimate_second(kind, &fields[*i], x0, d, None, opts)?.value);
        }
        worst = worst.max(lhs - rhs);
        rows.push(RuleRow { direction: d.clone(), lhs, rhs });
    }
    Ok(MaxRuleReport { active, rows, worst_excess: worst, holds: worst <= 1e-8 })
}

pub type MapEval = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A differentiable map R^n -> R^m with its Jacobian (row-major m x n).
#[derive(Clone)]
pub struct SmoothMap {
    pub in_dim: usize,
    pub out_dim: usize,
    pub eval: Arc<MapEval>,
    pub jacobian: Arc<MapEval>,
}

impl SmoothMap {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        eval: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        jacobian: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        SmoothMap { in_dim, out_dim, eval: Arc::new(eval), jacobian: Arc::new(jacobian) }
    }

    /// y -> B y for a row-major m x n matrix.
    pub fn linear(out_dim: usize, in_dim: usize, b: Vec<f64>) -> Self {
        let b2 = b.clone();
        SmoothMap::new(
            in_dim,
            out_dim,
            move |x| (0..out_dim).map(|r| (0..in_dim).map(|c| b[r * in_dim + c] * x[c]).sum()).collect(),
            move |_| b2.clone(),
        )
    }

    fn jacobian_times(&self, x0: &[f64], d: &[f64]) -> Vec<f64> {
        let j = (self.jacobian)(x0);
        (0..self.out_dim).map(|r| (0..self.in_dim).map(|c| j[r * self.in_dim + c] * d[c]).sum()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainRuleReport {
    pub rows: Vec<RuleRow>,
    pub max_abs_diff: f64,
    pub holds: bool,
    pub warnings: Vec<String>,
}

/// Point upper estimates of (g o phi) at x0 along x against g at phi(x0)
/// along phi'(x0) x.
pub fn chain_rule_check(
    g: &ScalarField,
    phi: &SmoothMap,
    x0: &[f64],
    directions: &[Vec<f64>],
    opts: &EstimatorOptions,
    seed: u64,
) -> Result<ChainRuleReport> {
    check_dim(phi.in_dim, x0.len())?;
    check_dim(g.dim(), phi.out_dim)?;
    let mut warnings = Vec::new();
    let y0 = (phi.eval)(x0);
    check_dim(phi.out_dim, y0.len())?;

    // Jacobian against central differences
    let h = 1e-6;
    let jac = (phi.jacobian)(x0);
    check_dim(phi.out_dim * phi.in_dim, jac.len())?;
    for c in 0..phi.in_dim {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let (fp, fm) = ((phi.eval)(&xp), (phi.eval)(&xm));
        for r in 0..phi.out_dim {
            let fd = (fp[r] - fm[r]) / (2.0 * h);
            let a = jac[r * phi.in_dim + c];
            if (fd - a).abs() > 1e-6 * a.abs().max(1.0) {
                warnings.push(format!("jacobian entry ({r},{c}) = {a} disagrees with central difference {fd}"));
            }
        }
    }

    // sampled 2-Lipschitz hypothesis for g near phi(x0)
    match g.declared_lipschitz2() {
        None => warnings.push("no 2-Lipschitz constant declared for the outer field".into()),
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..200 {
                let r: f64 = 1e-2;
                let mut draw = || -> Vec<f64> { (0..g.dim()).map(|_| r * rng.sample::<f64, _>(StandardNormal)).collect() };
                let (y, a, b) = (axpy(&y0, &[(1.0, &draw())]), draw(), draw());
                let m = g.eval(&axpy(&y, &[(1.0, &a), (1.0, &b)]))? - g.eval(&axpy(&y, &[(1.0, &a)]))?
                    - g.eval(&axpy(&y, &[(1.0, &b)]))?
                    + g.eval(&y)?;
                if m.abs() > k * norm(&a) * norm(&b) * (1.0 + 1e-6) + 1e-15 {
                    warnings.push(format!("2-Lipschitz bound {k} violated near phi(x0)"));
                    break;
                }
            }
        }
    }

    let composed = {
        let (gg, pp) = (g.clone(), phi.clone());
        ScalarField::new(phi.in_dim, move |x| gg.eval(&(pp.eval)(x)).unwrap_or(f64::NAN))
    };
    let mut rows = Vec::with_capacity(directions.len());
    let mut worst: f64 = 0.0;
    for d in directions {
        let lhs = estimate_second(EstimateKind::F2PlusPoint, &composed, x0, d, None, opts)?.value;
        let jd = phi.jacobian_times(x0, d);
        let rhs = estimate_second(EstimateKind::F2PlusPoint, g, &y0, &jd, None, opts)?.value;
        worst = worst.max((lhs - rhs).abs());
        rows.push(RuleRow { direction: d.clone(), lhs, rhs });
    }
    Ok(ChainRuleReport { rows, max_abs_diff: worst, holds: worst <= 1e-6, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub necessary_holds: bool,
    /// min over directions of the point upper estimate / |x|^2.
    pub min_upper: f64,
    /// min over directions of the local lower estimate / |x|^2.
    pub alpha_candidate: f64,
    /// max over directions of the lower-estimate tail spread / |x|^2.
    pub uniformity_spread: f64,
    pub sufficient_alpha: Option<f64>,
}

/// Second-order tests at x0: the upper point estimate must be >= 0 at a
/// minimum; a lower estimate >= alpha |x|^2 uniformly in the direction gives
/// a strict local minimum.
pub fn optimality_test(
    f: &ScalarField,
    x0: &[f64],
    directions: &[Vec<f64>],
    opts: &EstimatorOptions,
) -> Result<OptimalityReport> {
    if directions.is_empty() {
        return Err(Error::Input("optimality test needs at least one direction".into()));
    }
    let mut min_upper = f64::INFINITY;
    let mut alpha = f64::INFINITY;
    let mut spread: f64 = 0.0;
    for d in directions {
        let nn = norm(d).powi(2);
        if nn == 0.0 {
            return Err(Error::Input("zero direction".into()));
        }
        let up = estimate_second(EstimateKind::F2PlusPoint, f, x0, d, None, opts)?;
        min_upper = min_upper.min(up.value / nn);
        let lo = estimate_second(EstimateKind::F2MinusLocal, f, x0, d, None, opts)?;
        alpha = alpha.min(lo.value / nn);
        let (tmin, tmax) = lo
            .tail_values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        spread = spread.max((tmax - tmin) / nn);
    }
    let sufficient_alpha = (alpha > 0.0 && spread <= 0.1 * alpha).then_some(alpha);
    Ok(OptimalityReport {
        necessary_holds: min_upper >= -1e-8,
        min_upper,
        alpha_candidate: alpha,
        uniformity_spread: spread,
        sufficient_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> EstimatorOptions {
        EstimatorOptions::default()
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule { lambda0: 0.0, ratio: 0.5, steps: 16 }.validate().is_err());
        assert!(Schedule { lambda0: 0.1, ratio: 1.0, steps: 16 }.validate().is_err());
        assert!(Schedule { lambda0: 0.1, ratio: 0.5, steps: 7 }.validate().is_err());
        assert_eq!(Schedule::default().tail().len(), 8);
        assert_eq!(Schedule { lambda0: 0.1, ratio: 0.5, steps: 9 }.tail().len(), 5);
    }

    #[test]
    fn half_square_values() {
        let f = ScalarField::half_square();
        for x in [0.7, -1.3] {
            let up = estimate_second(EstimateKind::F2PlusLocal, &f, &[0.0], &[x], None, &opts()).unwrap();
            let lo = estimate_second(EstimateKind::F2MinusLocal, &f, &[0.0], &[x], None, &opts()).unwrap();
            assert!((up.value - 2.0 * x * x).abs() < 1e-9);
            assert!(lo.value.abs() < 1e-9);
        }
        let i = bidiff_interval_1d(&f, 0.0, &opts(), BidiffMode::Local).unwrap();
        assert!(!i.empty && i.lower.abs() < 1e-9 && (i.upper - 2.0).abs() < 1e-9);
    }

    #[test]
    fn signed_square_point_and_symmetric() {
        let f = ScalarField::signed_square();
        for x in [0.4, -0.9] {
            let p = estimate_second(EstimateKind::F2PlusPoint, &f, &[0.0], &[x], None, &opts()).unwrap();
            assert!((p.value - 2.0 * x * x * x.signum()).abs() < 1e-9);
            let s = estimate_second(EstimateKind::Sym2Plus, &f, &[0.0], &[x], None, &opts()).unwrap();
            assert_eq!(s.value, 0.0);
        }
        let i = bidiff_interval_1d(&f, 0.0, &opts(), BidiffMode::Point).unwrap();
        assert!(i.empty);
    }

    #[test]
    fn mixed_requires_second_direction() {
        let f = ScalarField::half_square();
        assert!(estimate_second(EstimateKind::Mixed, &f, &[0.0], &[1.0], None, &opts()).is_err());
    }

    #[test]
    fn non_finite_field_reports_probe() {
        let f = ScalarField::new(1, |x| if x[0] > 0.0 { f64::NAN } else { 0.0 });
        let e = estimate_second(EstimateKind::F2PlusPoint, &f, &[0.0], &[1.0], None, &opts()).unwrap_err();
        assert!(matches!(e, Error::Evaluation { .. }));
    }

    #[test]
    fn singleton_distance_squared_is_tight() {
        let c = CompactSet::singleton(vec![0.0]).unwrap();
        let f = ScalarField::distance_squared(c);
        let fwd = f.eval(&[2.0]).unwrap() - 2.0 * f.eval(&[1.0]).unwrap() + f.eval(&[0.0]).unwrap();
        assert_eq!(fwd, 2.0);
    }

    #[test]
    fn non_convex_set_is_rejected() {
        let c = CompactSet::new(1, vec![vec![0.0], vec![1.0]], false).unwrap();
        assert!(matches!(dist2_second_difference_check(&c, 10, 0), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_direction_gives_zero_differences() {
        let c = CompactSet::hull(vec![vec![-1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let f = ScalarField::distance_squared(c);
        let z = [0.3, 2.0];
        let v = f.eval(&z).unwrap();
        assert_eq!(v - 2.0 * v + v, 0.0);
    }

    #[test]
    fn optimality_examples() {
        let dirs = vec![vec![1.0], vec![-1.0]];
        let sq = ScalarField::quadratic(1, vec![1.0]).unwrap();
        let r = optimality_test(&sq, &[0.0], &dirs, &opts()).unwrap();
        assert!(r.necessary_holds);
        assert!((r.sufficient_alpha.unwrap() - 2.0).abs() < 1e-3);
        let r = optimality_test(&sq.negated(), &[0.0], &dirs, &opts()).unwrap();
        assert!(!r.necessary_holds);
        assert!((r.min_upper + 2.0).abs() < 1e-9);
        let r = optimality_test(&ScalarField::half_square(), &[0.0], &dirs, &opts()).unwrap();
        assert!(r.necessary_holds && r.sufficient_alpha.is_none());
    }
}

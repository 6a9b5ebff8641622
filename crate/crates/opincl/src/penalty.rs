//! Exact penalty for J(u) = phi((Au)(t0), (Au)(T)) + int f(t, Au, u) subject
//! to u(t) in F(t, (Au)(t)), and a checker for convex optimality certificates.
//!
//! The penalized objective is J_r(u) = J(u) + r ||psi||_p with
//! psi(t) = d(u(t), F(t, (Au)(t))).

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gridfn::{defect, GridFunction, GridKind};
use crate::inclusion::{solve_fredholm, solve_volterra};
use crate::multimap::MultiMap;
use crate::operators::{KernelOperator, OperatorKind};
use crate::setval::{dist_to_set, norm};

pub type IntegrandEval = dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync;
pub type TimeFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type EndpointEval = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// f(t, x, u) with |f(t,x1,u1) - f(t,x2,u2)| <= k(t)|x1 - x2| + k1(t)|u1 - u2|.
#[derive(Clone)]
pub struct Integrand {
    eval: Arc<IntegrandEval>,
    k: Arc<TimeFn>,
    k1: Arc<TimeFn>,
    convex: bool,
}

impl fmt::Debug for Integrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Integrand").field("convex", &self.convex).finish()
    }
}

impl Integrand {
    pub fn new(eval: impl Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Integrand { eval: Arc::new(eval), k: Arc::new(|_| 0.0), k1: Arc::new(|_| 0.0), convex: false }
    }

    pub fn with_constants(mut self, k: f64, k1: f64) -> Self {
        self.k = Arc::new(move |_| k);
        self.k1 = Arc::new(move |_| k1);
        self
    }

    pub fn with_constant_fns(
        mut self,
        k: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        k1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.k = Arc::new(k);
        self.k1 = Arc::new(k1);
        self
    }

    /// Declares f(t, ., .) jointly convex; required by the certificate checker.
    pub fn convex(mut self) -> Self {
        self.convex = true;
        self
    }

    pub fn is_convex(&self) -> bool {
        self.convex
    }

    pub fn eval(&self, t: &[f64], x: &[f64], u: &[f64]) -> f64 {
        (self.eval)(t, x, u)
    }

    /// |u|^2; Lipschitz constant 2 in u on the unit ball.
    pub fn control_square() -> Self {
        Integrand::new(|_, _, u| u.iter().map(|v| v * v).sum()).with_constants(0.0, 2.0).convex()
    }

    /// (|x|^2 + |u|^2) / 2.
    pub fn half_quadratic() -> Self {
        Integrand::new(|_, x, u| 0.5 * (x.iter().chain(u).map(|v| v * v).sum::<f64>())).with_constants(1.0, 1.0).convex()
    }

    /// |u| + |x|^2 / 2.
    pub fn abs_control() -> Self {
        Integrand::new(|_, x, u| norm(u) + 0.5 * x.iter().map(|v| v * v).sum::<f64>()).with_constants(1.0, 1.0).convex()
    }
}

/// Endpoint cost phi(x(t0), x(T)) with Lipschitz constant k2.
#[derive(Clone)]
pub struct Endpoint {
    eval: Arc<EndpointEval>,
    k2: f64,
    convex: bool,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint").field("k2", &self.k2).field("convex", &self.convex).finish()
    }
}

impl Endpoint {
    pub fn new(k2: f64, eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Endpoint { eval: Arc::new(eval), k2, convex: false }
    }

    pub fn zero() -> Self {
        Endpoint::new(0.0, |_, _| 0.0).convex()
    }

    pub fn convex(mut self) -> Self {
        self.convex = true;
        self
    }

    pub fn k2(&self) -> f64 {
        self.k2
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        (self.eval)(a, b)
    }
}

#[derive(Clone, Debug)]
pub struct PenaltyProblem {
    pub op: KernelOperator,
    pub map: MultiMap,
    pub integrand: Integrand,
    pub endpoint: Endpoint,
    pub p: f64,
    pub r: f64,
}

impl PenaltyProblem {
    pub fn new(op: KernelOperator, map: MultiMap, integrand: Integrand, endpoint: Endpoint, p: f64, r: f64) -> Result<Self> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::Input(format!("penalty exponent must be >= 1, got {p}")));
        }
        if !(r >= 0.0) {
            return Err(Error::Input(format!("penalty weight must be nonnegative, got {r}")));
        }
        if !(map.grid().as_ref() == op.grid().as_ref()) {
            return Err(Error::Input("operator and multimap grids differ".into()));
        }
        check_dim(op.dim(), map.range_dim())?;
        check_dim(op.dim(), map.domain_dim())?;
        Ok(PenaltyProblem { op, map, integrand, endpoint, p, r })
    }

    pub fn with_r(&self, r: f64) -> PenaltyProblem {
        PenaltyProblem { r, ..self.clone() }
    }

    fn check_u(&self, u: &GridFunction) -> Result<()> {
        if u.grid().as_ref() != self.op.grid().as_ref() {
            return Err(Error::Input("control lives on a different grid".into()));
        }
        check_dim(self.op.dim(), u.codim())
    }

    /// The L_p -> C bound of A: ||A|| for Fredholm operators and
    /// L (T - t0)^(1 - 1/p) for Volterra ones.
    pub fn operator_bound(&self) -> Result<f64> {
        match self.op.kind() {
            OperatorKind::Fredholm => self.op.opnorm(self.p),
            OperatorKind::Volterra => Ok(self.op.volterra_constant() * self.op.grid().measure().powf(1.0 - 1.0 / self.p)),
        }
    }

    /// Measure of the boundary through which the endpoint cost enters:
    /// the two end points of an interval, the surface area of a box.
    fn boundary_measure(&self) -> f64 {
        let g = self.op.grid();
        match g.kind() {
            GridKind::Interval => 2.0,
            GridKind::Box => {
                let sides: Vec<f64> = g.lower().iter().zip(g.upper()).map(|(a, b)| b - a).collect();
                (0..sides.len())
                    .map(|i| 2.0 * sides.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| s).product::<f64>())
                    .sum()
            }
        }
    }
}

pub fn residual_psi(prob: &PenaltyProblem, u: &GridFunction) -> Result<GridFunction> {
    prob.check_u(u)?;
    defect(u, &prob.op.apply(u)?, &prob.map)
}

/// J(u) without the penalty term.
pub fn objective(prob: &PenaltyProblem, u: &GridFunction) -> Result<f64> {
    prob.check_u(u)?;
    let x = prob.op.apply(u)?;
    objective_with_state(prob, u, &x)
}

fn objective_with_state(prob: &PenaltyProblem, u: &GridFunction, x: &GridFunction) -> Result<f64> {
    let g = u.grid();
    let n = g.len();
    let mut integral = 0.0;
    for k in 0..n {
        let v = prob.integrand.eval(&g.coords(k), x.value(k), u.value(k));
        if !v.is_finite() {
            return Err(Error::Evaluation { at: format!("node {k}"), message: "non-finite integrand".into() });
        }
        integral += g.weights()[k] * v;
    }
    let end = prob.endpoint.eval(x.value(0), x.value(n - 1));
    if !end.is_finite() {
        return Err(Error::Evaluation { at: "endpoint".into(), message: "non-finite endpoint cost".into() });
    }
    Ok(end + integral)
}

/// J(u) + r ||psi||_p.
pub fn penalized_objective(prob: &PenaltyProblem, u: &GridFunction) -> Result<f64> {
    Ok(penalized_parts(prob, u)?.0)
}

/// (J_r(u), ||psi||_p).
fn penalized_parts(prob: &PenaltyProblem, u: &GridFunction) -> Result<(f64, f64)> {
    prob.check_u(u)?;
    let x = prob.op.apply(u)?;
    let j = objective_with_state(prob, u, &x)?;
    let psi = defect(u, &x, &prob.map)?.lp_norm(prob.p)?;
    let pen = if prob.r == 0.0 { 0.0 } else { prob.r * psi };
    Ok((j + pen, psi))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PenaltyConstants {
    pub p_tilde: f64,
    pub beta: f64,
    pub r0: f64,
    pub trust_radius: f64,
    /// ||A|| ||M||_p (L_p -> C bound of A times the modulus norm).
    pub contraction: f64,
}

/// p - 1 for integer p, p otherwise.
pub fn p_tilde(p: f64) -> f64 {
    if p.fract() == 0.0 {
        p - 1.0
    } else {
        p
    }
}

/// The threshold r0, the constant beta and the trust radius alpha / beta.
///
/// r0 = a / (1 - a ||M||_p) (k2 |boundary| + int k + int k1 M) + ||k1||_q with
/// a the L_p -> C bound of A and q the conjugate exponent (q = inf for p = 1).
pub fn penalty_constants(prob: &PenaltyProblem, alpha: f64) -> Result<PenaltyConstants> {
    if !(alpha > 0.0) {
        return Err(Error::Input("tube radius alpha must be positive".into()));
    }
    let p = prob.p;
    let a = prob.operator_bound()?;
    let m = prob.map.modulus();
    let mp = m.lp_norm(p)?;
    let contraction = a * mp;
    if contraction >= 1.0 {
        return Err(Error::Precondition(format!("contraction factor {contraction} is not below 1")));
    }
    let grid = m.grid().clone();
    let k = GridFunction::scalar_fn(grid.clone(), |t| (prob.integrand.k)(t))?;
    let k1 = GridFunction::scalar_fn(grid, |t| (prob.integrand.k1)(t))?;
    let q = if p == 1.0 { f64::INFINITY } else { p / (p - 1.0) };
    let int_k = k.integral()[0];
    let int_k1m = k1.zip_with(m, |a, b| a * b)?.integral()[0];
    let r0 = a / (1.0 - contraction) * (prob.endpoint.k2 * prob.boundary_measure() + int_k + int_k1m) + k1.lp_norm(q)?;
    let pt = p_tilde(p);
    let beta = a * 3f64.powf((2.0 * pt + 2.0) / p) * (contraction + 1.0) / (1.0 - contraction) + a + 1.0;
    Ok(PenaltyConstants { p_tilde: pt, beta, r0, trust_radius: alpha / beta, contraction })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    PatternSearch,
    /// Normalized steps along a central-difference gradient with 1/sqrt(k)
    /// step sizes, keeping the best iterate.
    Subgradient,
    /// Golden-section minimization of each nodal value in turn, with a
    /// proximal term tying it to the current value.
    CoordinateProximal,
}

#[derive(Clone, Debug)]
pub struct TrustRegion {
    pub center: GridFunction,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct MinimizeOptions {
    pub method: SearchMethod,
    /// Objective evaluations.
    pub budget: usize,
    pub initial_step: f64,
    pub min_step: f64,
    pub trust: Option<TrustRegion>,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions { method: SearchMethod::PatternSearch, budget: 200_000, initial_step: 0.5, min_step: 1e-9, trust: None }
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub u: GridFunction,
    pub j_r: f64,
    pub psi_norm: f64,
    /// Incumbent objective after each improvement; nonincreasing.
    pub trace: Vec<f64>,
    pub evaluations: usize,
    pub budget_exhausted: bool,
    /// No improvement over the starting point.
    pub stagnated: bool,
}

struct Search<'a> {
    prob: &'a PenaltyProblem,
    trust: Option<&'a TrustRegion>,
    budget: usize,
    evals: usize,
    best: GridFunction,
    best_val: f64,
    best_psi: f64,
    trace: Vec<f64>,
}

impl<'a> Search<'a> {
    fn project(&self, u: GridFunction) -> Result<GridFunction> {
        let Some(tr) = self.trust else { return Ok(u) };
        let d = u.sub(&tr.center)?;
        let n = d.lp_norm(self.prob.p)?;
        if n <= tr.radius {
            Ok(u)
        } else {
            tr.center.add(&d.scale(tr.radius / n))
        }
    }

    fn exhausted(&self) -> bool {
        self.evals >= self.budget
    }

    /// Evaluates a (projected) trial point and records it if it improves.
    fn try_point(&mut self, values: Vec<f64>) -> Result<(f64, bool)> {
        let u = GridFunction::new(self.best.grid().clone(), self.best.codim(), values)?;
        let u = self.project(u)?;
        self.evals += 1;
        let (v, psi) = penalized_parts(self.prob, &u)?;
        if v < self.best_val {
            self.best = u;
            self.best_val = v;
            self.best_psi = psi;
            self.trace.push(v);
            Ok((v, true))
        } else {
            Ok((v, false))
        }
    }

    fn eval_only(&mut self, values: Vec<f64>) -> Result<f64> {
        let u = GridFunction::new(self.best.grid().clone(), self.best.codim(), values)?;
        let u = self.project(u)?;
        self.evals += 1;
        penalized_objective(self.prob, &u)
    }
}

pub fn minimize_penalized(prob: &PenaltyProblem, u_init: &GridFunction, opts: &MinimizeOptions) -> Result<MinimizeResult> {
    if opts.budget == 0 {
        return Err(Error::Input("search budget must be at least 1".into()));
    }
    if !(opts.initial_step > 0.0 && opts.min_step > 0.0) {
        return Err(Error::Input("search steps must be positive".into()));
    }
    prob.check_u(u_init)?;
    if let Some(tr) = &opts.trust {
        prob.check_u(&tr.center)?;
        if !(tr.radius >= 0.0) {
            return Err(Error::Input("trust radius must be nonnegative".into()));
        }
    }
    let mut s = Search {
        prob,
        trust: opts.trust.as_ref(),
        budget: opts.budget,
        evals: 0,
        best: u_init.clone(),
        best_val: f64::INFINITY,
        best_psi: f64::NAN,
        trace: Vec::new(),
    };
    let start = s.project(u_init.clone())?;
    s.best = start.clone();
    s.try_point(start.values().to_vec())?;
    let start_val = s.best_val;
    let dims = start.values().len();

    match opts.method {
        SearchMethod::PatternSearch => {
            let mut step = opts.initial_step;
            while step >= opts.min_step && !s.exhausted() {
                let mut improved = false;
                for c in 0..dims {
                    for sign in [1.0, -1.0] {
                        if s.exhausted() {
                            break;
                        }
                        let mut v = s.best.values().to_vec();
                        v[c] += sign * step;
                        if s.try_point(v)?.1 {
                            improved = true;
                            break;
                        }
                    }
                }
                if !improved {
                    step *= 0.5;
                }
            }
        }
        SearchMethod::Subgradient => {
            let mut cur = s.best.values().to_vec();
            let fd = 1e-7;
            let mut k = 0usize;
            while !s.exhausted() {
                let mut g = vec![0.0; dims];
                for c in 0..dims {
                    let mut up = cur.clone();
                    let mut dn = cur.clone();
                    up[c] += fd;
                    dn[c] -= fd;
                    g[c] = (s.eval_only(up)? - s.eval_only(dn)?) / (2.0 * fd);
                }
                let gn = norm(&g);
                let step = opts.initial_step / ((k + 1) as f64).sqrt();
                if gn == 0.0 || step < opts.min_step {
                    break;
                }
                for (c, gc) in cur.iter_mut().zip(&g) {
                    *c -= step * gc / gn;
                }
                let projected = s.project(GridFunction::new(start.grid().clone(), start.codim(), cur.clone())?)?;
                cur = projected.values().to_vec();
                s.try_point(cur.clone())?;
                k += 1;
            }
        }
        SearchMethod::CoordinateProximal => {
            let mut radius = opts.initial_step;
            let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
            while radius >= opts.min_step && !s.exhausted() {
                let mut max_move: f64 = 0.0;
                for c in 0..dims {
                    let base = s.best.values().to_vec();
                    let centre = base[c];
                    // proximal weight on the scale of the node's quadrature weight
                    let tau = radius / start.grid().weights()[c / start.codim()];
                    let objective_at = |x: f64, s: &mut Search| -> Result<f64> {
                        let mut v = base.clone();
                        v[c] = x;
                        Ok(s.eval_only(v)? + (x - centre).powi(2) / (2.0 * tau))
                    };
                    let (mut lo, mut hi) = (centre - radius, centre + radius);
                    let mut x1 = hi - inv_phi * (hi - lo);
                    let mut x2 = lo + inv_phi * (hi - lo);
                    let mut f1 = objective_at(x1, &mut s)?;
                    let mut f2 = objective_at(x2, &mut s)?;
                    while hi - lo > 0.25 * opts.min_step.max(radius * 1e-3) && !s.exhausted() {
                        if f1 <= f2 {
                            hi = x2;
                            x2 = x1;
                            f2 = f1;
                            x1 = hi - inv_phi * (hi - lo);
                            f1 = objective_at(x1, &mut s)?;
                        } else {
                            lo = x1;
                            x1 = x2;
                            f1 = f2;
                            x2 = lo + inv_phi * (hi - lo);
                            f2 = objective_at(x2, &mut s)?;
                        }
                    }
                    let mut v = base.clone();
                    v[c] = 0.5 * (lo + hi);
                    if s.try_point(v)?.1 {
                        max_move = max_move.max((0.5 * (lo + hi) - centre).abs());
                    }
                    if s.exhausted() {
                        break;
                    }
                }
                if max_move < 0.25 * radius {
                    radius *= 0.5;
                }
            }
        }
    }

    Ok(MinimizeResult {
        j_r: s.best_val,
        psi_norm: s.best_psi,
        stagnated: !(s.best_val < start_val),
        budget_exhausted: s.exhausted(),
        evaluations: s.evals,
        trace: s.trace,
        u: s.best,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExactnessRow {
    pub r: f64,
    pub at_or_above_r0: bool,
    pub feasible: bool,
    pub j_r: f64,
    pub psi_norm: f64,
    /// J_r(incumbent) >= J(u_bar) - tol.
    pub no_improvement: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExactnessReport {
    pub constants: PenaltyConstants,
    pub j_bar: f64,
    pub rows: Vec<ExactnessRow>,
    /// Every r >= r0 produced a feasible incumbent that does not beat u_bar.
    pub consistent: bool,
}

fn exactness_row(
    prob: &PenaltyProblem,
    u_bar: &GridFunction,
    r: f64,
    radius: f64,
    j_bar: f64,
    budget: usize,
    tol: f64,
) -> Result<ExactnessRow> {
    // second start: a constant shift of L_p norm radius / 2
    let shift = 0.5 * radius / u_bar.grid().measure().powf(1.0 / prob.p);
    let starts = [u_bar.clone(), u_bar.map_values(|v| v - shift)];
    let pr = prob.with_r(r);
    let opts = MinimizeOptions {
        budget,
        initial_step: radius.max(1e-6),
        trust: Some(TrustRegion { center: u_bar.clone(), radius }),
        ..MinimizeOptions::default()
    };
    let mut best: Option<MinimizeResult> = None;
    for s in &starts {
        let res = minimize_penalized(&pr, s, &opts)?;
        if best.as_ref().map_or(true, |b| res.j_r < b.j_r) {
            best = Some(res);
        }
    }
    let best = best.expect("two starts");
    Ok(ExactnessRow {
        r,
        at_or_above_r0: false,
        feasible: best.psi_norm <= tol,
        j_r: best.j_r,
        psi_norm: best.psi_norm,
        no_improvement: best.j_r >= j_bar - tol,
    })
}

/// Minimizes J_r inside the trust region around a feasible u_bar for each r
/// and records whether the penalty was exact there.
pub fn exactness_check(
    prob: &PenaltyProblem,
    u_bar: &GridFunction,
    r_grid: &[f64],
    alpha: f64,
    budget: usize,
    tol: f64,
) -> Result<ExactnessReport> {
    let psi = residual_psi(prob, u_bar)?;
    if psi.sup_norm() > tol {
        return Err(Error::Precondition(format!("u_bar is infeasible: residual {}", psi.sup_norm())));
    }
    let constants = penalty_constants(prob, alpha)?;
    let j_bar = objective(prob, u_bar)?;
    let mut rows = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let mut row = exactness_row(prob, u_bar, r, constants.trust_radius, j_bar, budget, tol)?;
        row.at_or_above_r0 = r >= constants.r0;
        rows.push(row);
    }
    let consistent = rows.iter().filter(|r| r.at_or_above_r0).all(|r| r.feasible && r.no_improvement);
    Ok(ExactnessReport { constants, j_bar, rows, consistent })
}

/// Halves beta (so doubles the trust radius alpha / beta) while the penalty
/// at `r` stays exact, up to `halvings` times. Returns the smallest beta that
/// still worked; the printed beta is returned when even it fails.
pub fn empirical_beta(
    prob: &PenaltyProblem,
    u_bar: &GridFunction,
    r: f64,
    alpha: f64,
    halvings: usize,
    budget: usize,
    tol: f64,
) -> Result<f64> {
    let constants = penalty_constants(prob, alpha)?;
    let j_bar = objective(prob, u_bar)?;
    let mut beta = constants.beta;
    for _ in 0..halvings {
        let next = 0.5 * beta;
        let row = exactness_row(prob, u_bar, r, alpha / next, j_bar, budget, tol)?;
        if !(row.feasible && row.no_improvement) {
            break;
        }
        beta = next;
    }
    Ok(beta)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsiLipschitzReport {
    pub probes: usize,
    /// Largest |psi(t,x1,y1) - psi(t,x2,y2)| - (M(t)|x1 - x2| + |y1 - y2|).
    pub max_violation: f64,
}

/// Samples |psi(t,x1,y1) - psi(t,x2,y2)| <= M(t)|x1 - x2| + |y1 - y2|.
pub fn psi_lipschitz_check(map: &MultiMap, probes: usize, scale: f64, seed: u64) -> Result<PsiLipschitzReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = map.grid().len();
    let mut worst = f64::NEG_INFINITY;
    let draw = |dim: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    for _ in 0..probes {
        let k = rng.random_range(0..n);
        let (x1, x2) = (draw(map.domain_dim(), &mut rng), draw(map.domain_dim(), &mut rng));
        let (y1, y2) = (draw(map.range_dim(), &mut rng), draw(map.range_dim(), &mut rng));
        let p1 = dist_to_set(&y1, &map.eval_node(k, &x1)?)?.distance;
        let p2 = dist_to_set(&y2, &map.eval_node(k, &x2)?)?.distance;
        let dx = crate::setval::dist_sq(&x1, &x2).sqrt();
        let dy = crate::setval::dist_sq(&y1, &y2).sqrt();
        worst = worst.max((p1 - p2).abs() - (map.modulus().at(k) * dx + dy));
    }
    Ok(PsiLipschitzReport { probes, max_violation: worst.max(0.0) })
}

/// Multipliers of the convex optimality system.
#[derive(Clone, Debug)]
pub struct Certificate {
    pub v_star: GridFunction,
    pub u_star: GridFunction,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
}

impl Certificate {
    pub fn zero(grid: Arc<crate::gridfn::Grid>, dim: usize) -> Certificate {
        Certificate {
            v_star: GridFunction::zeros(grid.clone(), dim),
            u_star: GridFunction::zeros(grid, dim),
            c1: vec![0.0; dim],
            c2: vec![0.0; dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertificateReport {
    pub subgrad_f_ok: bool,
    pub subgrad_phi_ok: bool,
    pub stationarity_gap: f64,
    /// Nodes where the integrand subgradient inequality failed.
    pub violating_nodes: Vec<usize>,
    /// Most negative f(x+d, u+e) - f(x, u) - <u*, d> + <v*, e>.
    pub worst_f_slack: f64,
    pub worst_phi_slack: f64,
    pub passed: bool,
}

const PROBE_SCALES: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

/// Verifies (u*(t), -v*(t)) in the subdifferential of f(t, ., .) at
/// ((A u_bar)(t), u_bar(t)), (-c1, -c2) in the subdifferential of phi, and
/// int <v* - A* u*, u> + <c1, (Au)(t0)> + <c2, (Au)(T)> = 0 on the hat basis.
pub fn certificate_check(
    prob: &PenaltyProblem,
    u_bar: &GridFunction,
    cert: &Certificate,
    probes: usize,
    seed: u64,
) -> Result<CertificateReport> {
    prob.check_u(u_bar)?;
    prob.check_u(&cert.v_star)?;
    prob.check_u(&cert.u_star)?;
    let d = prob.op.dim();
    check_dim(d, cert.c1.len())?;
    check_dim(d, cert.c2.len())?;
    let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
    if !(finite(cert.v_star.values()) && finite(cert.u_star.values()) && finite(&cert.c1) && finite(&cert.c2)) {
        return Err(Error::Input("certificate has non-finite entries".into()));
    }
    if !prob.integrand.convex || !prob.endpoint.convex {
        return Err(Error::Precondition("certificate check needs a convex integrand and endpoint cost".into()));
    }
    let grid = u_bar.grid().clone();
    let n = grid.len();
    let x_bar = prob.op.apply(u_bar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |dim: usize, s: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let add = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + y).collect() };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mid = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect() };

    // midpoint convexity, sampled
    for _ in 0..probes.max(16) {
        let k = rng.random_range(0..n);
        let t = grid.coords(k);
        let s = PROBE_SCALES[rng.random_range(0..PROBE_SCALES.len())];
        let (xa, ua) = (add(x_bar.value(k), &gauss(d, s, &mut rng)), add(u_bar.value(k), &gauss(d, s, &mut rng)));
        let (xb, ub) = (add(x_bar.value(k), &gauss(d, s, &mut rng)), add(u_bar.value(k), &gauss(d, s, &mut rng)));
        let f = |x: &[f64], u: &[f64]| prob.integrand.eval(&t, x, u);
        let lhs = f(&mid(&xa, &xb), &mid(&ua, &ub));
        let rhs = 0.5 * (f(&xa, &ua) + f(&xb, &ub));
        if lhs > rhs + 1e-9 * (1.0 + rhs.abs()) {
            return Err(Error::Precondition(format!("integrand fails midpoint convexity at node {k}")));
        }
        let pa = gauss(2 * d, s, &mut rng);
        let pb = gauss(2 * d, s, &mut rng);
        let e = |v: &[f64]| prob.endpoint.eval(&add(x_bar.value(0), &v[..d]), &add(x_bar.value(n - 1), &v[d..]));
        let lhs = e(&mid(&pa, &pb));
        let rhs = 0.5 * (e(&pa) + e(&pb));
        if lhs > rhs + 1e-9 * (1.0 + rhs.abs()) {
            return Err(Error::Precondition("endpoint cost fails midpoint convexity".into()));
        }
    }

    // integrand subgradient inequality at every node
    let mut violating = Vec::new();
    let mut worst_f = f64::INFINITY;
    for k in 0..n {
        let t = grid.coords(k);
        let (xk, uk) = (x_bar.value(k), u_bar.value(k));
        let f0 = prob.integrand.eval(&t, xk, uk);
        let mut bad = false;
        for i in 0..probes {
            let s = PROBE_SCALES[i % PROBE_SCALES.len()];
            let (dl, et) = (gauss(d, s, &mut rng), gauss(d, s, &mut rng));
            let slack = prob.integrand.eval(&t, &add(xk, &dl), &add(uk, &et)) - f0 - dot(cert.u_star.value(k), &dl)
                + dot(cert.v_star.value(k), &et);
            worst_f = worst_f.min(slack);
            if slack < -1e-9 {
                bad = true;
            }
        }
        if bad {
            violating.push(k);
        }
    }

    // endpoint subgradient inequality
    let (a0, b0) = (x_bar.value(0), x_bar.value(n - 1));
    let e0 = prob.endpoint.eval(a0, b0);
    let mut worst_phi = f64::INFINITY;
    for i in 0..probes.max(1) {
        let s = PROBE_SCALES[i % PROBE_SCALES.len()];
        let (d1, d2) = (gauss(d, s, &mut rng), gauss(d, s, &mut rng));
        let slack = prob.endpoint.eval(&add(a0, &d1), &add(b0, &d2)) - e0 + dot(&cert.c1, &d1) + dot(&cert.c2, &d2);
        worst_phi = worst_phi.min(slack);
    }

    // stationarity on the hat basis e_k^i
    let adj = prob.op.adjoint_apply(&cert.u_star)?;
    let w = grid.weights();
    let mut gap: f64 = 0.0;
    for k in 0..n {
        for i in 0..d {
            let col = |m: usize| -> Vec<f64> { (0..d).map(|r| prob.op.block(m, k)[r * d + i]).collect() };
            let val = w[k] * (cert.v_star.value(k)[i] - adj.value(k)[i]) + dot(&col(0), &cert.c1) + dot(&col(n - 1), &cert.c2);
            gap = gap.max(val.abs());
        }
    }

    let subgrad_f_ok = violating.is_empty();
    let subgrad_phi_ok = worst_phi >= -1e-9;
    Ok(CertificateReport {
        subgrad_f_ok,
        subgrad_phi_ok,
        stationarity_gap: gap,
        violating_nodes: violating,
        worst_f_slack: worst_f,
        worst_phi_slack: worst_phi,
        passed: subgrad_f_ok && subgrad_phi_ok && gap <= 1e-10,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SufficiencyReport {
    pub probes: usize,
    pub j_bar: f64,
    pub min_j: f64,
    /// No feasible probe beats J(u_bar) by more than 1e-6.
    pub holds: bool,
}

/// Draws feasible controls by running the inclusion solver from random
/// starts and compares J against J(u_bar).
pub fn sufficiency_probe(prob: &PenaltyProblem, u_bar: &GridFunction, probes: usize, scale: f64, seed: u64) -> Result<SufficiencyReport> {
    let j_bar = objective(prob, u_bar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = u_bar.grid().clone();
    let d = u_bar.codim();
    let mut min_j = f64::INFINITY;
    for _ in 0..probes {
        // smooth random start: a few random Fourier-type modes
        let coeffs: Vec<f64> = (0..4 * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let start = GridFunction::from_fn(grid.clone(), d, |t| {
            let s: f64 = t.iter().sum();
            (0..d)
                .map(|i| (0..4).map(|m| coeffs[4 * i + m] * ((m as f64) * 3.0 * s).cos()).sum())
                .collect()
        })?;
        let sol = match prob.op.kind() {
            OperatorKind::Volterra => solve_volterra(&prob.op, &prob.map, &start, 1e-12, 500)?.0,
            OperatorKind::Fredholm => solve_fredholm(&prob.op, &prob.map, &start, prob.p, 1e-12, 500)?.0,
        };
        min_j = min_j.min(objective(prob, &sol.u)?);
    }
    Ok(SufficiencyReport { probes, j_bar, min_j, holds: min_j >= j_bar - 1e-6 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridfn::Grid;
    use crate::setval::CompactSet;

    fn corpus(r: f64) -> PenaltyProblem {
        let g = Arc::new(Grid::interval(0.0, 1.0, 21).unwrap());
        let op = KernelOperator::scalar(OperatorKind::Fredholm, g.clone(), 1, |_, _| 0.25).unwrap();
        let map = MultiMap::constant(g, 1, CompactSet::singleton(vec![1.0]).unwrap(), 1.0).unwrap();
        PenaltyProblem::new(op, map, Integrand::control_square(), Endpoint::zero(), 1.0, r).unwrap()
    }

    #[test]
    fn residual_and_objective() {
        let prob = corpus(3.0);
        let g = prob.op.grid().clone();
        let zero = GridFunction::zeros(g.clone(), 1);
        assert!(residual_psi(&prob, &zero).unwrap().values().iter().all(|v| *v == 1.0));
        assert!((penalized_objective(&prob, &zero).unwrap() - 3.0).abs() < 1e-14);
        let one = GridFunction::constant(g, &[1.0]).unwrap();
        assert_eq!(penalized_objective(&prob, &one).unwrap(), objective(&prob, &one).unwrap());
        assert_eq!(penalized_objective(&prob.with_r(0.0), &zero).unwrap(), 0.0);
    }

    #[test]
    fn constants_on_corpus() {
        let c = penalty_constants(&corpus(3.0), 1.0).unwrap();
        assert!((c.r0 - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(c.p_tilde, 0.0);
        assert!((c.beta - 5.0).abs() < 1e-12);
        assert!((c.trust_radius - 0.2).abs() < 1e-12);
    }

    #[test]
    fn constants_vanish_without_lipschitz_data() {
        let mut prob = corpus(1.0);
        prob.integrand = Integrand::new(|_, _, _| 0.0);
        assert_eq!(penalty_constants(&prob, 1.0).unwrap().r0, 0.0);
    }

    #[test]
    fn p_tilde_rule() {
        assert_eq!(p_tilde(2.0), 1.0);
        assert_eq!(p_tilde(1.5), 1.5);
        assert_eq!(3f64.powf((2.0 * p_tilde(2.0) + 2.0) / 2.0), 9.0);
    }

    #[test]
    fn minimizer_finds_pointwise_optimum() {
        let g = corpus(3.0).op.grid().clone();
        let zero = GridFunction::zeros(g, 1);
        let res = minimize_penalized(&corpus(3.0), &zero, &MinimizeOptions::default()).unwrap();
        assert!(res.j_r <= 1.0 + 1e-4 && res.psi_norm <= 1e-6);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
        let res = minimize_penalized(&corpus(0.1), &zero, &MinimizeOptions::default()).unwrap();
        assert!(res.psi_norm >= 0.9);
        assert!((res.u.at(3) - 0.05).abs() < 1e-6);
    }

    #[test]
    fn other_methods_make_progress() {
        let g = corpus(3.0).op.grid().clone();
        let zero = GridFunction::zeros(g, 1);
        for method in [SearchMethod::Subgradient, SearchMethod::CoordinateProximal] {
            let opts = MinimizeOptions { method, budget: 20_000, ..MinimizeOptions::default() };
            let res = minimize_penalized(&corpus(3.0), &zero, &opts).unwrap();
            assert!(res.j_r < 1.1, "{method:?} reached {}", res.j_r);
        }
    }

    #[test]
    fn exactness_on_corpus() {
        let prob = corpus(3.0);
        let one = GridFunction::constant(prob.op.grid().clone(), &[1.0]).unwrap();
        let r0 = penalty_constants(&prob, 1.0).unwrap().r0;
        let rep = exactness_check(&prob, &one, &[0.1, r0, 3.0, 10.0], 1.0, 50_000, 1e-6).unwrap();
        assert!(rep.consistent);
        assert!(!rep.rows[0].feasible);
        let zero = GridFunction::zeros(prob.op.grid().clone(), 1);
        assert!(matches!(exactness_check(&prob, &zero, &[3.0], 1.0, 100, 1e-6), Err(Error::Precondition(_))));
    }

    #[test]
    fn empirical_beta_never_exceeds_printed() {
        let prob = corpus(3.0);
        let one = GridFunction::constant(prob.op.grid().clone(), &[1.0]).unwrap();
        let printed = penalty_constants(&prob, 1.0).unwrap().beta;
        let low = empirical_beta(&prob, &one, 10.0, 1.0, 4, 20_000, 1e-6).unwrap();
        assert!(low > 0.0 && low < printed);
        // too small a penalty is never exact, so nothing can be halved
        assert_eq!(empirical_beta(&prob, &one, 0.1, 1.0, 4, 20_000, 1e-6).unwrap(), printed);
    }

    fn cert_problem(integrand: Integrand) -> PenaltyProblem {
        let g = Arc::new(Grid::interval(0.0, 1.0, 21).unwrap());
        let op = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 1.0).unwrap();
        let map = MultiMap::constant(g, 1, CompactSet::hull(vec![vec![-10.0], vec![10.0]]).unwrap(), 0.0).unwrap();
        PenaltyProblem::new(op, map, integrand, Endpoint::zero(), 1.0, 0.0).unwrap()
    }

    #[test]
    fn zero_certificate_passes_and_perturbed_fails() {
        let prob = cert_problem(Integrand::half_quadratic());
        let g = prob.op.grid().clone();
        let zero = GridFunction::zeros(g.clone(), 1);
        let cert = Certificate::zero(g.clone(), 1);
        let rep = certificate_check(&prob, &zero, &cert, 64, 1).unwrap();
        assert!(rep.passed && rep.stationarity_gap <= 1e-10);
        let bad = Certificate { v_star: GridFunction::constant(g, &[0.1]).unwrap(), ..cert };
        let rep = certificate_check(&prob, &zero, &bad, 64, 1).unwrap();
        assert!(!rep.subgrad_f_ok && !rep.passed);
        assert_eq!(rep.violating_nodes.len(), 21);
    }

    #[test]
    fn abs_integrand_certificate() {
        let prob = cert_problem(Integrand::abs_control());
        let g = prob.op.grid().clone();
        let rep = certificate_check(&prob, &GridFunction::zeros(g.clone(), 1), &Certificate::zero(g, 1), 64, 2).unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn nonconvex_declaration_is_rejected() {
        let prob = cert_problem(Integrand::new(|_, _, u| -u[0] * u[0]).convex());
        let g = prob.op.grid().clone();
        let e = certificate_check(&prob, &GridFunction::zeros(g.clone(), 1), &Certificate::zero(g, 1), 64, 3);
        assert!(matches!(e, Err(Error::Precondition(_))));
    }
}

//! Successive approximation for u(t) in F(t, (Au)(t)) and the a-priori
//! deviation bounds that come with it.
//!
//! Iteration: x0 = A u_bar, v0 the point of F(t, x0(t)) nearest u_bar(t);
//! then x_{i+1} = A v_i and v_{i+1} the point of F(t, x_{i+1}(t)) nearest
//! v_i(t). Selection is per node, ties to the lowest index.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::gridfn::{defect, GridFunction, GridKind};
use crate::multimap::MultiMap;
use crate::operators::{KernelOperator, OperatorKind};
use crate::setval::dist_to_set;

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    /// ||x_{i+1} - x_i|| in the sup norm.
    pub x_change: f64,
    /// ||v_{i+1} - v_i|| in L_p.
    pub v_change: f64,
    /// sup-norm defect of v_{i+1} against F(t, (A v_{i+1})(t)).
    pub defect: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    /// Ratios ||v_{i+1} - v_i|| / ||v_i - v_{i-1}|| for i >= `burn_in`, skipping
    /// steps whose previous change is already below `floor` (roundoff level).
    pub fn decay_ratios(&self, burn_in: usize, floor: f64) -> Vec<f64> {
        self.records
            .windows(2)
            .enumerate()
            .filter(|(i, w)| i + 1 >= burn_in && w[0].v_change > floor)
            .map(|(_, w)| w[1].v_change / w[0].v_change)
            .collect()
    }

    pub fn max_decay_ratio(&self, burn_in: usize, floor: f64) -> Option<f64> {
        self.decay_ratios(burn_in, floor).into_iter().reduce(f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct InclusionSolution {
    pub u: GridFunction,
    /// A u.
    pub x: GridFunction,
    pub trace: IterationTrace,
    pub converged: bool,
    pub final_defect: f64,
}

impl InclusionSolution {
    pub fn iterations(&self) -> usize {
        self.trace.records.len()
    }
}

#[derive(Clone, Debug)]
pub struct BoundReport {
    /// m(t) = L int_{t0}^t M (Volterra only).
    pub m: Option<GridFunction>,
    pub bound_x: GridFunction,
    pub bound_u: GridFunction,
    pub observed_x: GridFunction,
    pub observed_u: GridFunction,
    /// observed <= bound (1 + 10h) + abs_tol at every node.
    pub satisfied: bool,
    /// Smallest s with observed <= bound (1 + s) + abs_tol everywhere.
    pub slack: f64,
    /// slack / h.
    pub slack_constant: f64,
    /// max |observed - bound| over both deviations.
    pub tightness_gap: f64,
    /// Worst observed / bound ratio over nodes with positive bound.
    pub worst_ratio: f64,
    pub abs_tol: f64,
}

impl BoundReport {
    fn assemble(
        m: Option<GridFunction>,
        bound_x: GridFunction,
        bound_u: GridFunction,
        observed_x: GridFunction,
        observed_u: GridFunction,
        abs_tol: f64,
    ) -> Self {
        let h = bound_x.grid().max_spacing();
        let mut slack: f64 = 0.0;
        let mut gap: f64 = 0.0;
        let mut worst: f64 = 0.0;
        for (obs, bnd) in [(&observed_x, &bound_x), (&observed_u, &bound_u)] {
            for (o, b) in obs.values().iter().zip(bnd.values()) {
                gap = gap.max((o - b).abs());
                if *b > 0.0 {
                    worst = worst.max(o / b);
                }
                let excess = o - b - abs_tol;
                if excess > 0.0 {
                    slack = slack.max(if *b > 0.0 { excess / b } else { f64::INFINITY });
                }
            }
        }
        BoundReport {
            m,
            bound_x,
            bound_u,
            observed_x,
            observed_u,
            satisfied: slack <= 10.0 * h,
            slack,
            slack_constant: slack / h,
            tightness_gap: gap,
            worst_ratio: worst,
            abs_tol,
        }
    }
}

fn check_problem(a: &KernelOperator, map: &MultiMap, u_bar: &GridFunction) -> Result<()> {
    check_dim(a.dim(), u_bar.codim())?;
    check_dim(a.dim(), map.domain_dim())?;
    check_dim(a.dim(), map.range_dim())?;
    let same = |g: &Arc<crate::gridfn::Grid>| Arc::ptr_eq(g, a.grid()) || **g == **a.grid();
    if !same(u_bar.grid()) || !same(map.grid()) {
        return Err(Error::Input("operator, multimap and initial guess must share one grid".into()));
    }
    Ok(())
}

fn select(map: &MultiMap, x: &GridFunction, target: &GridFunction) -> Result<GridFunction> {
    let mut values = Vec::with_capacity(target.values().len());
    for k in 0..x.len() {
        let set = map.eval_node(k, x.value(k))?;
        values.extend(dist_to_set(target.value(k), &set)?.nearest);
    }
    GridFunction::new(target.grid().clone(), target.codim(), values)
}

fn iterate(
    a: &KernelOperator,
    map: &MultiMap,
    u_bar: &GridFunction,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<InclusionSolution> {
    if !(tol > 0.0) {
        return Err(Error::Input("tolerance must be positive".into()));
    }
    let x0 = a.apply(u_bar)?;
    let rho0 = defect(u_bar, &x0, map)?.sup_norm();
    if rho0 <= tol {
        return Ok(InclusionSolution {
            u: u_bar.clone(),
            x: x0,
            trace: IterationTrace::default(),
            converged: true,
            final_defect: rho0,
        });
    }
    let mut prev_x = x0.clone();
    let mut v = select(map, &x0, u_bar)?;
    let mut xv = a.apply(&v)?;
    let mut trace = IterationTrace::default();
    for _ in 0..max_iter {
        let v_new = select(map, &xv, &v)?;
        let xv_new = a.apply(&v_new)?;
        let rec = IterationRecord {
            x_change: xv.sub(&prev_x)?.sup_norm(),
            v_change: v_new.sub(&v)?.lp_norm(p)?,
            defect: defect(&v_new, &xv_new, map)?.sup_norm(),
        };
        let done = rec.v_change <= tol && rec.defect <= tol;
        let final_defect = rec.defect;
        trace.records.push(rec);
        prev_x = std::mem::replace(&mut xv, xv_new);
        v = v_new;
        if done {
            return Ok(InclusionSolution { u: v, x: xv, trace, converged: true, final_defect });
        }
    }
    Err(Error::Convergence(Box::new(trace)))
}

fn observed(sol: &InclusionSolution, u_bar: &GridFunction, x_bar: &GridFunction) -> Result<(GridFunction, GridFunction)> {
    Ok((sol.x.sub(x_bar)?.magnitude(), sol.u.sub(u_bar)?.magnitude()))
}

fn abs_tol(tol: f64) -> f64 {
    (10.0 * tol).max(1e-12)
}

/// Volterra-type problem; no smallness condition on M is needed.
pub fn solve_volterra(
    a: &KernelOperator,
    map: &MultiMap,
    u_bar: &GridFunction,
    tol: f64,
    max_iter: usize,
) -> Result<(InclusionSolution, BoundReport)> {
    if a.kind() != OperatorKind::Volterra {
        return Err(Error::Input("solve_volterra needs a Volterra operator".into()));
    }
    check_problem(a, map, u_bar)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let check = a.volterra_constant_check(8, &mut rng)?;
    if !check.holds {
        return Err(Error::Precondition(format!(
            "declared Volterra constant is too small (observed ratio {})",
            check.worst_ratio
        )));
    }
    let x_bar = a.apply(u_bar)?;
    let rho = defect(u_bar, &x_bar, map)?;
    if rho.values().iter().any(|r| !r.is_finite()) {
        return Err(Error::Precondition("initial defect is not finite".into()));
    }
    let sol = iterate(a, map, u_bar, 1.0, tol, max_iter)?;
    let (m, bound_x, bound_u) = volterra_bounds(a.volterra_constant(), map.modulus(), &rho)?;
    let (ox, ou) = observed(&sol, u_bar, &x_bar)?;
    let report = BoundReport::assemble(Some(m), bound_x, bound_u, ox, ou, abs_tol(tol));
    Ok((sol, report))
}

/// m(t), L int e^{m(t)-m(tau)} rho(tau) dtau, and rho + M times the latter.
pub fn volterra_bounds(
    l: f64,
    modulus: &GridFunction,
    rho: &GridFunction,
) -> Result<(GridFunction, GridFunction, GridFunction)> {
    let m = modulus.cumulative_integral()?.scale(l);
    let weighted = rho.zip_with(&m, |r, mk| r * (-mk).exp())?;
    let cum = weighted.cumulative_integral()?;
    let bound_x = cum.zip_with(&m, |c, mk| l * mk.exp() * c)?;
    let bound_u = rho.add(&modulus.zip_with(&bound_x, |mk, b| mk * b)?)?;
    Ok((m, bound_x, bound_u))
}

/// Fredholm-type problem on an interval or a box; needs ||A|| ||M||_p < 1.
pub fn solve_fredholm(
    a: &KernelOperator,
    map: &MultiMap,
    u_bar: &GridFunction,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(InclusionSolution, BoundReport)> {
    if a.kind() != OperatorKind::Fredholm {
        return Err(Error::Input("solve_fredholm needs a Fredholm operator".into()));
    }
    check_problem(a, map, u_bar)?;
    let factor = a.fredholm_contraction_factor(map.modulus(), p)?;
    if factor >= 1.0 {
        return Err(Error::Precondition(format!("contraction factor {factor} is not below 1")));
    }
    let x_bar = a.apply(u_bar)?;
    let rho = defect(u_bar, &x_bar, map)?;
    let sol = iterate(a, map, u_bar, p, tol, max_iter)?;
    let bx = a.opnorm(p)? * rho.lp_norm(p)? / (1.0 - factor);
    let bound_x = GridFunction::constant(rho.grid().clone(), &[bx])?;
    let bound_u = rho.add(&map.modulus().scale(bx))?;
    let (ox, ou) = observed(&sol, u_bar, &x_bar)?;
    let report = BoundReport::assemble(None, bound_x, bound_u, ox, ou, abs_tol(tol));
    Ok((sol, report))
}

/// The Fredholm solver on a box domain D in R^m.
pub fn solve_box(
    a: &KernelOperator,
    map: &MultiMap,
    u_bar: &GridFunction,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(InclusionSolution, BoundReport)> {
    if a.grid().kind() != GridKind::Box {
        return Err(Error::Input("solve_box needs a box grid".into()));
    }
    solve_fredholm(a, map, u_bar, p, tol, max_iter)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationRow {
    pub s_norm: f64,
    pub deviation: f64,
    pub bound: f64,
    pub within_bound: bool,
}

#[derive(Clone, Debug)]
pub struct PerturbationReport {
    pub rows: Vec<PerturbationRow>,
    pub all_within_bound: bool,
    /// Deviations are nonincreasing as ||s|| decreases.
    pub monotone: bool,
}

/// Re-solves u in F(t, (Au)(t)) + s(t) for each perturbation, warm-started
/// from the unperturbed solution, and compares ||x_s - x_0||_inf with the
/// a-priori bound: ||A|| ||s||_p / (1 - ||A|| ||M||_p) for Fredholm
/// operators, L e^{m(T)} ||s||_1 for Volterra ones.
pub fn perturbation_study(
    a: &KernelOperator,
    map: &MultiMap,
    u0: &InclusionSolution,
    s_list: &[GridFunction],
    p: f64,
    tube_radius: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PerturbationReport> {
    check_problem(a, map, &u0.u)?;
    let x0 = a.apply(&u0.u)?;
    let h = a.grid().max_spacing();
    let mut rows = Vec::with_capacity(s_list.len());
    for s in s_list {
        let (s_norm, bound) = match a.kind() {
            OperatorKind::Fredholm => {
                let factor = a.fredholm_contraction_factor(map.modulus(), p)?;
                if factor >= 1.0 {
                    return Err(Error::Precondition(format!("contraction factor {factor} is not below 1")));
                }
                let sn = s.lp_norm(p)?;
                (sn, a.opnorm(p)? * sn / (1.0 - factor))
            }
            OperatorKind::Volterra => {
                let l = a.volterra_constant();
                let mt = l * map.modulus().integral()[0];
                let sn = s.lp_norm(1.0)?;
                (sn, l * mt.exp() * sn)
            }
        };
        if bound > tube_radius {
            return Err(Error::Precondition(format!(
                "perturbation with norm {s_norm} leaves the tube: bound {bound} > radius {tube_radius}"
            )));
        }
        let shifted = map.shifted(s)?;
        let sol = iterate(a, &shifted, &u0.u, p, tol, max_iter)?;
        let deviation = sol.x.sub(&x0)?.sup_norm();
        rows.push(PerturbationRow {
            s_norm,
            deviation,
            bound,
            within_bound: deviation <= bound * (1.0 + 10.0 * h) + abs_tol(tol),
        });
    }
    let mut order: Vec<&PerturbationRow> = rows.iter().collect();
    order.sort_by(|x, y| x.s_norm.total_cmp(&y.s_norm));
    let monotone = order.windows(2).all(|w| w[0].deviation <= w[1].deviation + abs_tol(tol));
    let all_within_bound = rows.iter().all(|r| r.within_bound);
    Ok(PerturbationReport { rows, all_within_bound, monotone })
}

/// Gronwall bound on ||u||_{L1} for every solution when |F(t,x)| <= alpha(t) + beta|x|:
/// int alpha + L beta (T - t0) e^{L beta (T - t0)} int alpha.
pub fn solution_set_bound(a: &KernelOperator, alpha: &GridFunction, beta: f64) -> Result<f64> {
    if a.kind() != OperatorKind::Volterra {
        return Err(Error::Input("solution-set bound applies to Volterra operators".into()));
    }
    if !(beta >= 0.0) {
        return Err(Error::Input(format!("growth rate beta must be nonnegative, got {beta}")));
    }
    if alpha.codim() != 1 || alpha.values().iter().any(|v| *v < 0.0) {
        return Err(Error::Input("alpha must be a nonnegative scalar function".into()));
    }
    let g = a.grid();
    let span = g.upper()[0] - g.lower()[0];
    let lb = a.volterra_constant() * beta * span;
    let int_alpha = alpha.integral()[0];
    Ok(int_alpha + lb * lb.exp() * int_alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridfn::Grid;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn feasible_start_needs_no_iterations() {
        let g = unit(101);
        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 1.0).unwrap();
        let f = MultiMap::affine(g.clone(), 0.5, vec![0.0], 0.0).unwrap();
        let (sol, rep) = solve_volterra(&a, &f, &GridFunction::zeros(g, 1), 1e-12, 100).unwrap();
        assert_eq!(sol.iterations(), 0);
        assert_eq!(sol.u.sup_norm(), 0.0);
        assert!(rep.satisfied);
        assert_eq!(rep.bound_u.sup_norm(), 0.0);
    }

    #[test]
    fn volterra_linear_corpus() {
        let g = unit(1001);
        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 1.0).unwrap();
        let f = MultiMap::affine(g.clone(), 0.5, vec![1.0], 0.0).unwrap();
        let (sol, rep) = solve_volterra(&a, &f, &GridFunction::zeros(g.clone(), 1), 1e-12, 200).unwrap();
        for k in 0..g.len() {
            let t = g.time(k);
            assert!((sol.u.at(k) - (0.5 * t).exp()).abs() < 1e-2);
            assert!((sol.x.at(k) - 2.0 * ((0.5 * t).exp() - 1.0)).abs() < 1e-2);
            assert!((rep.bound_u.at(k) - (0.5 * t).exp()).abs() < 1e-2);
        }
        assert!(rep.satisfied);
        assert!(sol.final_defect <= 1e-12);
    }

    #[test]
    fn violated_volterra_constant_is_a_precondition_error() {
        let g = unit(11);
        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 2.0)
            .unwrap()
            .with_lipschitz(1.0)
            .unwrap();
        let f = MultiMap::affine(g.clone(), 0.5, vec![1.0], 0.0).unwrap();
        assert!(matches!(
            solve_volterra(&a, &f, &GridFunction::zeros(g, 1), 1e-10, 50),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fredholm_fixed_point() {
        let g = unit(201);
        let a = KernelOperator::scalar(OperatorKind::Fredholm, g.clone(), 1, |_, _| 0.25).unwrap();
        let f = MultiMap::affine(g.clone(), 1.0, vec![1.0], 0.0).unwrap();
        let (sol, rep) = solve_fredholm(&a, &f, &GridFunction::zeros(g, 1), 1.0, 1e-13, 200).unwrap();
        assert!((sol.u.at(7) - 4.0 / 3.0).abs() < 1e-8);
        assert!(rep.satisfied);
        assert!(sol.trace.max_decay_ratio(2, 1e-13).unwrap() <= 0.25 + 1e-2);
    }

    #[test]
    fn fredholm_rejects_expanding_problem() {
        let g = unit(21);
        let a = KernelOperator::scalar(OperatorKind::Fredholm, g.clone(), 1, |_, _| 1.5).unwrap();
        let f = MultiMap::affine(g.clone(), 1.0, vec![1.0], 0.0).unwrap();
        assert!(matches!(
            solve_fredholm(&a, &f, &GridFunction::zeros(g, 1), 1.0, 1e-10, 50),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn non_convergence_carries_trace() {
        let g = unit(21);
        let a = KernelOperator::scalar(OperatorKind::Fredholm, g.clone(), 1, |_, _| 0.9).unwrap();
        let f = MultiMap::affine(g.clone(), 1.0, vec![1.0], 0.0).unwrap();
        match solve_fredholm(&a, &f, &GridFunction::zeros(g, 1), 1.0, 1e-14, 3) {
            Err(Error::Convergence(trace)) => assert_eq!(trace.records.len(), 3),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn gronwall_formula() {
        let g = unit(101);
        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 1.0).unwrap();
        let zero = GridFunction::zeros(g.clone(), 1);
        assert_eq!(solution_set_bound(&a, &zero, 1.0).unwrap(), 0.0);
        let one = GridFunction::constant(g, &[1.0]).unwrap();
        assert!((solution_set_bound(&a, &one, 0.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((solution_set_bound(&a, &one, 1.0).unwrap() - (1.0 + 1f64.exp())).abs() < 1e-9);
        assert!(solution_set_bound(&a, &one, -1.0).is_err());
    }
}

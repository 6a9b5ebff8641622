//! Gradient of J(u) = sum_i Phi_i(x_i, u_i) subject to x_{i+1} = f_i(x_i, u_i)
//! on an infinite horizon, truncated at N steps.
//!
//! With H_i = Phi_i + <psi_i, f_i>, the costate runs backward from psi_N = 0
//! as psi_{i-1} = H_{i,x}, and the gradient is g_i = H_{i,u}.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::setval::norm;

pub type VecFn = dyn Fn(usize, &[f64], &[f64]) -> Vec<f64> + Send + Sync;
pub type ScalarFn = dyn Fn(usize, &[f64], &[f64]) -> f64 + Send + Sync;

/// Dynamics, stage cost and their partials. Jacobians are row-major:
/// f_x is n x n, f_u is n x m.
#[derive(Clone)]
pub struct Model {
    pub state_dim: usize,
    pub control_dim: usize,
    pub f: Arc<VecFn>,
    pub f_x: Arc<VecFn>,
    pub f_u: Arc<VecFn>,
    pub cost: Arc<ScalarFn>,
    pub cost_x: Arc<VecFn>,
    pub cost_u: Arc<VecFn>,
}

#[derive(Clone)]
pub struct DiscreteOCProblem {
    model: Model,
    x0: Vec<f64>,
    l1: f64,
    l2: f64,
    /// Lipschitz constant of the partials of f and Phi.
    deriv_lipschitz: f64,
    horizon: usize,
}

impl fmt::Debug for DiscreteOCProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteOCProblem")
            .field("state_dim", &self.model.state_dim)
            .field("control_dim", &self.model.control_dim)
            .field("x0", &self.x0)
            .field("l1", &self.l1)
            .field("l2", &self.l2)
            .field("horizon", &self.horizon)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdjointTrajectory {
    /// psi_0 .. psi_{N-1}.
    pub psi: Vec<Vec<f64>>,
    /// |psi_{N-1}|.
    pub terminal_tail: f64,
}

fn matvec_t(a: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..cols).map(|c| (0..rows).map(|r| a[r * cols + c] * v[r]).sum()).collect()
}

fn gaussian(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl DiscreteOCProblem {
    /// Validates 0 < L1 < sqrt(2)/2, L2 > 0, and the supplied partials against
    /// central differences at random points.
    pub fn new(model: Model, x0: Vec<f64>, l1: f64, l2: f64, deriv_lipschitz: f64, horizon: usize) -> Result<Self> {
        check_dim(model.state_dim, x0.len())?;
        if !(l1 > 0.0 && l1 < std::f64::consts::FRAC_1_SQRT_2) {
            return Err(Error::Input(format!("L1 = {l1} must lie in (0, sqrt(2)/2)")));
        }
        if !(l2 > 0.0 && l2.is_finite()) {
            return Err(Error::Input(format!("L2 = {l2} must be positive")));
        }
        if !(deriv_lipschitz >= 0.0) {
            return Err(Error::Input("derivative Lipschitz constant must be nonnegative".into()));
        }
        if horizon == 0 {
            return Err(Error::Input("horizon must be at least 1".into()));
        }
        let prob = DiscreteOCProblem { model, x0, l1, l2, deriv_lipschitz, horizon };
        prob.check_partials(16, 0xd1ff)?;
        Ok(prob)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Input("horizon must be at least 1".into()));
        }
        Ok(DiscreteOCProblem { horizon, ..self.clone() })
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim
    }

    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    fn check_partials(&self, samples: usize, seed: u64) -> Result<()> {
        let (n, m) = (self.model.state_dim, self.model.control_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-5;
        for s in 0..samples {
            let i = s % 5;
            let x = gaussian(n, 1.0, &mut rng);
            let u = gaussian(m, 1.0, &mut rng);
            let fx = (self.model.f_x)(i, &x, &u);
            let fu = (self.model.f_u)(i, &x, &u);
            let cx = (self.model.cost_x)(i, &x, &u);
            let cu = (self.model.cost_u)(i, &x, &u);
            check_dim(n * n, fx.len())?;
            check_dim(n * m, fu.len())?;
            check_dim(n, cx.len())?;
            check_dim(m, cu.len())?;
            let close = |a: f64, fd: f64, what: &str| -> Result<()> {
                if (a - fd).abs() > 1e-6 * a.abs().max(1.0) {
                    Err(Error::Input(format!("{what} = {a} disagrees with central difference {fd} at step {i}")))
                } else {
                    Ok(())
                }
            };
            for c in 0..n {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[c] += h;
                xm[c] -= h;
                let (fp, fm) = ((self.model.f)(i, &xp, &u), (self.model.f)(i, &xm, &u));
                for r in 0..n {
                    close(fx[r * n + c], (fp[r] - fm[r]) / (2.0 * h), "f_x")?;
                }
                close(cx[c], ((self.model.cost)(i, &xp, &u) - (self.model.cost)(i, &xm, &u)) / (2.0 * h), "Phi_x")?;
            }
            for c in 0..m {
                let (mut up, mut um) = (u.clone(), u.clone());
                up[c] += h;
                um[c] -= h;
                let (fp, fm) = ((self.model.f)(i, &x, &up), (self.model.f)(i, &x, &um));
                for r in 0..n {
                    close(fu[r * m + c], (fp[r] - fm[r]) / (2.0 * h), "f_u")?;
                }
                close(cu[c], ((self.model.cost)(i, &x, &up) - (self.model.cost)(i, &x, &um)) / (2.0 * h), "Phi_u")?;
            }
        }
        Ok(())
    }

    fn check_controls(&self, u: &[Vec<f64>]) -> Result<()> {
        check_dim(self.horizon, u.len())?;
        for ui in u {
            check_dim(self.model.control_dim, ui.len())?;
        }
        Ok(())
    }

    /// x_0 .. x_N.
    pub fn forward(&self, u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_controls(u)?;
        let mut xs = Vec::with_capacity(self.horizon + 1);
        xs.push(self.x0.clone());
        for (i, ui) in u.iter().enumerate() {
            let next = (self.model.f)(i, &xs[i], ui);
            check_dim(self.model.state_dim, next.len())?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation { at: format!("step {}", i + 1), message: "state overflow".into() });
            }
            xs.push(next);
        }
        Ok(xs)
    }

    /// sum_{i=0}^{N} Phi_i(x_i, u_i) with u_N = 0.
    pub fn objective(&self, u: &[Vec<f64>]) -> Result<f64> {
        let xs = self.forward(u)?;
        let zero = vec![0.0; self.model.control_dim];
        let mut j = 0.0;
        for (i, x) in xs.iter().enumerate() {
            let ui = u.get(i).unwrap_or(&zero);
            j += (self.model.cost)(i, x, ui);
        }
        Ok(j)
    }

    pub fn adjoint(&self, u: &[Vec<f64>], x: &[Vec<f64>]) -> Result<AdjointTrajectory> {
        self.check_controls(u)?;
        check_dim(self.horizon + 1, x.len())?;
        let (n, nn) = (self.model.state_dim, self.horizon);
        let zero_u = vec![0.0; self.model.control_dim];
        let mut psi = vec![vec![0.0; n]; nn];
        let mut next = vec![0.0; n];
        for i in (1..=nn).rev() {
            let ui = u.get(i).unwrap_or(&zero_u);
            let fx = (self.model.f_x)(i, &x[i], ui);
            let mut cur = (self.model.cost_x)(i, &x[i], ui);
            for (c, v) in cur.iter_mut().zip(matvec_t(&fx, n, n, &next)) {
                *c += v;
            }
            psi[i - 1] = cur.clone();
            next = cur;
        }
        let terminal_tail = norm(&psi[nn - 1]);
        Ok(AdjointTrajectory { psi, terminal_tail })
    }

    pub fn gradient(&self, u: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let x = self.forward(u)?;
        let adj = self.adjoint(u, &x)?;
        Ok(self.gradient_from(u, &x, &adj))
    }

    fn gradient_from(&self, u: &[Vec<f64>], x: &[Vec<f64>], adj: &AdjointTrajectory) -> Vec<Vec<f64>> {
        let (n, m) = (self.model.state_dim, self.model.control_dim);
        (0..self.horizon)
            .map(|i| {
                let fu = (self.model.f_u)(i, &x[i], &u[i]);
                let mut g = (self.model.cost_u)(i, &x[i], &u[i]);
                for (gc, v) in g.iter_mut().zip(matvec_t(&fu, n, m, &adj.psi[i])) {
                    *gc += v;
                }
                g
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// max_i |g_i - fd_i| / max_i |g_i|.
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub step: f64,
}

/// Central differences of J in every control coordinate.
pub fn gradient_fd_check(prob: &DiscreteOCProblem, u: &[Vec<f64>], step: f64) -> Result<GradCheckReport> {
    let g = prob.gradient(u)?;
    let mut abs: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut work = u.to_vec();
    for i in 0..u.len() {
        for c in 0..u[i].len() {
            let orig = work[i][c];
            work[i][c] = orig + step;
            let jp = prob.objective(&work)?;
            work[i][c] = orig - step;
            let jm = prob.objective(&work)?;
            work[i][c] = orig;
            let fd = (jp - jm) / (2.0 * step);
            abs = abs.max((fd - g[i][c]).abs());
            scale = scale.max(g[i][c].abs());
        }
    }
    let rel = if scale > 0.0 { abs / scale } else { abs };
    Ok(GradCheckReport { max_relative_error: rel, max_abs_error: abs, step })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationRow {
    pub horizon: usize,
    /// Sup distance to the previous horizon's gradient on the common prefix.
    pub prefix_difference: Option<f64>,
    pub terminal_tail: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TruncationReport {
    pub prefix_len: usize,
    pub rows: Vec<TruncationRow>,
    /// Successive prefix-difference ratios (later / earlier).
    pub ratios: Vec<f64>,
}

/// Gradients at increasing horizons with `u` padded by zeros (or cut),
/// compared on the first `min(N_list)` entries.
pub fn tail_truncation_study(prob: &DiscreteOCProblem, u: &[Vec<f64>], horizons: &[usize]) -> Result<TruncationReport> {
    let mut hs = horizons.to_vec();
    hs.sort_unstable();
    hs.dedup();
    let prefix_len = *hs.first().ok_or_else(|| Error::Input("empty horizon list".into()))?;
    let m = prob.control_dim();
    let mut rows: Vec<TruncationRow> = Vec::with_capacity(hs.len());
    let mut prev: Option<Vec<Vec<f64>>> = None;
    for &n in &hs {
        let p = prob.with_horizon(n)?;
        let un: Vec<Vec<f64>> = (0..n).map(|i| u.get(i).cloned().unwrap_or_else(|| vec![0.0; m])).collect();
        let x = p.forward(&un)?;
        let adj = p.adjoint(&un, &x)?;
        let g = p.gradient_from(&un, &x, &adj);
        let diff = prev.as_ref().map(|pg| {
            (0..prefix_len)
                .flat_map(|i| pg[i].iter().zip(&g[i]).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        });
        rows.push(TruncationRow { horizon: n, prefix_difference: diff, terminal_tail: adj.terminal_tail });
        prev = Some(g);
    }
    let diffs: Vec<f64> = rows.iter().filter_map(|r| r.prefix_difference).collect();
    let ratios = diffs.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    Ok(TruncationReport { prefix_len, rows, ratios })
}

/// Largest |psi_{i+1}|^2 / |psi_i|^2 over i >= burn_in, skipping entries whose
/// squared norm is below `floor`.
pub fn costate_decay_ratio(adj: &AdjointTrajectory, burn_in: usize, floor: f64) -> Option<f64> {
    let sq: Vec<f64> = adj.psi.iter().map(|p| p.iter().map(|v| v * v).sum()).collect();
    sq.windows(2)
        .enumerate()
        .filter(|(i, w)| *i >= burn_in && w[0] > floor)
        .map(|(_, w)| w[1] / w[0])
        .reduce(f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionReport {
    pub trials: usize,
    /// max over trials of sum |dx|^2 / (2 L2^2 / (1 - 2 L1^2) sum |h|^2).
    pub worst_ratio: f64,
    pub holds: bool,
}

/// sum |x(u+h)_i - x(u)_i|^2 <= 2 L2^2 / (1 - 2 L1^2) sum |h_i|^2 on random h.
pub fn contraction_check(prob: &DiscreteOCProblem, u: &[Vec<f64>], trials: usize, seed: u64) -> Result<ContractionReport> {
    let x = prob.forward(u)?;
    let c = 2.0 * prob.l2 * prob.l2 / (1.0 - 2.0 * prob.l1 * prob.l1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let s = [1e-3, 0.1, 1.0, 10.0][t % 4];
        let h: Vec<Vec<f64>> = u.iter().map(|ui| gaussian(ui.len(), s, &mut rng)).collect();
        let uh: Vec<Vec<f64>> = u.iter().zip(&h).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect()).collect();
        let xh = prob.forward(&uh)?;
        let dx: f64 = x.iter().zip(&xh).map(|(a, b)| crate::setval::dist_sq(a, b)).sum();
        let hh: f64 = h.iter().map(|hi| hi.iter().map(|v| v * v).sum::<f64>()).sum();
        if hh > 0.0 {
            worst = worst.max(dx / (c * hh));
        }
    }
    Ok(ContractionReport { trials, worst_ratio: worst, holds: worst <= 1.0 + 1e-12 })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RemainderReport {
    /// Fitted a in J(u + eps h) - J(u) - eps <g, h> ~ a eps^2 + b eps^3.
    pub fitted_coefficient: f64,
    /// max over eps of |remainder| / eps^2.
    pub max_scaled_remainder: f64,
    /// C |h|^2 with C = (L + cL)(3 L2^2 / (1 - 2 L1^2) + 1/2) + K,
    /// K = (L + cL)(L2^2 / (1 - 2 L1^2) + 3/2), c = max |psi_i|.
    pub bound: f64,
    pub holds: bool,
}

pub fn remainder_check(prob: &DiscreteOCProblem, u: &[Vec<f64>], h: &[Vec<f64>]) -> Result<RemainderReport> {
    prob.check_controls(h)?;
    let x = prob.forward(u)?;
    let adj = prob.adjoint(u, &x)?;
    let g = prob.gradient_from(u, &x, &adj);
    let j0 = prob.objective(u)?;
    let gh: f64 = g.iter().zip(h).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>()).sum();
    let hh: f64 = h.iter().map(|hi| hi.iter().map(|v| v * v).sum::<f64>()).sum();
    let eps = [1e-2, 5e-3, 2e-3, 1e-3, 5e-4, 2e-4, 1e-4];
    let mut scaled = Vec::with_capacity(eps.len());
    for e in eps {
        let ue: Vec<Vec<f64>> = u.iter().zip(h).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + e * q).collect()).collect();
        let rem = prob.objective(&ue)? - j0 - e * gh;
        scaled.push(rem / (e * e));
    }
    // least squares for rem / eps^2 = a + b eps
    let design = DMatrix::from_fn(eps.len(), 2, |r, c| if c == 0 { 1.0 } else { eps[r] });
    let rhs = DVector::from_vec(scaled.clone());
    let coef = design
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Input(format!("remainder fit failed: {e}")))?;
    let c = adj.psi.iter().map(|p| norm(p)).fold(0.0, f64::max);
    let l = prob.deriv_lipschitz;
    let q = prob.l2 * prob.l2 / (1.0 - 2.0 * prob.l1 * prob.l1);
    let k = (l + c * l) * (q + 1.5);
    let bound = ((l + c * l) * (3.0 * q + 0.5) + k) * hh;
    let max_scaled = scaled.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(RemainderReport {
        fitted_coefficient: coef[0],
        max_scaled_remainder: max_scaled,
        bound,
        holds: coef[0].abs() <= bound * (1.0 + 1e-9) && max_scaled <= bound * (1.0 + 1e-9),
    })
}

/// x_{i+1} = A x_i + B u_i, Phi_i = x'Qx + u'Ru with diagonal Q, R.
/// L1 and L2 are the Frobenius norms of A and B.
pub fn lq_problem(
    a: Vec<f64>,
    b: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    x0: Vec<f64>,
    horizon: usize,
) -> Result<DiscreteOCProblem> {
    let n = q.len();
    let m = r.len();
    check_dim(n * n, a.len())?;
    check_dim(n * m, b.len())?;
    check_dim(n, x0.len())?;
    let l1 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let l2 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dl = 2.0 * q.iter().chain(&r).fold(0.0f64, |acc, v| acc.max(v.abs()));
    let (a1, a2, b1, b2) = (a.clone(), a, b.clone(), b);
    let (q1, q2, r1, r2) = (q.clone(), q, r.clone(), r);
    let model = Model {
        state_dim: n,
        control_dim: m,
        f: Arc::new(move |_, x, u| {
            (0..n)
                .map(|i| (0..n).map(|j| a1[i * n + j] * x[j]).sum::<f64>() + (0..m).map(|j| b1[i * m + j] * u[j]).sum::<f64>())
                .collect()
        }),
        f_x: Arc::new(move |_, _, _| a2.clone()),
        f_u: Arc::new(move |_, _, _| b2.clone()),
        cost: Arc::new(move |_, x, u| {
            x.iter().zip(&q1).map(|(v, w)| w * v * v).sum::<f64>() + u.iter().zip(&r1).map(|(v, w)| w * v * v).sum::<f64>()
        }),
        cost_x: Arc::new(move |_, x, _| x.iter().zip(&q2).map(|(v, w)| 2.0 * w * v).collect()),
        cost_u: Arc::new(move |_, _, u| u.iter().zip(&r2).map(|(v, w)| 2.0 * w * v).collect()),
    };
    DiscreteOCProblem::new(model, x0, l1, l2, dl, horizon)
}

/// Scalar LQ: x_{i+1} = a x_i + b u_i, Phi = q x^2 + r u^2.
pub fn scalar_lq(a: f64, b: f64, q: f64, r: f64, x0: f64, horizon: usize) -> Result<DiscreteOCProblem> {
    lq_problem(vec![a], vec![b], vec![q], vec![r], vec![x0], horizon)
}

/// A random LQ instance with |A|_F = 0.6, |B|_F = 1 and weights in [0.5, 1.5].
pub fn random_lq(n: usize, m: usize, horizon: usize, seed: u64) -> Result<DiscreteOCProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = gaussian(n * n, 1.0, &mut rng);
    let an = norm(&a);
    a.iter_mut().for_each(|v| *v *= 0.6 / an);
    let mut b = gaussian(n * m, 1.0, &mut rng);
    let bn = norm(&b);
    b.iter_mut().for_each(|v| *v /= bn);
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
    let x0 = gaussian(n, 1.0, &mut rng);
    lq_problem(a, b, q, r, x0, horizon)
}

/// Saturating dynamics x_{i+1} = 0.5 tanh(x_i) + 0.5 u_i (componentwise),
/// Phi = |x|^2 + |u|^2.
pub fn logistic_problem(x0: Vec<f64>, horizon: usize) -> Result<DiscreteOCProblem> {
    let n = x0.len();
    let model = Model {
        state_dim: n,
        control_dim: n,
        f: Arc::new(|_, x, u| x.iter().zip(u).map(|(a, b)| 0.5 * a.tanh() + 0.5 * b).collect()),
        f_x: Arc::new(move |_, x, _| {
            let mut j = vec![0.0; n * n];
            for i in 0..n {
                j[i * n + i] = 0.5 / x[i].cosh().powi(2);
            }
            j
        }),
        f_u: Arc::new(move |_, _, _| {
            let mut j = vec![0.0; n * n];
            for i in 0..n {
                j[i * n + i] = 0.5;
            }
            j
        }),
        cost: Arc::new(|_, x, u| x.iter().chain(u).map(|v| v * v).sum()),
        cost_x: Arc::new(|_, x, _| x.iter().map(|v| 2.0 * v).collect()),
        cost_u: Arc::new(|_, _, u| u.iter().map(|v| 2.0 * v).collect()),
    };
    DiscreteOCProblem::new(model, x0, 0.5, 0.5, 2.0, horizon)
}

/// u_i = amplitude * ratio^i in every component.
pub fn geometric_controls(horizon: usize, dim: usize, amplitude: f64, ratio: f64) -> Vec<Vec<f64>> {
    (0..horizon).map(|i| vec![amplitude * ratio.powi(i as i32); dim]).collect()
}

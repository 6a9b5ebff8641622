//! Linear integral operators on grid functions.
//!
//! Each operator is stored as its quadrature matrix: block (k, j) holds the
//! weight of node j in the rule for node k times the kernel value K(t_k, s_j).
//! Volterra rows integrate over [t0, t_k] only; Fredholm rows use the global
//! weights.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::gridfn::{Grid, GridFunction, GridKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    Volterra,
    Fredholm,
}

#[derive(Clone)]
pub struct KernelOperator {
    kind: OperatorKind,
    grid: Arc<Grid>,
    dim: usize,
    blocks: Arc<Vec<f64>>,
    lipschitz: Option<f64>,
    declared_opnorm: Option<f64>,
}

impl fmt::Debug for KernelOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelOperator")
            .field("kind", &self.kind)
            .field("nodes", &self.grid.len())
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .field("declared_opnorm", &self.declared_opnorm)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConstantCheck {
    pub holds: bool,
    pub worst_ratio: f64,
}

impl KernelOperator {
    /// `kernel(t, s)` returns the dim x dim matrix K(t, s) in row-major order.
    pub fn new(
        kind: OperatorKind,
        grid: Arc<Grid>,
        dim: usize,
        kernel: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("operator dimension must be positive".into()));
        }
        if kind == OperatorKind::Volterra && grid.kind() != GridKind::Interval {
            return Err(Error::Input("Volterra operators need an interval grid".into()));
        }
        let n = grid.len();
        let bs = dim * dim;
        let coords: Vec<Vec<f64>> = (0..n).map(|k| grid.coords(k)).collect();
        let mut blocks = vec![0.0; n * n * bs];
        for k in 0..n {
            for j in 0..n {
                let w = match kind {
                    OperatorKind::Fredholm => grid.weights()[j],
                    OperatorKind::Volterra => volterra_weight(grid.spacing(0), k, j),
                };
                if w == 0.0 {
                    continue;
                }
                let kv = kernel(&coords[k], &coords[j]);
                check_dim(bs, kv.len())?;
                if kv.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Evaluation {
                        at: format!("kernel({}, {})", k, j),
                        message: "non-finite kernel value".into(),
                    });
                }
                let dst = &mut blocks[(k * n + j) * bs..(k * n + j + 1) * bs];
                for (d, v) in dst.iter_mut().zip(&kv) {
                    *d = w * v;
                }
            }
        }
        Ok(KernelOperator { kind, grid, dim, blocks: Arc::new(blocks), lipschitz: None, declared_opnorm: None })
    }

    /// Scalar kernel acting as k(t, s) times the identity on R^dim.
    pub fn scalar(kind: OperatorKind, grid: Arc<Grid>, dim: usize, k: impl Fn(&[f64], &[f64]) -> f64) -> Result<Self> {
        KernelOperator::new(kind, grid, dim, |t, s| {
            let v = k(t, s);
            let mut m = vec![0.0; dim * dim];
            for i in 0..dim {
                m[i * dim + i] = v;
            }
            m
        })
    }

    /// Scalar kernel given by its values on node pairs, `table[k][j] = K(t_k, s_j)`.
    pub fn from_table(kind: OperatorKind, grid: Arc<Grid>, dim: usize, table: &[Vec<f64>]) -> Result<Self> {
        let n = grid.len();
        if table.len() != n || table.iter().any(|r| r.len() != n) {
            return Err(Error::Input(format!("kernel table must be {n} x {n}")));
        }
        let index: Vec<Vec<f64>> = (0..n).map(|k| grid.coords(k)).collect();
        let lookup = |c: &[f64]| index.iter().position(|x| x.as_slice() == c).expect("node coordinate");
        KernelOperator::scalar(kind, grid.clone(), dim, |t, s| table[lookup(t)][lookup(s)])
    }

    /// Declared constant L in |(Au)(t)| <= L int_{t0}^t |u| (Volterra) or
    /// |(Au)(t)| <= L ||u||_p (Fredholm).
    pub fn with_lipschitz(mut self, l: f64) -> Result<Self> {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Input("operator constant L must be finite and nonnegative".into()));
        }
        self.lipschitz = Some(l);
        Ok(self)
    }

    /// Declared analytic value of ||A||; the larger of this and the computed
    /// norm is used.
    pub fn with_declared_opnorm(mut self, a: f64) -> Result<Self> {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::Input("declared operator norm must be finite and nonnegative".into()));
        }
        self.declared_opnorm = Some(a);
        Ok(self)
    }

    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Quadrature block (k, j), row-major dim x dim.
    pub fn block(&self, k: usize, j: usize) -> &[f64] {
        let n = self.grid.len();
        let bs = self.dim * self.dim;
        &self.blocks[(k * n + j) * bs..(k * n + j + 1) * bs]
    }

    fn block_norm(&self, k: usize, j: usize) -> f64 {
        let b = self.block(k, j);
        if self.dim == 1 {
            b[0].abs()
        } else {
            // Frobenius norm: an upper bound for the spectral norm
            b.iter().map(|v| v * v).sum::<f64>().sqrt()
        }
    }

    /// The Volterra constant: the declared value, or else the largest kernel
    /// norm, which bounds the discrete operator exactly.
    pub fn volterra_constant(&self) -> f64 {
        if let Some(l) = self.lipschitz {
            return l;
        }
        let n = self.grid.len();
        let h = self.grid.spacing(0);
        let mut l: f64 = 0.0;
        for k in 1..n {
            for j in 0..=k {
                l = l.max(self.block_norm(k, j) / volterra_weight(h, k, j));
            }
        }
        l
    }

    /// Exact sup_k of the weighted L_q norm of row k, i.e. the discrete
    /// L_p -> C norm (an upper bound for dim > 1).
    pub fn computed_opnorm(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::Input(format!("norm exponent must be >= 1 or infinity, got {p}")));
        }
        let n = self.grid.len();
        let w = self.grid.weights();
        let mut best: f64 = 0.0;
        for k in 0..n {
            let row = if p == 1.0 {
                (0..n).map(|j| self.block_norm(k, j) / w[j]).fold(0.0, f64::max)
            } else if p.is_infinite() {
                (0..n).map(|j| self.block_norm(k, j)).sum()
            } else {
                let q = p / (p - 1.0);
                let s: f64 = (0..n).map(|j| w[j] * (self.block_norm(k, j) / w[j]).powf(q)).sum();
                s.powf(1.0 / q)
            };
            best = best.max(row);
        }
        Ok(best)
    }

    /// ||A|| as used by the Fredholm solver and bounds: max(computed, declared).
    pub fn opnorm(&self, p: f64) -> Result<f64> {
        Ok(self.computed_opnorm(p)?.max(self.declared_opnorm.unwrap_or(0.0)))
    }

    /// The constant L for the operator kind; Fredholm falls back to ||A||.
    pub fn lipschitz_constant(&self, p: f64) -> Result<f64> {
        match (self.kind, self.lipschitz) {
            (_, Some(l)) => Ok(l),
            (OperatorKind::Volterra, None) => Ok(self.volterra_constant()),
            (OperatorKind::Fredholm, None) => self.opnorm(p),
        }
    }

    pub fn apply(&self, u: &GridFunction) -> Result<GridFunction> {
        self.check_input(u)?;
        let n = self.grid.len();
        let d = self.dim;
        let mut out = vec![0.0; n * d];
        for k in 0..n {
            let jmax = match self.kind {
                OperatorKind::Volterra => k + 1,
                OperatorKind::Fredholm => n,
            };
            let acc = &mut out[k * d..(k + 1) * d];
            for j in 0..jmax {
                let b = self.block(k, j);
                let uj = u.value(j);
                for r in 0..d {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += b[r * d + c] * uj[c];
                    }
                    acc[r] += s;
                }
            }
        }
        GridFunction::new(self.grid.clone(), d, out)
    }

    /// Adjoint under the quadrature inner product:
    /// (A*w)_j = (1/w_j) sum_k w_k B_kj^T w(t_k), so <Au, w> = <u, A*w> exactly.
    pub fn adjoint_apply(&self, wf: &GridFunction) -> Result<GridFunction> {
        self.check_input(wf)?;
        let n = self.grid.len();
        let d = self.dim;
        let w = self.grid.weights();
        let mut out = vec![0.0; n * d];
        for k in 0..n {
            let jmax = match self.kind {
                OperatorKind::Volterra => k + 1,
                OperatorKind::Fredholm => n,
            };
            let wk = wf.value(k);
            for j in 0..jmax {
                let b = self.block(k, j);
                let acc = &mut out[j * d..(j + 1) * d];
                for c in 0..d {
                    let mut s = 0.0;
                    for r in 0..d {
                        s += b[r * d + c] * wk[r];
                    }
                    acc[c] += w[k] * s;
                }
            }
        }
        for j in 0..n {
            for c in 0..d {
                out[j * d + c] /= w[j];
            }
        }
        GridFunction::new(self.grid.clone(), d, out)
    }

    fn check_input(&self, u: &GridFunction) -> Result<()> {
        if !(Arc::ptr_eq(u.grid(), &self.grid) || **u.grid() == *self.grid) {
            return Err(Error::Input("operand grid does not match the operator grid".into()));
        }
        check_dim(self.dim, u.codim())
    }

    /// Checks |(Au)(t_k)| <= L (int_{t0}^{t_k} |u|) + 1e-10 on u = 1 and on
    /// `samples` Gaussian draws.
    pub fn volterra_constant_check<R: Rng>(&self, samples: usize, rng: &mut R) -> Result<ConstantCheck> {
        if self.kind != OperatorKind::Volterra {
            return Err(Error::Input("constant check applies to Volterra operators".into()));
        }
        let l = self.volterra_constant();
        let n = self.grid.len();
        let d = self.dim;
        let mut holds = true;
        let mut worst: f64 = 0.0;
        for s in 0..=samples {
            let values: Vec<f64> = if s == 0 {
                vec![1.0; n * d]
            } else {
                (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            };
            let u = GridFunction::new(self.grid.clone(), d, values)?;
            let au = self.apply(&u)?;
            let bound = u.magnitude().cumulative_integral()?;
            for k in 0..n {
                let lhs = crate::setval::norm(au.value(k));
                let rhs = l * bound.at(k);
                if lhs > rhs + 1e-10 {
                    holds = false;
                }
                if bound.at(k) > 0.0 {
                    worst = worst.max(lhs / bound.at(k));
                }
            }
        }
        Ok(ConstantCheck { holds, worst_ratio: worst })
    }

    /// ||A|| times ||M||_p; the Fredholm solver needs this below 1.
    pub fn fredholm_contraction_factor(&self, modulus: &GridFunction, p: f64) -> Result<f64> {
        if modulus.codim() != 1 || modulus.values().iter().any(|m| *m < 0.0) {
            return Err(Error::Input("modulus must be a nonnegative scalar function".into()));
        }
        Ok(self.opnorm(p)? * modulus.lp_norm(p)?)
    }
}

fn volterra_weight(h: f64, k: usize, j: usize) -> f64 {
    if k == 0 || j > k {
        0.0
    } else if j == 0 || j == k {
        0.5 * h
    } else {
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn identity_volterra_integrates() {
        let g = unit(101);
        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 1.0).unwrap();
        let au = a.apply(&GridFunction::constant(g.clone(), &[1.0]).unwrap()).unwrap();
        for k in 0..g.len() {
            assert!((au.at(k) - g.time(k)).abs() < 1e-14);
        }
        assert_eq!(a.apply(&GridFunction::zeros(g, 1)).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn constant_fredholm_on_linear_input() {
        let g = unit(1001);
        let a = KernelOperator::scalar(OperatorKind::Fredholm, g.clone(), 1, |_, _| 0.3).unwrap();
        let u = GridFunction::scalar_fn(g.clone(), |t| t[0]).unwrap();
        let au = a.apply(&u).unwrap();
        for k in 0..g.len() {
            assert!((au.at(k) - 0.15).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_check_examples() {
        let g = unit(51);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 1.0)
            .unwrap()
            .with_lipschitz(1.0)
            .unwrap();
        let r = a.volterra_constant_check(10, &mut rng).unwrap();
        assert!(r.holds && r.worst_ratio <= 1.0 + 1e-12);

        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 2.0)
            .unwrap()
            .with_lipschitz(1.0)
            .unwrap();
        let r = a.volterra_constant_check(0, &mut rng).unwrap();
        assert!(!r.holds);
        assert!((r.worst_ratio - 2.0).abs() < 1e-12);

        let a = KernelOperator::scalar(OperatorKind::Volterra, g, 1, |t, s| (t[0] - s[0]).exp())
            .unwrap()
            .with_lipschitz(1f64.exp())
            .unwrap();
        assert!(a.volterra_constant_check(10, &mut rng).unwrap().holds);
    }

    #[test]
    fn adjoint_of_volterra_identity() {
        let g = unit(1001);
        let a = KernelOperator::scalar(OperatorKind::Volterra, g.clone(), 1, |_, _| 1.0).unwrap();
        let aw = a.adjoint_apply(&GridFunction::constant(g.clone(), &[1.0]).unwrap()).unwrap();
        let h = g.spacing(0);
        for k in 1..g.len() - 1 {
            assert!((aw.at(k) - (1.0 - g.time(k))).abs() < 1e-6);
        }
        // the trapezoid end weights shift the two end values by h/2
        assert!((aw.at(0) - 1.0).abs() <= h);
        assert!(aw.at(g.len() - 1).abs() <= h);
        assert_eq!(a.adjoint_apply(&GridFunction::zeros(g, 1)).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn contraction_factor_examples() {
        let g = unit(11);
        let a = KernelOperator::scalar(OperatorKind::Fredholm, g.clone(), 1, |_, _| 0.5).unwrap();
        let zero = GridFunction::zeros(g.clone(), 1);
        assert_eq!(a.fredholm_contraction_factor(&zero, 1.0).unwrap(), 0.0);
        let one = GridFunction::constant(g.clone(), &[1.0]).unwrap();
        assert!((a.fredholm_contraction_factor(&one, 1.0).unwrap() - 0.5).abs() < 1e-14);
        let b = KernelOperator::scalar(OperatorKind::Fredholm, g.clone(), 1, |_, _| 1.0).unwrap();
        let two = GridFunction::constant(g, &[2.0]).unwrap();
        assert!((b.fredholm_contraction_factor(&two, 2.0).unwrap() - 2.0).abs() < 1e-14);
        assert!(b.fredholm_contraction_factor(&two, 0.5).is_err());
    }

    #[test]
    fn declared_norm_overrides_smaller_estimate() {
        let g = unit(11);
        let a = KernelOperator::scalar(OperatorKind::Fredholm, g, 1, |_, _| 0.25)
            .unwrap()
            .with_declared_opnorm(0.4)
            .unwrap();
        assert_eq!(a.opnorm(2.0).unwrap(), 0.4);
        assert!((a.computed_opnorm(2.0).unwrap() - 0.25).abs() < 1e-14);
    }

    #[test]
    fn matrix_kernel_and_table() {
        let g = unit(5);
        let a = KernelOperator::new(OperatorKind::Fredholm, g.clone(), 2, |_, _| vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let u = GridFunction::constant(g.clone(), &[1.0, 2.0]).unwrap();
        let au = a.apply(&u).unwrap();
        assert!((au.value(3)[0] - 2.0).abs() < 1e-14 && (au.value(3)[1] - 1.0).abs() < 1e-14);
        let table = vec![vec![0.5; 5]; 5];
        let t = KernelOperator::from_table(OperatorKind::Fredholm, g.clone(), 1, &table).unwrap();
        let one = GridFunction::constant(g, &[1.0]).unwrap();
        assert!((t.apply(&one).unwrap().at(2) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn volterra_rejects_box_grid() {
        let b = Arc::new(Grid::box_domain(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 3]).unwrap());
        assert!(KernelOperator::scalar(OperatorKind::Volterra, b, 1, |_, _| 1.0).is_err());
    }
}

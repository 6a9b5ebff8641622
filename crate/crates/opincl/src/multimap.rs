//! Set-valued maps (t, x) -> compact set with a declared Lipschitz modulus.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::gridfn::{Grid, GridFunction};
use crate::setval::{hausdorff, minkowski_shift, CompactSet};

pub type SetEval = dyn Fn(&[f64], &[f64]) -> Result<CompactSet> + Send + Sync;

/// F(t, x) together with M(t), the Hausdorff-Lipschitz modulus in x.
#[derive(Clone)]
pub struct MultiMap {
    eval: Arc<SetEval>,
    modulus: GridFunction,
    domain_dim: usize,
    range_dim: usize,
    shift: Option<GridFunction>,
}

impl fmt::Debug for MultiMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultiMap")
            .field("domain_dim", &self.domain_dim)
            .field("range_dim", &self.range_dim)
            .field("shifted", &self.shift.is_some())
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    pub holds: bool,
    /// Largest observed rho(F(t,x), F(t,x1)) / (M(t) |x - x1|).
    pub worst_ratio: f64,
}

impl MultiMap {
    pub fn new(
        domain_dim: usize,
        range_dim: usize,
        modulus: GridFunction,
        eval: impl Fn(&[f64], &[f64]) -> Result<CompactSet> + Send + Sync + 'static,
    ) -> Result<Self> {
        if modulus.codim() != 1 {
            return Err(Error::Input("Lipschitz modulus must be scalar".into()));
        }
        if modulus.values().iter().any(|m| *m < 0.0) {
            return Err(Error::Input("Lipschitz modulus must be nonnegative".into()));
        }
        Ok(MultiMap { eval: Arc::new(eval), modulus, domain_dim, range_dim, shift: None })
    }

    /// F(t, x) = {slope * x + offset}, modulus max(|slope|, `modulus_floor`).
    pub fn affine(grid: Arc<Grid>, slope: f64, offset: Vec<f64>, modulus_floor: f64) -> Result<Self> {
        let n = offset.len();
        let m = GridFunction::constant(grid, &[slope.abs().max(modulus_floor)])?;
        MultiMap::new(n, n, m, move |_t, x| {
            CompactSet::singleton(x.iter().zip(&offset).map(|(xi, o)| slope * xi + o).collect())
        })
    }

    /// F(t, x) = {slope * x + g(t)} for a time-dependent offset sampled on the grid.
    pub fn affine_with_offset(slope: f64, offset: GridFunction, modulus_floor: f64) -> Result<Self> {
        let n = offset.codim();
        let m = GridFunction::constant(offset.grid().clone(), &[slope.abs().max(modulus_floor)])?;
        let g = offset.clone();
        MultiMap::new(n, n, m, move |t, x| {
            let o = g.interpolate(t)?;
            CompactSet::singleton(x.iter().zip(&o).map(|(xi, oi)| slope * xi + oi).collect())
        })
    }

    /// A map that ignores x, with the given (positive) declared modulus.
    pub fn constant(grid: Arc<Grid>, domain_dim: usize, set: CompactSet, modulus: f64) -> Result<Self> {
        let m = GridFunction::constant(grid, &[modulus])?;
        MultiMap::new(domain_dim, set.dim(), m, move |_t, _x| Ok(set.clone()))
    }

    /// 2-D polygonal ball of fixed radius around slope * x + offset.
    pub fn affine_ball(grid: Arc<Grid>, slope: f64, offset: Vec<f64>, radius: f64, vertices: usize) -> Result<Self> {
        if offset.len() != 2 {
            return Err(Error::Input("affine ball map is two-dimensional".into()));
        }
        let m = GridFunction::constant(grid, &[slope.abs()])?;
        MultiMap::new(2, 2, m, move |_t, x| {
            let c = [slope * x[0] + offset[0], slope * x[1] + offset[1]];
            CompactSet::polygon_ball(&c, radius, vertices)
        })
    }

    pub fn domain_dim(&self) -> usize {
        self.domain_dim
    }

    pub fn range_dim(&self) -> usize {
        self.range_dim
    }

    pub fn modulus(&self) -> &GridFunction {
        &self.modulus
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.modulus.grid()
    }

    /// F(t, x) at arbitrary coordinates `t` (no perturbation shift applied).
    pub fn eval(&self, t: &[f64], x: &[f64]) -> Result<CompactSet> {
        check_dim(self.domain_dim, x.len())?;
        let set = (self.eval)(t, x)?;
        check_dim(self.range_dim, set.dim())?;
        Ok(set)
    }

    /// F(t_k, x) + s(t_k) at grid node `k`.
    pub fn eval_node(&self, k: usize, x: &[f64]) -> Result<CompactSet> {
        let t = self.grid().coords(k);
        let set = self.eval(&t, x).map_err(|e| match e {
            Error::Evaluation { message, .. } => Error::Evaluation { at: format!("node {k}"), message },
            Error::Input(message) => Error::Evaluation { at: format!("node {k}"), message },
            other => other,
        })?;
        match &self.shift {
            Some(s) => minkowski_shift(&set, s.value(k)),
            None => Ok(set),
        }
    }

    /// The perturbed map F(t, x) + s(t).
    pub fn shifted(&self, s: &GridFunction) -> Result<MultiMap> {
        check_dim(self.range_dim, s.codim())?;
        if !s.same_grid(&self.modulus) {
            return Err(Error::Input("perturbation lives on a different grid".into()));
        }
        let total = match &self.shift {
            Some(prev) => prev.add(s)?,
            None => s.clone(),
        };
        Ok(MultiMap { shift: Some(total), ..self.clone() })
    }

    /// Sampled check of rho(F(t,x), F(t,x1)) <= M(t)|x - x1| (1 + 1e-8).
    pub fn lipschitz_check<R: Rng>(&self, probes: usize, scale: f64, rng: &mut R) -> Result<LipschitzReport> {
        let grid = self.grid().clone();
        let mut worst: f64 = 0.0;
        let mut holds = true;
        for _ in 0..probes {
            let k = rng.random_range(0..grid.len());
            let x: Vec<f64> = (0..self.domain_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let x1: Vec<f64> = (0..self.domain_dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let dx = crate::setval::dist_sq(&x, &x1).sqrt();
            if dx == 0.0 {
                continue;
            }
            let rho = hausdorff(&self.eval_node(k, &x)?, &self.eval_node(k, &x1)?)?;
            let m = self.modulus.at(k);
            if rho > m * dx * (1.0 + 1e-8) + 1e-14 {
                holds = false;
            }
            let ratio = if m > 0.0 { rho / (m * dx) } else if rho > 0.0 { f64::INFINITY } else { 0.0 };
            worst = worst.max(ratio);
        }
        Ok(LipschitzReport { holds, worst_ratio: worst })
    }
}

//! Uniform grids and vector-valued functions sampled on them.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::multimap::MultiMap;
use crate::setval::dist_to_set;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    Interval,
    Box,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    kind: GridKind,
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: Vec<usize>,
    weights: Vec<f64>,
}

impl Grid {
    pub fn interval(t0: f64, t1: f64, nodes: usize) -> Result<Self> {
        Grid::build(GridKind::Interval, vec![t0], vec![t1], vec![nodes])
    }

    pub fn box_domain(lower: Vec<f64>, upper: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        Grid::build(GridKind::Box, lower, upper, nodes)
    }

    fn build(kind: GridKind, lower: Vec<f64>, upper: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != nodes.len() {
            return Err(Error::Input("grid bounds and node counts must have one entry per axis".into()));
        }
        for ((lo, hi), n) in lower.iter().zip(&upper).zip(&nodes) {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Input(format!("grid axis needs finite lower < upper, got [{lo}, {hi}]")));
            }
            if *n < 2 {
                return Err(Error::Input("grid axis needs at least 2 nodes".into()));
            }
        }
        let axis_weights: Vec<Vec<f64>> = lower
            .iter()
            .zip(&upper)
            .zip(&nodes)
            .map(|((lo, hi), n)| {
                let h = (hi - lo) / (*n - 1) as f64;
                (0..*n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
            })
            .collect();
        let total: usize = nodes.iter().product();
        let mut weights = vec![1.0; total];
        for (k, w) in weights.iter_mut().enumerate() {
            for (axis, idx) in unravel(&nodes, k).into_iter().enumerate() {
                *w *= axis_weights[axis][idx];
            }
        }
        Ok(Grid { kind, lower, upper, nodes, weights })
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn axes(&self) -> usize {
        self.nodes.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.nodes[axis] - 1) as f64
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.axes()).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    /// Trapezoid weights, one per node (tensor product on boxes).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn measure(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).product()
    }

    /// Multi-index of node `k`; the last axis varies fastest.
    pub fn multi_index(&self, k: usize) -> Vec<usize> {
        unravel(&self.nodes, k)
    }

    pub fn coords(&self, k: usize) -> Vec<f64> {
        self.multi_index(k)
            .into_iter()
            .enumerate()
            .map(|(a, i)| self.axis_coord(a, i))
            .collect()
    }

    fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        let s = i as f64 / (self.nodes[axis] - 1) as f64;
        self.lower[axis] * (1.0 - s) + self.upper[axis] * s
    }

    /// First coordinate of node `k`; the time value on interval grids.
    pub fn time(&self, k: usize) -> f64 {
        self.coords(k)[0]
    }

    /// Same grid with the node count per axis doubled minus one, so every old
    /// node is kept and the spacing halves.
    pub fn refined(&self) -> Grid {
        let nodes = self.nodes.iter().map(|n| 2 * n - 1).collect();
        Grid::build(self.kind, self.lower.clone(), self.upper.clone(), nodes).expect("refinement of a valid grid")
    }
}

fn unravel(nodes: &[usize], mut k: usize) -> Vec<usize> {
    let mut idx = vec![0; nodes.len()];
    for a in (0..nodes.len()).rev() {
        idx[a] = k % nodes[a];
        k /= nodes[a];
    }
    idx
}

/// A vector-valued function sampled on every node of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: Arc<Grid>,
    codim: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, codim: usize, values: Vec<f64>) -> Result<Self> {
        if codim == 0 {
            return Err(Error::Input("grid function needs at least one component".into()));
        }
        check_dim(grid.len() * codim, values.len())?;
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value at node {}", k / codim)));
        }
        Ok(GridFunction { grid, codim, values })
    }

    pub fn from_fn(grid: Arc<Grid>, codim: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len() * codim);
        for k in 0..grid.len() {
            let v = f(&grid.coords(k));
            check_dim(codim, v.len())?;
            values.extend(v);
        }
        GridFunction::new(grid, codim, values)
    }

    pub fn scalar_fn(grid: Arc<Grid>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        GridFunction::from_fn(grid, 1, |t| vec![f(t)])
    }

    pub fn constant(grid: Arc<Grid>, value: &[f64]) -> Result<Self> {
        let n = grid.len();
        GridFunction::new(grid, value.len(), value.repeat(n))
    }

    pub fn zeros(grid: Arc<Grid>, codim: usize) -> Self {
        let n = grid.len();
        GridFunction { grid, codim, values: vec![0.0; n * codim] }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn codim(&self) -> usize {
        self.codim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.codim..(k + 1) * self.codim]
    }

    /// Scalar value at node `k`; panics unless `codim == 1`.
    pub fn at(&self, k: usize) -> f64 {
        assert_eq!(self.codim, 1, "scalar access on a vector-valued grid function");
        self.values[k]
    }

    pub fn same_grid(&self, other: &GridFunction) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub(crate) fn require_compatible(&self, other: &GridFunction) -> Result<()> {
        if !self.same_grid(other) {
            return Err(Error::Input("grid functions live on different grids".into()));
        }
        check_dim(self.codim, other.codim)
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            codim: self.codim,
            values: self.values.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        self.require_compatible(other)?;
        Ok(GridFunction {
            grid: self.grid.clone(),
            codim: self.codim,
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        self.map_values(|v| c * v)
    }

    /// Pointwise Euclidean magnitude as a scalar grid function.
    pub fn magnitude(&self) -> GridFunction {
        let values = self.values.chunks(self.codim).map(crate::setval::norm).collect();
        GridFunction { grid: self.grid.clone(), codim: 1, values }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.chunks(self.codim).map(crate::setval::norm).fold(0.0, f64::max)
    }

    /// (integral of |f|^p)^(1/p) by the trapezoid rule; `f64::INFINITY`
    /// selects the maximum node magnitude.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::Input(format!("norm exponent must be >= 1 or infinity, got {p}")));
        }
        if p.is_infinite() {
            return Ok(self.sup_norm());
        }
        let w = self.grid.weights();
        let mags = self.values.chunks(self.codim).map(crate::setval::norm);
        if p == 1.0 {
            return Ok(mags.zip(w).map(|(m, w)| w * m).sum());
        }
        // scale by the max magnitude to keep |f|^p representable
        let scale = self.sup_norm();
        if scale == 0.0 {
            return Ok(0.0);
        }
        let s: f64 = mags.zip(w).map(|(m, w)| w * (m / scale).powf(p)).sum();
        Ok(scale * s.powf(1.0 / p))
    }

    /// Componentwise trapezoid integral over the whole domain.
    pub fn integral(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.codim];
        for (chunk, w) in self.values.chunks(self.codim).zip(self.grid.weights()) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += w * v;
            }
        }
        out
    }

    /// Quadrature inner product sum_k w_k <f(t_k), g(t_k)>.
    pub fn inner(&self, other: &GridFunction) -> Result<f64> {
        self.require_compatible(other)?;
        Ok(self
            .values
            .chunks(self.codim)
            .zip(other.values.chunks(self.codim))
            .zip(self.grid.weights())
            .map(|((a, b), w)| w * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum())
    }

    /// Trapezoid integral from the left end to each node; node 0 holds 0.
    pub fn cumulative_integral(&self) -> Result<GridFunction> {
        if self.grid.kind() != GridKind::Interval {
            return Err(Error::Unsupported("cumulative integral needs an interval grid".into()));
        }
        let h = self.grid.spacing(0);
        let c = self.codim;
        let mut values = vec![0.0; self.values.len()];
        for k in 1..self.len() {
            for j in 0..c {
                values[k * c + j] = values[(k - 1) * c + j] + 0.5 * h * (self.values[(k - 1) * c + j] + self.values[k * c + j]);
            }
        }
        Ok(GridFunction { grid: self.grid.clone(), codim: c, values })
    }

    /// Linear (multilinear on boxes) interpolation at an arbitrary point,
    /// clamped to the domain.
    pub fn interpolate(&self, at: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.grid.axes(), at.len())?;
        let g = &self.grid;
        let mut base = Vec::with_capacity(g.axes());
        let mut frac = Vec::with_capacity(g.axes());
        for a in 0..g.axes() {
            let s = ((at[a] - g.lower[a]) / g.spacing(a)).clamp(0.0, (g.nodes[a] - 1) as f64);
            let i = (s.floor() as usize).min(g.nodes[a] - 2);
            base.push(i);
            frac.push(s - i as f64);
        }
        let mut out = vec![0.0; self.codim];
        for corner in 0..(1usize << g.axes()) {
            let mut weight = 1.0;
            let mut k = 0;
            for a in 0..g.axes() {
                let bit = (corner >> a) & 1;
                weight *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                k = k * g.nodes[a] + base[a] + bit;
            }
            if weight != 0.0 {
                for (o, v) in out.iter_mut().zip(self.value(k)) {
                    *o += weight * v;
                }
            }
        }
        Ok(out)
    }

    /// Resample onto another grid by interpolation.
    pub fn resample(&self, grid: Arc<Grid>) -> Result<GridFunction> {
        let mut values = Vec::with_capacity(grid.len() * self.codim);
        for k in 0..grid.len() {
            values.extend(self.interpolate(&grid.coords(k))?);
        }
        GridFunction::new(grid, self.codim, values)
    }

    /// CSV with one row per node: coordinates, then value components.
    pub fn write_csv<W: Write>(&self, out: W, coord_names: &[&str], value_names: &[&str]) -> Result<()> {
        write_columns_csv(out, &self.grid, coord_names, &[(value_names, self)])
    }

    pub fn read_csv<R: Read>(input: R, grid: Arc<Grid>, codim: usize) -> Result<GridFunction> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let axes = grid.axes();
        let mut values = Vec::with_capacity(grid.len() * codim);
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Input(format!("csv row {row}: {e}")))?;
            if rec.len() != axes + codim {
                return Err(Error::Input(format!("csv row {row}: expected {} columns, found {}", axes + codim, rec.len())));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Input(format!("csv row {row}: {e}")));
            if row >= grid.len() {
                return Err(Error::Input("csv has more rows than grid nodes".into()));
            }
            let coords = grid.coords(row);
            for a in 0..axes {
                let c = parse(&rec[a])?;
                if (c - coords[a]).abs() > 1e-9 * (1.0 + coords[a].abs()) {
                    return Err(Error::Input(format!("csv row {row}: coordinate {c} does not match grid node {}", coords[a])));
                }
            }
            for j in 0..codim {
                values.push(parse(&rec[axes + j])?);
            }
        }
        GridFunction::new(grid, codim, values)
    }
}

/// Write several grid functions sharing one grid as side-by-side columns.
pub fn write_columns_csv<W: Write>(
    out: W,
    grid: &Grid,
    coord_names: &[&str],
    columns: &[(&[&str], &GridFunction)],
) -> Result<()> {
    let io = |e: csv::Error| Error::Input(format!("csv write: {e}"));
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..grid.axes())
        .map(|a| coord_names.get(a).map_or_else(|| format!("t{a}"), |s| s.to_string()))
        .collect();
    for (names, f) in columns {
        if f.grid().as_ref() != grid {
            return Err(Error::Input("csv columns must share the grid".into()));
        }
        for j in 0..f.codim() {
            header.push(names.get(j).map_or_else(|| format!("v{j}"), |s| s.to_string()));
        }
    }
    w.write_record(&header).map_err(io)?;
    for k in 0..grid.len() {
        let mut row: Vec<String> = grid.coords(k).iter().map(|c| c.to_string()).collect();
        for (_, f) in columns {
            row.extend(f.value(k).iter().map(|v| v.to_string()));
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Input(format!("csv write: {e}")))?;
    Ok(())
}

/// Residual rho(t_k) = d(u(t_k), F(t_k, x(t_k))) as a scalar grid function.
pub fn defect(u: &GridFunction, x: &GridFunction, map: &MultiMap) -> Result<GridFunction> {
    if !u.same_grid(x) {
        return Err(Error::Input("u and x live on different grids".into()));
    }
    check_dim(map.range_dim(), u.codim())?;
    check_dim(map.domain_dim(), x.codim())?;
    let grid = u.grid().clone();
    let mut values = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        let set = map.eval_node(k, x.value(k))?;
        values.push(dist_to_set(u.value(k), &set)?.distance);
    }
    GridFunction::new(grid, 1, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::interval(0.0, 1.0, n).unwrap())
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::interval(0.0, 1.0, 1).is_err());
        assert!(Grid::interval(1.0, 0.0, 5).is_err());
        assert!(Grid::box_domain(vec![0.0], vec![1.0, 1.0], vec![3]).is_err());
    }

    #[test]
    fn weights_integrate_measure() {
        let g = Grid::box_domain(vec![0.0, -1.0], vec![2.0, 1.0], vec![5, 7]).unwrap();
        let total: f64 = g.weights().iter().sum();
        assert!((total - 4.0).abs() < 1e-14);
        assert_eq!(g.coords(0), vec![0.0, -1.0]);
        assert_eq!(g.coords(g.len() - 1), vec![2.0, 1.0]);
        assert_eq!(g.multi_index(8), vec![1, 1]);
    }

    #[test]
    fn lp_norm_examples() {
        let g = unit(11);
        let one = GridFunction::constant(g.clone(), &[1.0]).unwrap();
        assert!((one.lp_norm(1.0).unwrap() - 1.0).abs() < 1e-15);
        let zero = GridFunction::zeros(g.clone(), 2);
        for p in [1.0, 2.0, 3.5, f64::INFINITY] {
            assert_eq!(zero.lp_norm(p).unwrap(), 0.0);
        }
        let t = GridFunction::scalar_fn(unit(1001), |c| c[0]).unwrap();
        assert!((t.lp_norm(2.0).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-6);
        assert!(matches!(t.lp_norm(0.5), Err(Error::Input(_))));
        assert_eq!(t.lp_norm(f64::INFINITY).unwrap(), 1.0);
    }

    #[test]
    fn cumulative_integral_examples() {
        let g = unit(11);
        let one = GridFunction::constant(g.clone(), &[1.0]).unwrap();
        let c = one.cumulative_integral().unwrap();
        for k in 0..g.len() {
            assert!((c.at(k) - g.time(k)).abs() < 1e-15);
        }
        let g = unit(1001);
        let two_t = GridFunction::scalar_fn(g.clone(), |c| 2.0 * c[0]).unwrap();
        let c = two_t.cumulative_integral().unwrap();
        for k in 0..g.len() {
            assert!((c.at(k) - g.time(k).powi(2)).abs() < 1e-6);
        }
        let b = Arc::new(Grid::box_domain(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 3]).unwrap());
        assert!(matches!(GridFunction::zeros(b, 1).cumulative_integral(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn interpolation_is_exact_for_affine_data() {
        let g = Arc::new(Grid::box_domain(vec![0.0, 0.0], vec![1.0, 2.0], vec![4, 5]).unwrap());
        let f = GridFunction::from_fn(g, 2, |c| vec![1.0 + 2.0 * c[0] - c[1], c[0] * 0.5]).unwrap();
        let v = f.interpolate(&[0.37, 1.21]).unwrap();
        assert!((v[0] - (1.0 + 0.74 - 1.21)).abs() < 1e-14);
        assert!((v[1] - 0.185).abs() < 1e-14);
    }

    #[test]
    fn csv_round_trip() {
        let g = unit(6);
        let f = GridFunction::from_fn(g.clone(), 2, |c| vec![c[0].sin(), 1.0 / 3.0]).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf, &["t"], &["a", "b"]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,a,b\n0,0,0.3333333333333333\n"));
        let back = GridFunction::read_csv(buf.as_slice(), g, 2).unwrap();
        assert_eq!(back, f);
    }
}

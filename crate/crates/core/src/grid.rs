//! Uniform lattices on a truncated box, sampled fields and payoffs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

pub const MIN_NODES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Second differences vanish on the boundary; drift is only kept where
    /// its upwind neighbour lies inside the box.
    #[default]
    ZeroSecondDifference,
}

/// Uniform tensor lattice. Nodes are stored with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    nx: Vec<usize>,
    dx: Vec<f64>,
    #[serde(default)]
    pub boundary: BoundaryPolicy,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, nx: Vec<usize>) -> Result<Self> {
        let d = lo.len();
        if d == 0 || hi.len() != d || nx.len() != d {
            return Err(Error::invalid("grid: lo, hi and nx must have the same non-zero length"));
        }
        for k in 0..d {
            if !(lo[k].is_finite() && hi[k].is_finite() && lo[k] < hi[k]) {
                return Err(Error::invalid(format!("grid: empty interval on axis {k}")));
            }
            if nx[k] < MIN_NODES {
                return Err(Error::invalid(format!(
                    "grid: axis {k} has {} nodes, need at least {MIN_NODES}",
                    nx[k]
                )));
            }
        }
        let dx = (0..d).map(|k| (hi[k] - lo[k]) / (nx[k] - 1) as f64).collect();
        Ok(Grid {
            lo,
            hi,
            nx,
            dx,
            boundary: BoundaryPolicy::default(),
        })
    }

    pub fn uniform_1d(lo: f64, hi: f64, nx: usize) -> Result<Self> {
        Grid::new(vec![lo], vec![hi], vec![nx])
    }

    /// Lattice with spacing `dx` on every axis whose nodes include `center`
    /// and which covers `center ± radius`.
    pub fn centered(center: &[f64], radius: &[f64], dx: f64) -> Result<Self> {
        if center.len() != radius.len() || !(dx > 0.0) {
            return Err(Error::invalid("centered grid: bad arguments"));
        }
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut nx = Vec::new();
        for (&c, &r) in center.iter().zip(radius) {
            let n = ((r / dx).ceil() as usize).max((MIN_NODES - 1) / 2 + 1);
            lo.push(c - n as f64 * dx);
            hi.push(c + n as f64 * dx);
            nx.push(2 * n + 1);
        }
        Grid::new(lo, hi, nx)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.nx.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn nx(&self) -> &[usize] {
        &self.nx
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn min_dx(&self) -> f64 {
        self.dx.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.nx[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + i as f64 * self.dx[axis]
        }
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.nx[axis]).map(|i| self.coord(axis, i)).collect()
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.nx[axis + 1..].iter().product()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            out[k] = idx % self.nx[k];
            idx /= self.nx[k];
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.nx)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(k, &i)| self.coord(k, i))
            .collect()
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        self.multi_index(idx)
            .iter()
            .zip(&self.nx)
            .any(|(&i, &n)| i == 0 || i + 1 == n)
    }

    /// Index of the node nearest to `x` on one axis, clamped to the box.
    pub fn nearest(&self, axis: usize, x: f64) -> usize {
        let t = ((x - self.lo[axis]) / self.dx[axis]).round();
        t.clamp(0.0, (self.nx[axis] - 1) as f64) as usize
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .enumerate()
                .all(|(k, &v)| v >= self.lo[k] - 1e-12 && v <= self.hi[k] + 1e-12)
    }

    /// Same box with `(nx − 1) * factor + 1` nodes per axis.
    pub fn refined(&self, factor: usize) -> Grid {
        let nx = self.nx.iter().map(|n| (n - 1) * factor.max(1) + 1).collect();
        Grid::new(self.lo.clone(), self.hi.clone(), nx).expect("refining a valid grid")
    }

    /// Same box with spacing scaled by `scale` (> 1 refines).
    pub fn scaled(&self, scale: f64) -> Result<Grid> {
        if !(scale > 0.0) {
            return Err(Error::invalid("grid scale must be positive"));
        }
        let nx = self
            .nx
            .iter()
            .map(|&n| (((n - 1) as f64 * scale).round() as usize).max(MIN_NODES - 1) + 1)
            .collect();
        Grid::new(self.lo.clone(), self.hi.clone(), nx)
    }

    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(&self.node(i))).collect()
    }

    /// Radius `|x₀| + sup|b| T + 6 (max tr a · T)^{1/2}` that keeps boundary
    /// effects below interior scheme error for payoffs of moderate growth.
    pub fn truncation_radius(x0_norm: f64, max_drift: f64, max_trace: f64, horizon: f64) -> f64 {
        x0_norm + max_drift * horizon + 6.0 * (max_trace * horizon).sqrt()
    }
}

/// Axis-aligned box used to restrict residual measurements to the interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Window {
    /// The central half of the grid box.
    pub fn central_half(grid: &Grid) -> Window {
        let (lo, hi) = grid
            .lo()
            .iter()
            .zip(grid.hi())
            .map(|(&l, &h)| {
                let c = 0.5 * (l + h);
                let r = 0.25 * (h - l);
                (c - r, c + r)
            })
            .unzip();
        Window { lo, hi }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, &v)| v >= self.lo[k] - 1e-12 && v <= self.hi[k] + 1e-12)
    }

    pub fn node_indices(&self, grid: &Grid) -> Vec<usize> {
        (0..grid.len())
            .filter(|&i| self.contains(&grid.node(i)))
            .collect()
    }
}

/// One time slice of a function sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub t: f64,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>, t: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("field: value count does not match grid"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("field: non-finite value"));
        }
        Ok(Field { grid, values, t })
    }

    pub fn at_node(&self, multi: &[usize]) -> f64 {
        self.values[self.grid.flat_index(multi)]
    }

    /// Multilinear interpolation, clamped to the box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        interpolate_multilinear(&self.grid, &self.values, x)
    }

    /// Header `x,u` in one dimension, `x1,…,xd,u` otherwise; one row per
    /// node, last axis fastest.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let d = self.grid.dim();
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = if d == 1 {
            vec!["x".into()]
        } else {
            (1..=d).map(|i| format!("x{i}")).collect()
        };
        header.push("u".into());
        out.write_record(&header)?;
        for (i, v) in self.values.iter().enumerate() {
            let mut row: Vec<String> = self.grid.node(i).iter().map(|x| format!("{x:e}")).collect();
            row.push(format!("{v:e}"));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn interpolate_multilinear(grid: &Grid, values: &[f64], x: &[f64]) -> f64 {
    let d = grid.dim();
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for k in 0..d {
        let n = grid.nx()[k];
        let t = ((x[k] - grid.lo()[k]) / grid.dx()[k]).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n - 2);
        base[k] = i;
        frac[k] = t - i as f64;
    }
    let mut acc = 0.0;
    let mut idx = vec![0usize; d];
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        for k in 0..d {
            let up = (corner >> k) & 1 == 1;
            idx[k] = base[k] + usize::from(up);
            w *= if up { frac[k] } else { 1.0 - frac[k] };
        }
        if w != 0.0 {
            acc += w * values[grid.flat_index(&idx)];
        }
    }
    acc
}

/// Initial datum `φ` with optional analytic derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoff {
    pub expr: Expr,
    arity: usize,
    grad: Option<Vec<Expr>>,
    hess: Option<Vec<Expr>>,
    /// Declared polynomial growth degree; not verified.
    pub growth: u32,
}

impl Payoff {
    pub fn new(expr: Expr, arity: usize) -> Result<Self> {
        if expr.arity() > arity {
            return Err(Error::invalid(format!(
                "payoff references variable {} but only {arity} are available",
                expr.arity()
            )));
        }
        let grad: Option<Vec<Expr>> = (0..arity).map(|i| expr.derivative(i)).collect();
        let hess = grad.as_ref().and_then(|g| {
            let mut h = Vec::with_capacity(arity * arity);
            for gi in g {
                for j in 0..arity {
                    h.push(gi.derivative(j)?);
                }
            }
            Some(h)
        });
        Ok(Payoff {
            expr,
            arity,
            grad,
            hess,
            growth: 2,
        })
    }

    pub fn parse(src: &str, arity: usize) -> Result<Self> {
        Payoff::new(Expr::parse(src)?, arity)
    }

    pub fn with_growth(mut self, degree: u32) -> Self {
        self.growth = degree;
        self
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn has_analytic_derivatives(&self) -> bool {
        self.hess.is_some()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.expr.eval(x)
    }

    /// Gradient; falls back to central differences with step `h`, in which
    /// case the second component is `true`.
    pub fn gradient(&self, x: &[f64], h: f64) -> (Vec<f64>, bool) {
        if let Some(g) = &self.grad {
            return (g.iter().map(|e| e.eval(x)).collect(), false);
        }
        let mut y = x.to_vec();
        let out = (0..self.arity)
            .map(|i| {
                y[i] = x[i] + h;
                let up = self.value(&y);
                y[i] = x[i] - h;
                let dn = self.value(&y);
                y[i] = x[i];
                (up - dn) / (2.0 * h)
            })
            .collect();
        (out, true)
    }

    /// Row-major Hessian; central differences when not analytic.
    pub fn hessian(&self, x: &[f64], h: f64) -> (Vec<f64>, bool) {
        if let Some(hs) = &self.hess {
            return (hs.iter().map(|e| e.eval(x)).collect(), false);
        }
        let n = self.arity;
        let mut out = vec![0.0; n * n];
        let mut y = x.to_vec();
        let f0 = self.value(x);
        for i in 0..n {
            for j in 0..n {
                let v = if i == j {
                    y[i] = x[i] + h;
                    let up = self.value(&y);
                    y[i] = x[i] - h;
                    let dn = self.value(&y);
                    y[i] = x[i];
                    (up - 2.0 * f0 + dn) / (h * h)
                } else {
                    let mut eval = |si: f64, sj: f64| {
                        y[i] = x[i] + si * h;
                        y[j] = x[j] + sj * h;
                        let v = self.value(&y);
                        y[i] = x[i];
                        y[j] = x[j];
                        v
                    };
                    (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                        / (4.0 * h * h)
                };
                out[i * n + j] = v;
            }
        }
        (out, true)
    }
}

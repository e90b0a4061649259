//! PDE-level martingale checks.
//!
//! `φ(Z_t) − ∫ G̃(Z, Dφ, D²φ)` is a martingale exactly when `φ` is a
//! stationary solution of `∂_τ w = G̃(z, Dw, D²w) − f` with
//! `f = G̃(z, Dφ, D²φ)`. The residual is the drift of the discrete solution
//! away from `φ` over a measurement window.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expectation::{expectation, CylinderFunctional, ExpectationOptions};
use crate::expr::{self, Expr};
use crate::generator::Generator;
use crate::grid::{Grid, Payoff, Window};
use crate::pde::{evolve, solve_cauchy, SchemeBudget, SchemePlan, SolveOptions};
use crate::report::ResidualReport;

/// Step for finite-difference derivatives of payoffs without analytic ones.
const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    Fixed(f64),
    /// `max(1e-9, 3 C (dx + dt))`.
    Budget(SchemeBudget),
    /// Budget whose constant is the residual of the same fixture on a grid
    /// with twice the spacing, divided by that grid's `dx + dt`.
    Calibrated,
}

#[derive(Clone)]
pub struct MartingaleFixture {
    pub name: String,
    pub generator: Arc<dyn Generator>,
    pub phi: Payoff,
    pub horizon: f64,
    pub grid: Grid,
    /// Nodes where the residual is measured.
    pub window: Window,
    pub tolerance: Tolerance,
}

impl std::fmt::Debug for MartingaleFixture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MartingaleFixture")
            .field("name", &self.name)
            .field("phi", &self.phi)
            .field("horizon", &self.horizon)
            .field("grid", &self.grid)
            .field("window", &self.window)
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

struct Raw {
    residual: f64,
    dx: f64,
    dt: f64,
    tainted: bool,
}

fn raw_residual(fx: &MartingaleFixture, grid: &Grid) -> Result<Raw> {
    let d = grid.dim();
    if fx.generator.dim() != d || fx.phi.arity() != d {
        return Err(Error::invalid("martingale fixture: dimension mismatch"));
    }
    if !(fx.horizon > 0.0) {
        return Err(Error::invalid("martingale fixture: horizon must be positive"));
    }
    let mut tainted = false;
    let mut neg_f = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let x = grid.node(i);
        let (g, tg) = fx.phi.gradient(&x, FD_STEP);
        let (h, th) = fx.phi.hessian(&x, FD_STEP);
        tainted |= tg || th;
        let f = fx.generator.evaluate_forms(
            &x,
            &DVector::from_vec(g),
            &DMatrix::from_row_slice(d, d, &h),
        );
        if !f.is_finite() {
            return Err(Error::NonFinite { step: 0 });
        }
        neg_f.push(-f);
    }
    let plan = SchemePlan::new(fx.generator.as_ref(), grid)?;
    let u0 = grid.sample(|x| fx.phi.value(x));
    let sol = evolve(&plan, u0.clone(), fx.horizon, Some(&neg_f), &SolveOptions::default())?;
    let nodes = fx.window.node_indices(grid);
    if nodes.is_empty() {
        return Err(Error::invalid("martingale fixture: window contains no nodes"));
    }
    let residual = nodes
        .iter()
        .map(|&i| (sol.terminal.values[i] - u0[i]).abs())
        .fold(0.0, f64::max);
    Ok(Raw {
        residual,
        dx: grid.min_dx(),
        dt: sol.dt,
        tainted,
    })
}

/// Sup over window nodes of `|w(t − s) − φ|`.
pub fn martingale_residual(fx: &MartingaleFixture) -> Result<ResidualReport> {
    let raw = raw_residual(fx, &fx.grid)?;
    let (tol, calibration) = match fx.tolerance {
        Tolerance::Fixed(t) => (t, None),
        Tolerance::Budget(b) => (b.tolerance(raw.dx, raw.dt), None),
        Tolerance::Calibrated => {
            let coarse = raw_residual(fx, &fx.grid.scaled(0.5)?)?;
            let c = coarse.residual / (coarse.dx + coarse.dt);
            (SchemeBudget::new(c).tolerance(raw.dx, raw.dt), Some(coarse.residual))
        }
    };
    let mut r = ResidualReport::new(fx.name.clone(), raw.residual, tol)
        .with_param("dx", raw.dx)
        .with_param("dt", raw.dt)
        .with_param("horizon", fx.horizon);
    if let Some(c) = calibration {
        r = r.with_param("coarse_residual", c);
    }
    if raw.tainted {
        r = r.with_note("derivatives of φ taken by finite differences");
    }
    Ok(r)
}

/// Residuals on `grid.refined(k)` for each factor, with successive ratios.
/// Passes when every ratio is at least `min_ratio`.
pub fn martingale_refinement(
    fx: &MartingaleFixture,
    factors: &[usize],
    min_ratio: f64,
) -> Result<ResidualReport> {
    if factors.len() < 2 {
        return Err(Error::invalid("refinement needs at least two factors"));
    }
    let mut raws = Vec::new();
    for &k in factors {
        raws.push(raw_residual(fx, &fx.grid.refined(k))?);
    }
    let ratios: Vec<f64> = raws
        .windows(2)
        .map(|w| w[0].residual / w[1].residual.max(f64::MIN_POSITIVE))
        .collect();
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let mut r = ResidualReport::predicate(format!("{}-refinement", fx.name), worst >= min_ratio)
        .with_param("min_ratio", min_ratio)
        .with_param("worst_ratio", worst);
    for (k, raw) in factors.iter().zip(&raws) {
        r = r.with_note(format!(
            "refine={k} dx={:e} dt={:e} residual={:e}",
            raw.dx, raw.dt, raw.residual
        ));
    }
    Ok(r)
}

/// `φ(Z_T) + Σ_{i<n} f(Z_{t_i}) Δt` with `t_i = iT/n` as a cylinder
/// functional of `(Z_{t₁}, …, Z_{t_n})`.
fn frozen_functional(
    phi: &Expr,
    f: &Expr,
    horizon: f64,
    x0: f64,
    n: usize,
) -> Result<CylinderFunctional> {
    let step = horizon / n as f64;
    let times: Vec<f64> = (1..=n).map(|i| i as f64 * step).collect();
    let mut e = phi.substitute(&[Expr::var(n - 1)]);
    let mut acc = Expr::constant(f.eval(&[x0]));
    for i in 1..n {
        acc = expr::add(acc, f.substitute(&[Expr::var(i - 1)]));
    }
    e = expr::add(e, expr::mul(Expr::constant(step), acc));
    CylinderFunctional::new(times, e, vec![x0])
}

/// Differences between the frozen-source expectation and the sourced PDE
/// value `u(T, x₀)` of `∂ₜu = G(Du, D²u) + f` for each partition size.
/// Passes when the sequence is non-increasing (slack `1e-9`).
pub fn frozen_source_convergence(
    gen: &dyn Generator,
    phi: &Expr,
    f: &Expr,
    horizon: f64,
    x0: f64,
    partitions: &[usize],
    opts: &ExpectationOptions,
) -> Result<(ResidualReport, Vec<f64>)> {
    if gen.dim() != 1 || phi.arity() > 1 || f.arity() > 1 {
        return Err(Error::invalid("frozen-source check runs in one dimension"));
    }
    if partitions.is_empty() || partitions.iter().any(|&n| n == 0 || n > 3) {
        return Err(Error::invalid("partition sizes must lie in 1..=3"));
    }
    let payoff = Payoff::new(phi.clone(), 1)?;
    let (tr, b) = crate::expectation::operator_bounds(gen, &[x0], 25.0);
    let radius = Grid::truncation_radius(x0.abs(), b, tr, horizon) + 4.0;
    let grid = Grid::centered(&[x0], &[radius], opts.dx)?;
    let fx = f.clone();
    let source = move |x: &[f64]| fx.eval(x);
    let pde = solve_cauchy(gen, &payoff, horizon, &grid, Some(&source), &SolveOptions::default())?
        .value_at(&[x0]);
    let mut diffs = Vec::new();
    for &n in partitions {
        let xi = frozen_functional(phi, f, horizon, x0, n)?;
        diffs.push((expectation(gen, &xi, opts)? - pde).abs());
    }
    let ok = diffs.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    let mut r = ResidualReport::predicate(format!("frozen-source(f={f})"), ok)
        .with_param("pde", pde)
        .with_param("x0", x0);
    for (n, v) in partitions.iter().zip(&diffs) {
        r = r.with_note(format!("n={n} difference={v:e}"));
    }
    Ok((r, diffs))
}

/// [`martingale_residual`] restricted to polynomial `φ` with analytic
/// derivatives; growth at infinity is handled by the grid truncation.
pub fn polynomial_extension_check(fx: &MartingaleFixture) -> Result<ResidualReport> {
    if !fx.phi.has_analytic_derivatives() {
        return Err(Error::invalid("polynomial check needs analytic derivatives"));
    }
    martingale_residual(fx)
}

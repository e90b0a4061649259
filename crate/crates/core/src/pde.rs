//! Explicit monotone finite-difference scheme for `∂ₜu = G(x, Du, D²u) + f(x)`.
//!
//! For every node and every control the linear operator
//! `½ Σ a_kk ∂²_k + Σ b_k ∂_k` is assembled as non-negative neighbour weights.
//! A first difference is taken central while that keeps both weights
//! non-negative (`|b_k| dx_k ≤ a_kk`) and upwind otherwise. One explicit step
//! then takes the sup / sup-inf / inf-sup of the per-control updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Combination, Generator};
use crate::grid::{Field, Grid, Payoff};
use crate::report::ResidualReport;

pub const CFL_SAFETY: f64 = 0.9;
const CHUNK: usize = 256;
const OFF_DIAGONAL_SLACK: f64 = 1e-14;

/// Neighbour weights of every control at every node.
#[derive(Debug, Clone)]
pub struct SchemePlan {
    grid: Grid,
    combination: Combination,
    n_controls: usize,
    /// `weights[(node * n_controls + c) * 2d + 2k + {0: down, 1: up}]`.
    weights: Vec<f64>,
    offsets: Vec<isize>,
    max_trace: f64,
    max_drift: f64,
}

impl SchemePlan {
    pub fn new(gen: &dyn Generator, grid: &Grid) -> Result<Self> {
        let d = grid.dim();
        if gen.dim() != d {
            return Err(Error::invalid(format!(
                "generator dimension {} does not match grid dimension {d}",
                gen.dim()
            )));
        }
        if d > 2 {
            return Err(Error::invalid("the solver supports d = 1 and d = 2"));
        }
        let nc = gen.n_controls();
        let n = grid.len();
        let mut weights = vec![0.0; n * nc * 2 * d];
        let mut max_trace = 0.0f64;
        let mut max_drift = 0.0f64;
        for node in 0..n {
            let x = grid.node(node);
            let multi = grid.multi_index(node);
            let controls = gen.controls_at(&x);
            if controls.len() != nc {
                return Err(Error::invalid("generator returned the wrong number of controls"));
            }
            for (c, cp) in controls.iter().enumerate() {
                for i in 0..d {
                    for j in 0..d {
                        if i != j && cp.a[(i, j)].abs() > OFF_DIAGONAL_SLACK {
                            return Err(Error::invalid(format!(
                                "cross-derivative coefficient {} at node {x:?} is not supported",
                                cp.a[(i, j)]
                            )));
                        }
                    }
                }
                if cp.a.iter().chain(cp.b.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("non-finite coefficient at node {x:?}")));
                }
                max_trace = max_trace.max(cp.a.trace());
                max_drift = max_drift.max(cp.b.iter().map(|v| v.abs()).sum());
                let base = (node * nc + c) * 2 * d;
                for k in 0..d {
                    let (a, b, h) = (cp.a[(k, k)].max(0.0), cp.b[k], grid.dx()[k]);
                    let i = multi[k];
                    let last = grid.nx()[k] - 1;
                    let (down, up) = if i == 0 {
                        (0.0, b.max(0.0) / h)
                    } else if i == last {
                        ((-b).max(0.0) / h, 0.0)
                    } else if b.abs() * h <= a {
                        let diff = 0.5 * a / (h * h);
                        (diff - 0.5 * b / h, diff + 0.5 * b / h)
                    } else {
                        let diff = 0.5 * a / (h * h);
                        (diff + (-b).max(0.0) / h, diff + b.max(0.0) / h)
                    };
                    weights[base + 2 * k] = down;
                    weights[base + 2 * k + 1] = up;
                }
            }
        }
        let offsets = (0..d)
            .flat_map(|k| {
                let s = grid.stride(k) as isize;
                [-s, s]
            })
            .collect();
        Ok(SchemePlan {
            grid: grid.clone(),
            combination: gen.combination(),
            n_controls: nc,
            weights,
            offsets,
            max_trace,
            max_drift,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `c · dx² / (d · max tr a + dx · max |b|₁)`, or `horizon` when the
    /// operator vanishes.
    pub fn cfl_dt(&self, horizon: f64) -> f64 {
        let dx = self.grid.min_dx();
        let d = self.grid.dim() as f64;
        let denom = d * self.max_trace + dx * self.max_drift;
        if denom <= 0.0 {
            horizon
        } else {
            CFL_SAFETY * dx * dx / denom
        }
    }

    fn is_trivial(&self) -> bool {
        self.max_trace == 0.0 && self.max_drift == 0.0
    }

    /// One explicit step `u + dt (G_h u + f)`.
    pub fn step(&self, u: &[f64], dt: f64, source: Option<&[f64]>, out: &mut [f64]) {
        let nc = self.n_controls;
        let nb = self.offsets.len();
        let comb = self.combination;
        out.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each_init(
                || vec![0.0; nc],
                |vals, (chunk, slice)| {
                    for (off, o) in slice.iter_mut().enumerate() {
                        let node = chunk * CHUNK + off;
                        let ui = u[node];
                        for (c, v) in vals.iter_mut().enumerate() {
                            let w = &self.weights[(node * nc + c) * nb..(node * nc + c + 1) * nb];
                            let mut acc = 0.0;
                            for (k, &wk) in w.iter().enumerate() {
                                if wk != 0.0 {
                                    let j = (node as isize + self.offsets[k]) as usize;
                                    acc += wk * (u[j] - ui);
                                }
                            }
                            *v = acc;
                        }
                        let g = comb.reduce(vals);
                        let f = source.map_or(0.0, |s| s[node]);
                        *o = ui + dt * (g + f);
                    }
                },
            );
    }
}

/// Time step bound of the explicit scheme for `gen` on `grid`.
pub fn cfl_timestep(gen: &dyn Generator, grid: &Grid, horizon: f64) -> Result<f64> {
    Ok(SchemePlan::new(gen, grid)?.cfl_dt(horizon))
}

#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    /// Requested time step; refused when above the CFL bound.
    pub dt: Option<f64>,
    /// Keep every k-th slice (plus the first and last) in the trajectory.
    pub retain_every: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub terminal: Field,
    /// Step actually used, `horizon / steps`.
    pub dt: f64,
    pub steps: usize,
    pub trajectory: Vec<Field>,
}

impl Solution {
    pub fn value_at(&self, x: &[f64]) -> f64 {
        self.terminal.interpolate(x)
    }
}

/// Evolves nodal values `u0` over `horizon`.
pub fn evolve(
    plan: &SchemePlan,
    u0: Vec<f64>,
    horizon: f64,
    source: Option<&[f64]>,
    opts: &SolveOptions,
) -> Result<Solution> {
    let grid = plan.grid().clone();
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::invalid("horizon must be finite and non-negative"));
    }
    if u0.len() != grid.len() || source.is_some_and(|s| s.len() != grid.len()) {
        return Err(Error::invalid("nodal data does not match the grid"));
    }
    if u0.iter().chain(source.unwrap_or(&[])).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step: 0 });
    }
    let bound = plan.cfl_dt(horizon);
    let target = match opts.dt {
        Some(dt) if !(dt > 0.0) => return Err(Error::invalid("time step must be positive")),
        Some(dt) if dt > bound * (1.0 + 1e-12) && !plan.is_trivial() => {
            return Err(Error::Cfl {
                requested: dt,
                required: bound,
            })
        }
        Some(dt) => dt,
        None => bound,
    };
    let steps = if horizon == 0.0 {
        0
    } else {
        ((horizon / target) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    };
    let dt = if steps == 0 { 0.0 } else { horizon / steps as f64 };
    let mut trajectory = Vec::new();
    let retain = opts.retain_every;
    if retain.is_some() {
        trajectory.push(Field::new(grid.clone(), u0.clone(), 0.0)?);
    }
    let mut u = u0;
    let mut next = vec![0.0; u.len()];
    for n in 1..=steps {
        plan.step(&u, dt, source, &mut next);
        std::mem::swap(&mut u, &mut next);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: n });
        }
        if let Some(k) = retain {
            if n % k.max(1) == 0 || n == steps {
                trajectory.push(Field {
                    grid: grid.clone(),
                    values: u.clone(),
                    t: n as f64 * dt,
                });
            }
        }
    }
    Ok(Solution {
        terminal: Field {
            grid,
            values: u,
            t: horizon,
        },
        dt,
        steps,
        trajectory,
    })
}

/// Solves the Cauchy problem `∂ₜu = G(x, Du, D²u) + f(x)`, `u(0) = φ`.
pub fn solve_cauchy(
    gen: &dyn Generator,
    payoff: &Payoff,
    horizon: f64,
    grid: &Grid,
    source: Option<&dyn Fn(&[f64]) -> f64>,
    opts: &SolveOptions,
) -> Result<Solution> {
    if payoff.arity() != grid.dim() {
        return Err(Error::invalid("payoff arity does not match grid dimension"));
    }
    let plan = SchemePlan::new(gen, grid)?;
    let u0 = grid.sample(|x| payoff.value(x));
    let f = source.map(|f| grid.sample(f));
    evolve(&plan, u0, horizon, f.as_deref(), opts)
}

fn common_dt(gens: &[&dyn Generator], grid: &Grid, horizon: f64) -> Result<f64> {
    let mut dt = horizon;
    for g in gens {
        dt = dt.min(cfl_timestep(*g, grid, horizon)?);
    }
    Ok(dt)
}

fn retain_stride(steps_estimate: f64) -> usize {
    ((steps_estimate / 200.0).ceil() as usize).max(1)
}

/// Solves from `φ₁ ≤ φ₂` and reports the worst violation of `u₁ ≤ u₂` over
/// retained slices. Tolerance is `1e-12` per step.
pub fn check_comparison(
    gen: &dyn Generator,
    phi1: &Payoff,
    phi2: &Payoff,
    horizon: f64,
    grid: &Grid,
) -> Result<ResidualReport> {
    let lo = grid.sample(|x| phi1.value(x));
    let hi = grid.sample(|x| phi2.value(x));
    if let Some(i) = (0..lo.len()).find(|&i| lo[i] > hi[i]) {
        return Err(Error::invalid(format!(
            "comparison needs φ₁ ≤ φ₂; violated at {:?}",
            grid.node(i)
        )));
    }
    let plan = SchemePlan::new(gen, grid)?;
    let dt = plan.cfl_dt(horizon);
    let opts = SolveOptions {
        dt: None,
        retain_every: Some(retain_stride(horizon / dt)),
    };
    let s1 = evolve(&plan, lo, horizon, None, &opts)?;
    let s2 = evolve(&plan, hi, horizon, None, &opts)?;
    let worst = s1
        .trajectory
        .iter()
        .zip(&s2.trajectory)
        .flat_map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| x - y))
        .fold(0.0f64, f64::max);
    Ok(
        ResidualReport::new("comparison", worst, 1e-12 * s1.steps.max(1) as f64)
            .with_param("dx", grid.min_dx())
            .with_param("dt", s1.dt)
            .with_param("slices", s1.trajectory.len() as f64),
    )
}

pub struct PropertyFixture<'a> {
    pub phi: &'a Payoff,
    pub psi: &'a Payoff,
    pub shift: f64,
    pub scale: f64,
    pub horizon: f64,
}

/// Constant shift, positive homogeneity and domination by the attached
/// dominating generator, all on terminal slices computed with a common step.
pub fn check_solution_properties(
    gen: &crate::generator::GeneratorSpec,
    fixture: &PropertyFixture<'_>,
    grid: &Grid,
    budget: &SchemeBudget,
) -> Result<ResidualReport> {
    let dom = gen
        .dominating
        .as_deref()
        .ok_or_else(|| Error::invalid("solution properties need a dominating generator"))?;
    if !(fixture.scale >= 0.0) {
        return Err(Error::invalid("homogeneity check needs α ≥ 0"));
    }
    let t = fixture.horizon;
    let dt = common_dt(&[gen, dom], grid, t)?;
    let opts = SolveOptions {
        dt: Some(dt),
        retain_every: None,
    };
    let plan = SchemePlan::new(gen, grid)?;
    let plan_dom = SchemePlan::new(dom, grid)?;
    let phi = grid.sample(|x| fixture.phi.value(x));
    let psi = grid.sample(|x| fixture.psi.value(x));
    let run = |plan: &SchemePlan, v: Vec<f64>| evolve(plan, v, t, None, &opts);

    let u_phi = run(&plan, phi.clone())?;
    let u_psi = run(&plan, psi.clone())?;
    let c = fixture.shift;
    let u_shift = run(&plan, phi.iter().map(|v| v + c).collect())?;
    let a = fixture.scale;
    let u_scaled = run(&plan, phi.iter().map(|v| a * v).collect())?;
    let u_diff = run(&plan_dom, phi.iter().zip(&psi).map(|(x, y)| x - y).collect())?;

    let vals = |s: &Solution| s.terminal.values.clone();
    let (up, us, ush, usc, ud) = (
        vals(&u_phi),
        vals(&u_psi),
        vals(&u_shift),
        vals(&u_scaled),
        vals(&u_diff),
    );
    let scale = up.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let shift_err = ush
        .iter()
        .zip(&up)
        .map(|(x, y)| (x - y - c).abs())
        .fold(0.0, f64::max);
    let homo_err = usc
        .iter()
        .zip(&up)
        .map(|(x, y)| (x - a * y).abs())
        .fold(0.0, f64::max);
    let dom_excess = (0..up.len())
        .map(|i| up[i] - us[i] - ud[i])
        .fold(0.0f64, f64::max);
    let float_tol = 1e-9f64.max(1e-15 * scale * u_phi.steps as f64);
    let dx = grid.min_dx();
    let children = vec![
        ResidualReport::new("constant-shift", shift_err, float_tol).with_param("c", c),
        ResidualReport::new("positive-homogeneity", homo_err, float_tol).with_param("alpha", a),
        ResidualReport::new("domination", dom_excess, 3.0 * budget.bound(dx, dt))
            .with_param("budget", budget.bound(dx, dt)),
    ];
    Ok(ResidualReport::aggregate("solution-properties", children)
        .with_param("dx", dx)
        .with_param("dt", u_phi.dt))
}

/// Scheme-error model `C (dx + dt)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeBudget {
    pub constant: f64,
}

impl SchemeBudget {
    pub fn new(constant: f64) -> Self {
        SchemeBudget { constant }
    }

    pub fn bound(&self, dx: f64, dt: f64) -> f64 {
        self.constant * (dx + dt)
    }

    /// `max(1e-9, 3 C (dx + dt))`.
    pub fn tolerance(&self, dx: f64, dt: f64) -> f64 {
        1e-9f64.max(3.0 * self.bound(dx, dt))
    }

    pub fn from_table(table: &ConvergenceTable) -> Self {
        SchemeBudget {
            constant: table.constant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Exact(f64),
    /// Use the last grid of the sequence as the reference; it gets no row.
    FinestGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub nx: usize,
    pub dx: f64,
    pub dt: f64,
    pub value: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// `log(e_k / e_{k+1}) / log(dx_k / dx_{k+1})` for consecutive rows with
    /// non-zero errors.
    pub orders: Vec<f64>,
    /// Smallest consecutive order, or `+∞` when every error vanishes.
    pub min_order: f64,
    pub monotone: bool,
    /// `max error / (dx + dt)`.
    pub constant: f64,
}

impl ConvergenceTable {
    pub fn to_report(&self, check: &str, required_order: f64) -> ResidualReport {
        let ok = self.monotone && self.min_order >= required_order;
        let mut r = ResidualReport::predicate(check, ok)
            .with_param("min_order", self.min_order)
            .with_param("constant", self.constant);
        for row in &self.rows {
            r = r.with_note(format!(
                "nx={} dx={:e} dt={:e} value={:.12e} error={:e}",
                row.nx, row.dx, row.dt, row.value, row.error
            ));
        }
        r
    }
}

/// Errors at `x` for each grid, with empirical orders.
pub fn convergence_study(
    gen: &dyn Generator,
    payoff: &Payoff,
    horizon: f64,
    grids: &[Grid],
    x: &[f64],
    reference: Reference,
) -> Result<ConvergenceTable> {
    if grids.is_empty() {
        return Err(Error::invalid("convergence study needs at least one grid"));
    }
    let mut solved = Vec::with_capacity(grids.len());
    for g in grids {
        let s = solve_cauchy(gen, payoff, horizon, g, None, &SolveOptions::default())?;
        solved.push((g, s.value_at(x), s.dt));
    }
    let (exact, used) = match reference {
        Reference::Exact(v) => (v, solved.len()),
        Reference::FinestGrid => {
            if solved.len() < 2 {
                return Err(Error::invalid("finest-grid reference needs two grids"));
            }
            (solved.last().expect("non-empty").1, solved.len() - 1)
        }
    };
    let rows: Vec<ConvergenceRow> = solved[..used]
        .iter()
        .map(|(g, v, dt)| ConvergenceRow {
            nx: g.nx()[0],
            dx: g.min_dx(),
            dt: *dt,
            value: *v,
            error: (v - exact).abs(),
        })
        .collect();
    Ok(tabulate(rows))
}

pub(crate) fn tabulate(rows: Vec<ConvergenceRow>) -> ConvergenceTable {
    let mut orders = Vec::new();
    let mut monotone = true;
    for w in rows.windows(2) {
        if w[1].error > w[0].error {
            monotone = false;
        }
        if w[0].error > 0.0 && w[1].error > 0.0 {
            orders.push((w[0].error / w[1].error).ln() / (w[0].dx / w[1].dx).ln());
        } else if w[0].error > 0.0 {
            orders.push(f64::INFINITY);
        }
    }
    let all_zero = rows.iter().all(|r| r.error == 0.0);
    let min_order = if all_zero || orders.is_empty() {
        f64::INFINITY
    } else {
        orders.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let constant = rows
        .iter()
        .map(|r| r.error / (r.dx + r.dt))
        .fold(0.0, f64::max);
    ConvergenceTable {
        rows,
        orders,
        min_order,
        monotone,
        constant,
    }
}

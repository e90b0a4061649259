//! Nonlinear expectations of cylinder functionals `φ(X_{t₁}, …, X_{t_N})`
//! by backward recursion over the PDE semigroup.
//!
//! Stage `k` solves, for every node of the prefix `(x₁, …, x_{k−1})`, the
//! Cauchy problem in `x_k` over `t_k − t_{k−1}` and reads the result at
//! `x_{k−1}`. All coordinates live on one lattice `x₀ + dx ℤ^d`, so stage
//! values are read at nodes and no interpolation enters between stages.
//! Outside the window where `X_{t_k}` can reach, stage values are extended
//! by their boundary value.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::generator::{Generator, GeneratorSpec};
use crate::grid::{interpolate_multilinear, Field, Grid, Payoff};
use crate::pde::{cfl_timestep, evolve, solve_cauchy, SchemeBudget, SchemePlan, SolveOptions};
use crate::report::ResidualReport;

pub const MAX_TIMES: usize = 3;

pub type PayoffFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `φ(X_{t₁}, …, X_{t_N})` started from `X₀ = x₀`. Coordinate `k` of
/// `X_{t_i}` is argument `i d + k` of the payoff.
#[derive(Clone)]
pub struct CylinderFunctional {
    times: Vec<f64>,
    payoff: PayoffFn,
    x0: Vec<f64>,
    label: String,
}

impl fmt::Debug for CylinderFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylinderFunctional")
            .field("times", &self.times)
            .field("payoff", &self.label)
            .field("x0", &self.x0)
            .finish()
    }
}

impl CylinderFunctional {
    pub fn new(times: Vec<f64>, payoff: Expr, x0: Vec<f64>) -> Result<Self> {
        let n = times.len() * x0.len();
        if payoff.arity() > n {
            return Err(Error::invalid(format!(
                "payoff uses {} arguments but the functional has {n}",
                payoff.arity()
            )));
        }
        let label = payoff.to_string();
        let f: PayoffFn = Arc::new(move |x: &[f64]| payoff.eval(x));
        CylinderFunctional::from_fn_labeled(times, f, x0, label)
    }

    pub fn parse(times: Vec<f64>, payoff: &str, x0: Vec<f64>) -> Result<Self> {
        CylinderFunctional::new(times, Expr::parse(payoff)?, x0)
    }

    pub fn from_fn(times: Vec<f64>, payoff: PayoffFn, x0: Vec<f64>) -> Result<Self> {
        CylinderFunctional::from_fn_labeled(times, payoff, x0, "<function>".into())
    }

    fn from_fn_labeled(
        times: Vec<f64>,
        payoff: PayoffFn,
        x0: Vec<f64>,
        label: String,
    ) -> Result<Self> {
        if times.is_empty() || times.len() > MAX_TIMES {
            return Err(Error::invalid(format!(
                "cylinder functionals need 1 to {MAX_TIMES} times"
            )));
        }
        if !(times[0] > 0.0) || times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("cylinder times must satisfy 0 < t₁ < … < t_N"));
        }
        if times.iter().any(|t| !t.is_finite()) || x0.is_empty() || x0.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("cylinder functional: non-finite data"));
        }
        Ok(CylinderFunctional {
            times,
            payoff,
            x0,
            label,
        })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.payoff)(x)
    }

    /// Adds a cylinder time whose coordinate the payoff ignores.
    pub fn insert_time(&self, s: f64) -> Result<Self> {
        if self.times.contains(&s) {
            return Err(Error::invalid("time already present"));
        }
        let pos = self.times.partition_point(|&t| t < s);
        let mut times = self.times.clone();
        times.insert(pos, s);
        let d = self.dim();
        let inner = self.payoff.clone();
        let f: PayoffFn = Arc::new(move |x: &[f64]| {
            let mut y = Vec::with_capacity(x.len() - d);
            y.extend_from_slice(&x[..pos * d]);
            y.extend_from_slice(&x[(pos + 1) * d..]);
            inner(&y)
        });
        CylinderFunctional::from_fn_labeled(times, f, self.x0.clone(), self.label.clone())
    }

    /// `φ + c`
    pub fn shifted(&self, c: f64) -> Self {
        let inner = self.payoff.clone();
        CylinderFunctional {
            payoff: Arc::new(move |x: &[f64]| inner(x) + c),
            label: format!("({}) + {c}", self.label),
            ..self.clone()
        }
    }

    /// `α φ`
    pub fn scaled(&self, alpha: f64) -> Self {
        let inner = self.payoff.clone();
        CylinderFunctional {
            payoff: Arc::new(move |x: &[f64]| alpha * inner(x)),
            label: format!("{alpha} * ({})", self.label),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationOptions {
    /// Lattice spacing shared by every coordinate.
    pub dx: f64,
    /// Window growth per stage in standard deviations of the fastest control.
    pub window_sigmas: f64,
    /// Prefix nodes are every `stride`-th lattice node; `1` keeps stage
    /// reads exact, larger values trade accuracy for multilinear
    /// interpolation.
    pub stride: usize,
    /// Common time step, for runs that must match another generator.
    pub dt: Option<f64>,
    /// `(max tr a, max |b|₁)` override for window sizing.
    pub bounds: Option<(f64, f64)>,
}

impl Default for ExpectationOptions {
    fn default() -> Self {
        ExpectationOptions {
            dx: 0.1,
            window_sigmas: 8.0,
            stride: 1,
            dt: None,
            bounds: None,
        }
    }
}

/// `Ẽ_{t_j}[ξ]` as a function of `(X_{t₁}, …, X_{t_j})` on a tensor grid;
/// a scalar at `j = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalValue {
    pub time: f64,
    pub grid: Option<Grid>,
    pub values: Vec<f64>,
}

impl ConditionalValue {
    pub fn prefix_len(&self) -> usize {
        self.grid.as_ref().map_or(0, |g| g.dim())
    }

    /// Multilinear in the prefix coordinates, clamped to the grid box.
    pub fn value(&self, prefix: &[f64]) -> f64 {
        match &self.grid {
            None => self.values[0],
            Some(g) => interpolate_multilinear(g, &self.values, prefix),
        }
    }

    /// Header `x1,…,xm,value`, one row per node (last coordinate fastest).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let m = self.prefix_len();
        let mut header: Vec<String> = (1..=m).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        out.write_record(&header)?;
        match &self.grid {
            None => out.write_record([format!("{:e}", self.values[0])])?,
            Some(g) => {
                for (i, v) in self.values.iter().enumerate() {
                    let mut row: Vec<String> = g.node(i).iter().map(|x| format!("{x:e}")).collect();
                    row.push(format!("{v:e}"));
                    out.write_record(&row)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Output of the backward recursion.
#[derive(Debug, Clone)]
pub struct Recursion {
    pub value: f64,
    /// `stages[j]` is `Ẽ_{t_j}[ξ]`, `j = 0, …, N−1` (with `t₀ = 0`).
    pub stages: Vec<ConditionalValue>,
    pub dt: f64,
    pub dx: f64,
}

/// Sup of `tr a` and `|b|₁` over controls on a box around `center`.
pub fn operator_bounds(gen: &dyn Generator, center: &[f64], radius: f64) -> (f64, f64) {
    let d = center.len();
    let per_axis: usize = if d == 1 { 401 } else { 41 };
    let total = per_axis.pow(d as u32);
    let mut tr = 0.0f64;
    let mut b = 0.0f64;
    for idx in 0..total {
        let mut rem = idx;
        let x: Vec<f64> = (0..d)
            .map(|k| {
                let i = rem % per_axis;
                rem /= per_axis;
                center[k] - radius + 2.0 * radius * i as f64 / (per_axis - 1) as f64
            })
            .collect();
        for c in gen.controls_at(&x) {
            tr = tr.max(c.a.trace());
            b = b.max(c.b.iter().map(|v| v.abs()).sum());
        }
    }
    (tr, b)
}

struct Layout {
    d: usize,
    /// Window half-widths per level, `windows[k-1]` for `X_{t_k}`.
    windows: Vec<f64>,
    lattices: Vec<Grid>,
    dx: f64,
}

impl Layout {
    fn new(gen: &dyn Generator, xi: &CylinderFunctional, opts: &ExpectationOptions) -> Result<Self> {
        if !(opts.dx > 0.0 && opts.window_sigmas > 0.0) || opts.stride == 0 {
            return Err(Error::invalid("expectation options: dx, window and stride must be positive"));
        }
        let d = xi.dim();
        if gen.dim() != d {
            return Err(Error::invalid("generator and functional dimensions differ"));
        }
        if d > 2 || (d == 2 && xi.n() > 1) {
            return Err(Error::invalid(
                "the recursion supports d = 1 with N ≤ 3, and d = 2 with N = 1",
            ));
        }
        let (tr, b) = opts
            .bounds
            .unwrap_or_else(|| operator_bounds(gen, &xi.x0, 25.0));
        let mut windows = Vec::new();
        let mut w = 0.0;
        let mut prev = 0.0;
        for &t in &xi.times {
            let h = t - prev;
            w += b * h + opts.window_sigmas * (tr * h).sqrt();
            windows.push(w);
            prev = t;
        }
        let lattices = windows
            .iter()
            .map(|w| Grid::centered(&xi.x0, &vec![w + 2.0 * opts.dx; d], opts.dx))
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            d,
            windows,
            lattices,
            dx: opts.dx,
        })
    }

    fn window_grid(&self, x0: &[f64], level: usize, stride: usize) -> Result<Grid> {
        Grid::centered(x0, &vec![self.windows[level - 1]; self.d], self.dx * stride as f64)
    }

    /// Product of the windows of levels `1..=k`.
    fn prefix_grid(&self, x0: &[f64], k: usize, stride: usize) -> Result<Option<Grid>> {
        if k == 0 {
            return Ok(None);
        }
        let (mut lo, mut hi, mut nx) = (Vec::new(), Vec::new(), Vec::new());
        for level in 1..=k {
            let g = self.window_grid(x0, level, stride)?;
            lo.extend_from_slice(g.lo());
            hi.extend_from_slice(g.hi());
            nx.extend_from_slice(g.nx());
        }
        Ok(Some(Grid::new(lo, hi, nx)?))
    }
}

/// `𝒯_h[φ]` on `grid`; `h = 0` samples `φ`.
pub fn semigroup_apply(gen: &dyn Generator, phi: &Payoff, h: f64, grid: &Grid) -> Result<Field> {
    if h < 0.0 {
        return Err(Error::invalid("semigroup_apply: negative duration"));
    }
    if h == 0.0 {
        return Field::new(grid.clone(), grid.sample(|x| phi.value(x)), 0.0);
    }
    Ok(solve_cauchy(gen, phi, h, grid, None, &SolveOptions::default())?.terminal)
}

/// Runs the full recursion and keeps every stage.
pub fn recursion(
    gen: &dyn Generator,
    xi: &CylinderFunctional,
    opts: &ExpectationOptions,
) -> Result<Recursion> {
    let layout = Layout::new(gen, xi, opts)?;
    let d = layout.d;
    let n = xi.n();
    let x0 = xi.x0.clone();
    let solve_opts = SolveOptions {
        dt: opts.dt,
        retain_every: None,
    };
    let mut stages: Vec<ConditionalValue> = Vec::with_capacity(n);
    let mut next: Option<ConditionalValue> = None;
    let mut max_dt = 0.0f64;
    for k in (1..=n).rev() {
        let lattice = &layout.lattices[k - 1];
        let plan = SchemePlan::new(gen, lattice).map_err(|e| e.at_stage(k))?;
        let h = xi.times[k - 1] - if k == 1 { 0.0 } else { xi.times[k - 2] };
        let prefix = layout.prefix_grid(&x0, k - 1, opts.stride)?;
        let terminal_box = layout.window_grid(&x0, k, 1)?;
        let lat_nodes: Vec<Vec<f64>> = (0..lattice.len()).map(|i| lattice.node(i)).collect();
        let n_prefix = prefix.as_ref().map_or(1, |g| g.len());
        let stage_dt = std::sync::Mutex::new(0.0f64);
        let values: Vec<f64> = (0..n_prefix)
            .into_par_iter()
            .map(|q| -> Result<f64> {
                let qx = prefix.as_ref().map_or_else(Vec::new, |g| g.node(q));
                let mut arg = qx.clone();
                arg.resize(qx.len() + d, 0.0);
                let data: Vec<f64> = lat_nodes
                    .iter()
                    .map(|y| {
                        if k == n {
                            for j in 0..d {
                                arg[qx.len() + j] =
                                    y[j].clamp(terminal_box.lo()[j], terminal_box.hi()[j]);
                            }
                            xi.eval(&arg)
                        } else {
                            arg[qx.len()..].copy_from_slice(y);
                            next.as_ref().expect("later stage").value(&arg)
                        }
                    })
                    .collect();
                let sol = evolve(&plan, data, h, None, &solve_opts)?;
                let mut g = stage_dt.lock().expect("poisoned");
                *g = g.max(sol.dt);
                drop(g);
                let start = if k == 1 { &x0[..] } else { &qx[qx.len() - d..] };
                Ok(sol.value_at(start))
            })
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| e.at_stage(k))?;
        max_dt = max_dt.max(stage_dt.into_inner().expect("poisoned"));
        let cv = ConditionalValue {
            time: if k == 1 { 0.0 } else { xi.times[k - 2] },
            grid: prefix,
            values,
        };
        stages.push(cv.clone());
        next = Some(cv);
    }
    stages.reverse();
    Ok(Recursion {
        value: stages[0].values[0],
        stages,
        dt: max_dt,
        dx: opts.dx,
    })
}

/// `Ẽ[ξ]`.
pub fn expectation(
    gen: &dyn Generator,
    xi: &CylinderFunctional,
    opts: &ExpectationOptions,
) -> Result<f64> {
    Ok(recursion(gen, xi, opts)?.value)
}

/// `Ẽ_t[ξ]` for `t = 0` or a cylinder time of `ξ`.
pub fn conditional(
    gen: &dyn Generator,
    xi: &CylinderFunctional,
    t: f64,
    opts: &ExpectationOptions,
) -> Result<ConditionalValue> {
    let j = if t == 0.0 {
        0
    } else {
        xi.times.iter().position(|&s| s == t).map(|i| i + 1).ok_or_else(|| {
            Error::invalid(format!(
                "conditioning time {t} is not a cylinder time of {:?}",
                xi.times
            ))
        })?
    };
    if j == xi.n() {
        let layout = Layout::new(gen, xi, opts)?;
        let g = layout
            .prefix_grid(&xi.x0, j, opts.stride)?
            .expect("j ≥ 1");
        let values = g.sample(|x| xi.eval(x));
        return Ok(ConditionalValue {
            time: t,
            grid: Some(g),
            values,
        });
    }
    Ok(recursion(gen, xi, opts)?.stages.swap_remove(j))
}

/// Common step for several generators on every lattice the recursion of
/// `xi` can use.
fn common_options(
    gens: &[&dyn Generator],
    xi_horizon: f64,
    x0: &[f64],
    opts: &ExpectationOptions,
) -> Result<ExpectationOptions> {
    let mut tr = 0.0f64;
    let mut b = 0.0f64;
    for g in gens {
        let (t, bb) = operator_bounds(*g, x0, 25.0);
        tr = tr.max(t);
        b = b.max(bb);
    }
    let reach = b * xi_horizon + 3.0 * opts.window_sigmas * (tr * xi_horizon).sqrt() + 1.0;
    let big = Grid::centered(x0, &vec![reach; x0.len()], opts.dx)?;
    let mut dt = f64::INFINITY;
    for g in gens {
        dt = dt.min(cfl_timestep(*g, &big, xi_horizon)?);
    }
    Ok(ExpectationOptions {
        dt: Some(dt),
        bounds: Some((tr, b)),
        ..opts.clone()
    })
}

/// Property suite for `Ẽ` (from `spec`) and `𝓔` (from its dominating
/// generator): monotonicity, constant shift, tower, domination,
/// subadditivity, the sign-split identity, linearity along a symmetric
/// variable and decrease along `φ_n(x) = max(0, |x| − n)`.
pub fn check_expectation_properties(
    spec: &GeneratorSpec,
    x0: f64,
    opts: &ExpectationOptions,
    budget: &SchemeBudget,
) -> Result<ResidualReport> {
    let dom = spec
        .dominating
        .as_deref()
        .ok_or_else(|| Error::invalid("expectation properties need a dominating generator"))?;
    if spec.dim != 1 {
        return Err(Error::invalid("the expectation property suite runs in one dimension"));
    }
    let opts = common_options(&[spec, dom], 1.0, &[x0], opts)?;
    let e = |g: &dyn Generator, xi: &CylinderFunctional| recursion(g, xi, &opts);
    let f = |times: Vec<f64>, src: &str| CylinderFunctional::parse(times, src, vec![x0]);
    let mut probe = e(spec, &f(vec![1.0], "x1^2")?)?;
    let tol = budget.tolerance(opts.dx, probe.dt);
    let float = 1e-9;
    let mut children = Vec::new();

    // (II) ξ ≤ η
    let xi = f(vec![0.5, 1.0], "x2^2 - x1")?;
    let eta = f(vec![0.5, 1.0], "x2^2 - x1 + 0.25 + 0.2 * cos(x2)")?;
    let (a, b) = (e(spec, &xi)?.value, e(spec, &eta)?.value);
    children.push(ResidualReport::new("monotonicity", (a - b).max(0.0), float));

    // (III)
    let shifted = e(spec, &xi.shifted(3.0))?.value;
    children.push(ResidualReport::new("constant-shift", (shifted - a - 3.0).abs(), float));
    let c = e(spec, &f(vec![1.0], "2.5")?)?.value;
    children.push(ResidualReport::new("constant-preserving", (c - 2.5).abs(), float));

    // (IV)
    let mut tower = Vec::new();
    let fixtures = [
        f(vec![0.25, 0.75], "(x2 - x1)^2")?,
        f(vec![0.3, 0.6, 1.0], "x1 * cos(x2) + x3^2 - x2 * x3")?,
        f(vec![1.0], "cos(x1) + 0.5 * x1^2")?,
    ];
    for (i, fx) in fixtures.iter().enumerate() {
        let full = e(spec, fx)?;
        for j in 1..fx.n() {
            let stage = Arc::new(full.stages[j].clone());
            let g: PayoffFn = Arc::new(move |x: &[f64]| stage.value(x));
            let outer = CylinderFunctional::from_fn(fx.times[..j].to_vec(), g, vec![x0])?;
            let v = e(spec, &outer)?.value;
            tower.push(
                ResidualReport::new(format!("reexpect(f{i},t{j})"), (v - full.value).abs(), tol)
                    .with_param("value", full.value),
            );
        }
        if fx.n() < MAX_TIMES {
            let last = *fx.times.last().expect("non-empty");
            let first = if fx.n() == 1 { 0.0 } else { fx.times[0] };
            let s = 0.5 * (first + if fx.n() == 1 { last } else { fx.times[1] });
            let ins = fx.insert_time(s)?;
            let v = e(spec, &ins)?.value;
            tower.push(
                ResidualReport::new(format!("insert(f{i},s={s})"), (v - full.value).abs(), tol)
                    .with_param("value", full.value),
            );
        }
    }
    children.push(ResidualReport::aggregate("tower", tower));

    // (V)
    let xi1 = f(vec![1.0], "x1^2")?;
    let eta1 = f(vec![1.0], "cos(x1)")?;
    let diff = f(vec![1.0], "x1^2 - cos(x1)")?;
    let (ex, ey, ed) = (e(spec, &xi1)?.value, e(spec, &eta1)?.value, e(dom, &diff)?.value);
    children.push(
        ResidualReport::new("domination", (ex - ey - ed).max(0.0), tol)
            .with_param("lhs", ex - ey)
            .with_param("rhs", ed),
    );

    // (VI) on 𝓔
    let sa = f(vec![0.5, 1.0], "x2^2 - x1")?;
    let sb = f(vec![0.5, 1.0], "sin(x1) * x2 - 0.5 * x2^2")?;
    let sab = f(vec![0.5, 1.0], "x2^2 - x1 + sin(x1) * x2 - 0.5 * x2^2")?;
    let (va, vb, vab) = (e(dom, &sa)?.value, e(dom, &sb)?.value, e(dom, &sab)?.value);
    children.push(ResidualReport::new("subadditivity", (vab - va - vb).max(0.0), tol));

    // (VII) on 𝓔: 𝓔_s[ξη] = ξ⁺ 𝓔_s[η] + ξ⁻ 𝓔_s[−η]
    let prod = f(vec![0.5, 1.0], "sin(2 * x1) * (x2^2 - x2)")?;
    let pos = f(vec![0.5, 1.0], "x2^2 - x2")?;
    let neg = f(vec![0.5, 1.0], "x2 - x2^2")?;
    let lhs = conditional(dom, &prod, 0.5, &opts)?;
    let rp = conditional(dom, &pos, 0.5, &opts)?;
    let rn = conditional(dom, &neg, 0.5, &opts)?;
    let g = lhs.grid.as_ref().expect("prefix at t₁");
    let mut split = 0.0f64;
    for i in 0..g.len() {
        let x = g.node(i)[0];
        let s = (2.0 * x).sin();
        split = split.max((lhs.values[i] - (s.max(0.0) * rp.values[i] + (-s).max(0.0) * rn.values[i])).abs());
    }
    children.push(ResidualReport::new("sign-split", split, tol));
    let hom = e(dom, &sa.scaled(2.5))?.value;
    children.push(ResidualReport::new("positive-homogeneity", (hom - 2.5 * va).abs(), float.max(1e-12 * va.abs())));

    // Linearity along a symmetric variable, on a drift-free operator.
    let drift_free = operator_bounds(spec, &[x0], 25.0).1 == 0.0;
    if drift_free {
        let sx = f(vec![0.5], "x1")?;
        let up = e(dom, &sx)?.value;
        let dn = e(dom, &sx.scaled(-1.0))?.value;
        let sym = (up + dn).abs();
        let alpha = -2.0;
        let combo = e(spec, &f(vec![0.5], "-2 * x1 + x1^2")?)?.value;
        let ex = e(spec, &sx)?.value;
        let eq = e(spec, &f(vec![0.5], "x1^2")?)?.value;
        children.push(ResidualReport::aggregate(
            "symmetric-linearity",
            vec![
                ResidualReport::new("symmetric", sym, float),
                ResidualReport::new("linearity", (combo - (alpha * ex + eq)).abs(), tol)
                    .with_param("alpha", alpha),
            ],
        ));
    }

    // φ_n ↓ 0
    let mut seq = Vec::new();
    for n in [1, 2, 4, 8, 16, 32] {
        let fx = f(vec![1.0], &format!("max(0, abs(x1) - {n})"))?;
        seq.push((n, e(spec, &fx)?.value));
    }
    let decreasing = seq.windows(2).all(|w| w[1].1 <= w[0].1 + float);
    let last = seq.last().expect("non-empty").1;
    let mut mono = ResidualReport::new("decreasing-sequence", last.abs(), 1e-3);
    if !decreasing {
        mono.passed = false;
        mono = mono.with_note("sequence not monotone");
    }
    for (n, v) in &seq {
        mono = mono.with_note(format!("n={n} value={v:e}"));
    }
    children.push(mono);

    probe.stages.clear();
    Ok(ResidualReport::aggregate("expectation-properties", children)
        .with_param("dx", opts.dx)
        .with_param("dt", probe.dt)
        .with_param("tolerance", tol))
}

/// Both evaluations of the constant `c` for `∂ₜu = ∂²u + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InconsistencyDemo {
    pub t1: f64,
    pub t2: f64,
    pub c: f64,
    pub x0: f64,
    /// `c` read as a deterministic constant.
    pub bare: f64,
    /// `c` read as `φ₀(X_{t₁}, X_{t₂})` through the recursion.
    pub recursion: f64,
    pub mismatch: f64,
    /// The same recursion driven by the numerical solver.
    pub numeric: Option<f64>,
}

/// Semigroup of `∂ₜu = ∂²u + x` on affine data: `αx + β ↦ (α + t)x + β`.
fn affine_semigroup(t: f64, (alpha, beta): (f64, f64)) -> (f64, f64) {
    (alpha + t, beta)
}

pub fn inconsistency_demo(t1: f64, t2: f64, c: f64, x0: f64) -> Result<InconsistencyDemo> {
    if !(0.0 < t1 && t1 < t2) || !c.is_finite() || !x0.is_finite() {
        return Err(Error::invalid("inconsistency demo needs 0 < t₁ < t₂"));
    }
    // stage at t₁: the affine function x₁ ↦ (t₂ − t₁) x₁ + c
    let inner = affine_semigroup(t2 - t1, (0.0, c));
    let outer = affine_semigroup(t1, inner);
    let recursion = outer.0 * x0 + outer.1;
    Ok(InconsistencyDemo {
        t1,
        t2,
        c,
        x0,
        bare: c,
        recursion,
        mismatch: recursion - c,
        numeric: None,
    })
}

/// [`inconsistency_demo`] plus a numerical run of the same two-stage
/// recursion with the solver (`a = 2` gives `∂²u`, source `x`).
pub fn inconsistency_demo_numeric(t1: f64, t2: f64, c: f64, x0: f64) -> Result<InconsistencyDemo> {
    let mut demo = inconsistency_demo(t1, t2, c, x0)?;
    let gen = GeneratorSpec::sublinear(vec![crate::generator::ControlPoint::scalar(2.0, 0.0)?])?;
    let grid = Grid::centered(&[x0], &[6.0], 0.05)?;
    let plan = SchemePlan::new(&gen, &grid)?;
    let src = grid.sample(|x| x[0]);
    let opts = SolveOptions::default();
    // φ₀ ignores both coordinates, so the inner stage is the same for every
    // prefix node; affine data keeps the scheme exact.
    let inner = evolve(&plan, vec![c; grid.len()], t2 - t1, Some(&src), &opts)?;
    let outer = evolve(&plan, inner.terminal.values, t1, Some(&src), &opts)?;
    demo.numeric = Some(outer.value_at(&[x0]));
    Ok(demo)
}

impl InconsistencyDemo {
    pub fn to_report(&self) -> ResidualReport {
        let expected = self.t2 * self.x0;
        let mut children = vec![
            ResidualReport::new("mismatch-closed-form", (self.mismatch - expected).abs(), 1e-12)
                .with_param("mismatch", self.mismatch)
                .with_param("bare", self.bare)
                .with_param("recursion", self.recursion),
        ];
        if let Some(v) = self.numeric {
            children.push(
                ResidualReport::new("mismatch-numeric", (v - self.recursion).abs(), 1e-9)
                    .with_param("numeric", v),
            );
        }
        if self.x0 != 0.0 {
            children.push(ResidualReport::predicate("mismatch-present", self.mismatch != 0.0));
        }
        ResidualReport::aggregate("inconsistency", children)
            .with_param("t1", self.t1)
            .with_param("t2", self.t2)
            .with_param("c", self.c)
            .with_param("x0", self.x0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn xi(times: Vec<f64>, src: &str) -> CylinderFunctional {
        CylinderFunctional::parse(times, src, vec![0.0]).unwrap()
    }

    #[test]
    fn validation() {
        assert!(CylinderFunctional::parse(vec![], "1", vec![0.0]).is_err());
        assert!(CylinderFunctional::parse(vec![0.5, 0.5], "1", vec![0.0]).is_err());
        assert!(CylinderFunctional::parse(vec![0.1, 0.2, 0.3, 0.4], "1", vec![0.0]).is_err());
        assert!(CylinderFunctional::parse(vec![1.0], "x2", vec![0.0]).is_err());
    }

    #[test]
    fn closed_forms() {
        let g = fixtures::g_heat();
        let o = ExpectationOptions::default();
        let v = expectation(&g, &xi(vec![1.0], "x1^2"), &o).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        assert_eq!(expectation(&g, &xi(vec![1.0], "4"), &o).unwrap(), 4.0);
        let v = expectation(&g, &xi(vec![0.25, 0.75], "(x2 - x1)^2"), &o).unwrap();
        assert!((v - 0.5).abs() < 1e-9, "{v}");
    }

    #[test]
    fn conditional_examples() {
        let g = fixtures::g_heat();
        let o = ExpectationOptions::default();
        let f = xi(vec![1.0], "x1^2").insert_time(0.5).unwrap();
        let cv = conditional(&g, &f, 0.5, &o).unwrap();
        let grid = cv.grid.as_ref().unwrap();
        for i in (0..grid.len()).step_by(7) {
            let x = grid.node(i)[0];
            assert!((cv.values[i] - (x * x + 0.5)).abs() < 1e-9);
        }
        assert!(conditional(&g, &f, 0.7, &o).is_err());

        // payoff measurable at s: identity
        let f = xi(vec![0.5, 1.0], "cos(x1)");
        let cv = conditional(&g, &f, 0.5, &o).unwrap();
        let grid = cv.grid.as_ref().unwrap();
        for i in 0..grid.len() {
            assert!((cv.values[i] - grid.node(i)[0].cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn semigroup_identity_and_heat() {
        let grid = Grid::uniform_1d(-10.0, 10.0, 401).unwrap();
        let phi = Payoff::parse("cos(x)", 1).unwrap();
        let f = semigroup_apply(&fixtures::heat_singleton(), &phi, 0.0, &grid).unwrap();
        assert_eq!(f.values[200], 1.0);
        let f = semigroup_apply(&fixtures::heat_singleton(), &phi, 1.0, &grid).unwrap();
        assert!((f.values[210] - (-0.5f64).exp() * 0.5f64.cos()).abs() < 1e-3);
    }

    #[test]
    fn remark_instances() {
        let d = inconsistency_demo(0.5, 1.0, 1.0, 2.0).unwrap();
        assert_eq!((d.bare, d.recursion, d.mismatch), (1.0, 3.0, 2.0));
        assert_eq!(inconsistency_demo(0.2, 1.0, 1.0, 0.0).unwrap().mismatch, 0.0);
        let d = inconsistency_demo(0.25, 0.5, 0.0, -4.0).unwrap();
        assert_eq!((d.bare, d.recursion, d.mismatch), (0.0, -2.0, -2.0));
        let n = inconsistency_demo_numeric(0.5, 1.0, 1.0, 2.0).unwrap();
        assert!((n.numeric.unwrap() - 3.0).abs() < 1e-9);
        assert!(inconsistency_demo(1.0, 0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn conditional_csv_rows() {
        let g = fixtures::g_heat();
        let o = ExpectationOptions {
            dx: 0.25,
            ..Default::default()
        };
        let cv = conditional(&g, &xi(vec![0.5, 1.0], "x1 * x2"), 0.5, &o).unwrap();
        let mut buf = Vec::new();
        cv.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,value\n"));
        assert_eq!(text.lines().count(), cv.values.len() + 1);
    }
}

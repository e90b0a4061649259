//! Weak solutions of `dz = b(z) dt + r(z) d⟨B⟩ + σ(z) dB` where `B` is a
//! Ḡ-Brownian motion.
//!
//! The derived operator is
//! `G̃(z, p, A) = Ḡ(2 r(z)·p + σ(z)ᵀ A σ(z)) + <b(z), p>` with
//! `Ḡ(M) = sup_γ ½ tr[a_γ M]`, so for each `γ` it is the linear operator
//! with diffusion `σ a_γ σᵀ` and drift `b + r(a_γ)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::generator::{
    check_psd, symmetrize, Combination, ControlPoint, Generator, GeneratorKind,
    GeneratorSpec,
};
use crate::grid::{Grid, Payoff, Window};
use crate::martingale::{martingale_residual, MartingaleFixture, Tolerance};
use crate::path::{
    quad_b_residual, reconstruct_b, round_trip_residual, simulate_paths, ControlSchedule,
    MAX_CONDITION,
};
use crate::pde::{evolve, SchemeBudget, SchemePlan, SolveOptions};
use crate::report::ResidualReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderConstants {
    pub l0: f64,
    pub alpha: f64,
}

impl Default for HolderConstants {
    fn default() -> Self {
        HolderConstants { l0: 1.0, alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeCoefficients {
    pub dim: usize,
    /// `b(z)`, length d.
    pub drift: Vec<Expr>,
    /// `r^k_{ij}(z)` at `k d² + i d + j`.
    pub r: Vec<Expr>,
    /// `σ(z)`, row-major d×d.
    pub sigma: Vec<Expr>,
    /// Control matrices of `Ḡ`.
    pub gbar: Vec<DMatrix<f64>>,
    /// Ellipticity constant with `Ḡ(A) ≥ λ tr A` for `A ≥ 0`.
    pub lambda: f64,
    pub holder: HolderConstants,
}

impl SdeCoefficients {
    pub fn new(
        dim: usize,
        drift: Vec<Expr>,
        r: Vec<Expr>,
        sigma: Vec<Expr>,
        gbar: Vec<DMatrix<f64>>,
        holder: HolderConstants,
    ) -> Result<Self> {
        if dim == 0
            || drift.len() != dim
            || r.len() != dim * dim * dim
            || sigma.len() != dim * dim
        {
            return Err(Error::invalid("SDE coefficients have the wrong shape"));
        }
        if drift.iter().chain(&r).chain(&sigma).any(|e| e.arity() > dim) {
            return Err(Error::invalid("SDE coefficient references an unknown state variable"));
        }
        if gbar.is_empty() {
            return Err(Error::invalid("Ḡ needs at least one control matrix"));
        }
        let mut gbar_sym = Vec::with_capacity(gbar.len());
        for a in gbar {
            if a.nrows() != dim || a.ncols() != dim || a.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("Ḡ control matrix has the wrong shape"));
            }
            let a = symmetrize(&a);
            check_psd(&a)?;
            gbar_sym.push(a);
        }
        let lambda = gbar_sym
            .iter()
            .map(|a| 0.5 * a.clone().symmetric_eigenvalues().min())
            .fold(0.0, f64::max);
        if !(lambda > 0.0) {
            return Err(Error::invalid("Ḡ must satisfy Ḡ(A) ≥ λ tr A with λ > 0"));
        }
        if !(holder.l0 >= 0.0 && holder.alpha > 0.0 && holder.alpha <= 1.0) {
            return Err(Error::invalid("Hölder constants need L₀ ≥ 0 and α ∈ (0, 1]"));
        }
        Ok(SdeCoefficients {
            dim,
            drift,
            r,
            sigma,
            gbar: gbar_sym,
            lambda,
            holder,
        })
    }

    /// One-dimensional coefficients with `Ḡ(A) = ½(hi A⁺ − lo A⁻)`.
    pub fn scalar(b: &str, r: &str, sigma: &str, lo_sq: f64, hi_sq: f64) -> Result<Self> {
        if !(0.0 < lo_sq && lo_sq <= hi_sq) {
            return Err(Error::invalid("need 0 < σ̲² ≤ σ̄²"));
        }
        SdeCoefficients::new(
            1,
            vec![Expr::parse(b)?],
            vec![Expr::parse(r)?],
            vec![Expr::parse(sigma)?],
            vec![
                DMatrix::from_element(1, 1, hi_sq),
                DMatrix::from_element(1, 1, lo_sq),
            ],
            HolderConstants::default(),
        )
    }

    pub fn with_holder(mut self, holder: HolderConstants) -> Self {
        self.holder = holder;
        self
    }

    pub fn sigma_at(&self, z: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        DMatrix::from_fn(d, d, |i, j| self.sigma[i * d + j].eval(z))
    }

    pub fn drift_at(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim, |i, _| self.drift[i].eval(z))
    }

    /// `r^k_{ij}(z)` as one matrix per `k`.
    pub fn r_at(&self, z: &[f64]) -> Vec<DMatrix<f64>> {
        let d = self.dim;
        (0..d)
            .map(|k| DMatrix::from_fn(d, d, |i, j| self.r[k * d * d + i * d + j].eval(z)))
            .collect()
    }

    /// `(r(z) M)_k = Σ_ij r^k_{ij} M_ij`.
    pub fn r_apply(&self, z: &[f64], m: &DMatrix<f64>) -> DVector<f64> {
        let r = self.r_at(z);
        DVector::from_fn(self.dim, |k, _| r[k].component_mul(m).sum())
    }

    pub fn gbar_value(&self, m: &DMatrix<f64>) -> f64 {
        let m = symmetrize(m);
        self.gbar
            .iter()
            .map(|a| 0.5 * a.component_mul(&m).sum())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Ḡ(2 Σ_k r^k p_k + σᵀ A σ) + <b, p>`.
    pub fn weak_generator_value(&self, z: &[f64], p: &DVector<f64>, a: &DMatrix<f64>) -> f64 {
        let s = self.sigma_at(z);
        let mut m = s.transpose() * a * &s;
        for (k, rk) in self.r_at(z).iter().enumerate() {
            m += rk * (2.0 * p[k]);
        }
        self.gbar_value(&m) + self.drift_at(z).dot(p)
    }

    /// Diffusion `σ a_γ σᵀ` and drift `b + r(a_γ)` for every `γ`.
    pub fn linear_controls(&self, z: &[f64]) -> Vec<ControlPoint> {
        let s = self.sigma_at(z);
        let b = self.drift_at(z);
        self.gbar
            .iter()
            .map(|a| {
                let diff = symmetrize(&(&s * a * s.transpose()));
                ControlPoint::unchecked(diff, &b + self.r_apply(z, a))
            })
            .collect()
    }

    fn gbar_norm(&self) -> f64 {
        self.gbar.iter().map(|a| 0.5 * a.norm()).fold(0.0, f64::max)
    }
}

/// The derived generator and the report of its construction checks.
#[derive(Debug, Clone)]
pub struct WeakGenerator {
    pub spec: GeneratorSpec,
    pub report: ResidualReport,
}

fn warn_only(r: ResidualReport) -> ResidualReport {
    if r.passed {
        r
    } else {
        let mut r = r.with_note("warning: declared constant exceeded on sampled pairs");
        r.passed = true;
        r
    }
}

/// Checks invertibility of `σ` on every node of `grid`, the ellipticity of
/// `Ḡ` on sampled PSD matrices, and spot-checks the declared Hölder
/// constants (warnings only).
pub fn build_weak_generator(
    coeffs: &SdeCoefficients,
    grid: &Grid,
    samples: usize,
    seed: u64,
) -> Result<WeakGenerator> {
    let d = coeffs.dim;
    if grid.dim() != d {
        return Err(Error::invalid("build_weak_generator: grid dimension differs"));
    }
    let mut worst_cond = 1.0f64;
    let mut sup_sigma = 0.0f64;
    for i in 0..grid.len() {
        let z = grid.node(i);
        let s = coeffs.sigma_at(&z);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular {
                node: z,
                condition: f64::INFINITY,
            });
        }
        let sv = s.svd(false, false).singular_values;
        let cond = if sv.min() > 0.0 {
            sv.max() / sv.min()
        } else {
            f64::INFINITY
        };
        if !(cond <= MAX_CONDITION) {
            return Err(Error::Singular {
                node: z,
                condition: cond,
            });
        }
        worst_cond = worst_cond.max(cond);
        sup_sigma = sup_sigma.max(sv.max());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ellip = 0.0f64;
    let mut holder_q = 0.0f64;
    let mut cont_q = 0.0f64;
    let h = coeffs.holder;
    let (lo, hi) = (grid.lo(), grid.hi());
    for _ in 0..samples {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-2.0..2.0));
        let a = &m * m.transpose();
        ellip = ellip.max(coeffs.lambda * a.trace() - coeffs.gbar_value(&a));

        let z: Vec<f64> = (0..d).map(|k| rng.random_range(lo[k]..hi[k])).collect();
        let w: Vec<f64> = (0..d).map(|k| rng.random_range(lo[k]..hi[k])).collect();
        let dist = z.iter().zip(&w).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if dist < 1e-9 {
            continue;
        }
        let diff = |f: &[Expr]| {
            f.iter()
                .map(|e| (e.eval(&z) - e.eval(&w)).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let coef = diff(&coeffs.drift) + diff(&coeffs.r) + diff(&coeffs.sigma);
        holder_q = holder_q.max(coef / dist.powf(h.alpha));

        let p = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
        let am = symmetrize(&DMatrix::from_fn(d, d, |_, _| rng.random_range(-3.0..3.0)));
        let dg = (coeffs.weak_generator_value(&z, &p, &am)
            - coeffs.weak_generator_value(&w, &p, &am))
        .abs();
        cont_q = cont_q.max(dg / ((1.0 + p.norm() + am.norm()) * dist.powf(h.alpha)));
    }
    let gn = coeffs.gbar_norm();
    let cont_bound = h.l0 * (1.0 + 2.0 * gn) * (1.0 + 2.0 * sup_sigma);
    let report = ResidualReport::aggregate(
        "weak-generator",
        vec![
            ResidualReport::new("sigma-condition", worst_cond, MAX_CONDITION),
            ResidualReport::new("ellipticity", ellip.max(0.0), 1e-12)
                .with_param("lambda", coeffs.lambda),
            warn_only(ResidualReport::new("holder", holder_q, h.l0)),
            warn_only(ResidualReport::new("continuity", cont_q, cont_bound)),
        ],
    )
    .with_param("samples", samples as f64)
    .with_param("seed", seed as f64);
    if !report.passed {
        return Err(Error::invalid(format!(
            "weak generator checks failed: {:?}",
            report.failures()
        )));
    }
    Ok(WeakGenerator {
        spec: GeneratorSpec {
            kind: GeneratorKind::GsdeDerived(Box::new(coeffs.clone())),
            dim: d,
            dominating: None,
        },
        report,
    })
}

/// The operator on `(x, y) ∈ ℝ²` acting through `D_y` and `D²_x` only, with
/// coefficients evaluated at `z = x + y` (d = 1).
#[derive(Debug, Clone)]
pub struct PairLift {
    coeffs: SdeCoefficients,
}

impl PairLift {
    pub fn new(coeffs: &SdeCoefficients) -> Result<Self> {
        if coeffs.dim != 1 {
            return Err(Error::invalid("the (x, y) lift is implemented for d = 1"));
        }
        Ok(PairLift {
            coeffs: coeffs.clone(),
        })
    }
}

impl Generator for PairLift {
    fn dim(&self) -> usize {
        2
    }

    fn combination(&self) -> Combination {
        Combination::Sup
    }

    fn n_controls(&self) -> usize {
        self.coeffs.gbar.len()
    }

    fn controls_at(&self, x: &[f64]) -> Vec<ControlPoint> {
        let z = [x[0] + x[1]];
        let s = self.coeffs.sigma[0].eval(&z);
        let b = self.coeffs.drift[0].eval(&z);
        let r = self.coeffs.r[0].eval(&z);
        self.coeffs
            .gbar
            .iter()
            .map(|a| {
                let a = a[(0, 0)];
                ControlPoint::unchecked(
                    DMatrix::from_diagonal(&DVector::from_column_slice(&[s * s * a, 0.0])),
                    DVector::from_column_slice(&[0.0, b + a * r]),
                )
            })
            .collect()
    }
}

/// `F` with `F' = 1/σ`, tabulated with Hermite cubics and inverted by Newton.
#[derive(Debug, Clone)]
pub struct LampertiMap {
    sigma: Expr,
    lo: f64,
    h: f64,
    f: Vec<f64>,
}

impl LampertiMap {
    pub fn new(sigma: &Expr, lo: f64, hi: f64, h: f64) -> Result<Self> {
        if !(lo < hi && h > 0.0) {
            return Err(Error::invalid("Lamperti table: bad range"));
        }
        let n = ((hi - lo) / h).ceil() as usize + 1;
        let h = (hi - lo) / (n - 1) as f64;
        let inv = |z: f64| 1.0 / sigma.eval(&[z]);
        let mut f = Vec::with_capacity(n);
        f.push(0.0);
        for i in 0..n - 1 {
            let z = lo + i as f64 * h;
            let s = sigma.eval(&[z]);
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Singular {
                    node: vec![z],
                    condition: f64::INFINITY,
                });
            }
            // composite Simpson on four panels
            let q = h / 4.0;
            let sum = inv(z) + 4.0 * inv(z + q) + 2.0 * inv(z + 2.0 * q) + 4.0 * inv(z + 3.0 * q)
                + inv(z + h);
            f.push(f[i] + sum * q / 3.0);
        }
        Ok(LampertiMap {
            sigma: sigma.clone(),
            lo,
            h,
            f,
        })
    }

    fn slope(&self, z: f64) -> f64 {
        1.0 / self.sigma.eval(&[z])
    }

    pub fn forward(&self, z: f64) -> f64 {
        let n = self.f.len();
        let t = (z - self.lo) / self.h;
        if t <= 0.0 {
            return self.f[0] + (z - self.lo) * self.slope(self.lo);
        }
        if t >= (n - 1) as f64 {
            let top = self.lo + (n - 1) as f64 * self.h;
            return self.f[n - 1] + (z - top) * self.slope(top);
        }
        let i = (t.floor() as usize).min(n - 2);
        let s = t - i as f64;
        let z0 = self.lo + i as f64 * self.h;
        let (m0, m1) = (self.slope(z0) * self.h, self.slope(z0 + self.h) * self.h);
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.f[i]
            + (s3 - 2.0 * s2 + s) * m0
            + (-2.0 * s3 + 3.0 * s2) * self.f[i + 1]
            + (s3 - s2) * m1
    }

    pub fn inverse(&self, w: f64) -> f64 {
        let n = self.f.len();
        let i = self.f.partition_point(|&v| v < w).clamp(1, n - 1);
        let (a, b) = (self.f[i - 1], self.f[i]);
        let frac = if b > a { ((w - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 };
        let mut z = self.lo + (i - 1) as f64 * self.h + frac * self.h;
        if w < self.f[0] || w > self.f[n - 1] {
            z = if w < self.f[0] {
                self.lo + (w - self.f[0]) / self.slope(self.lo)
            } else {
                let top = self.lo + (n - 1) as f64 * self.h;
                top + (w - self.f[n - 1]) / self.slope(top)
            };
        }
        for _ in 0..6 {
            let step = (self.forward(z) - w) / self.slope(z);
            z -= step;
            if step.abs() < 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        z
    }
}

/// The operator on `(v, B)` with `v = F(z) − B`: `B` diffuses with `a_γ` and
/// `v` drifts with `σ⁻¹ b + a_γ (σ⁻¹ r − ½ σ')` at `z = F⁻¹(v + B)` (d = 1).
#[derive(Debug, Clone)]
pub struct LampertiLift {
    coeffs: SdeCoefficients,
    pub map: LampertiMap,
    dsigma: Expr,
}

impl LampertiLift {
    pub fn new(coeffs: &SdeCoefficients, z_lo: f64, z_hi: f64) -> Result<Self> {
        if coeffs.dim != 1 {
            return Err(Error::invalid("the (v, B) lift is implemented for d = 1"));
        }
        let dsigma = coeffs.sigma[0]
            .derivative(0)
            .ok_or_else(|| Error::invalid("the (v, B) lift needs a differentiable σ"))?;
        Ok(LampertiLift {
            coeffs: coeffs.clone(),
            map: LampertiMap::new(&coeffs.sigma[0], z_lo, z_hi, 1e-3)?,
            dsigma,
        })
    }

    pub fn z_of(&self, v: f64, b: f64) -> f64 {
        self.map.inverse(v + b)
    }
}

impl Generator for LampertiLift {
    fn dim(&self) -> usize {
        2
    }

    fn combination(&self) -> Combination {
        Combination::Sup
    }

    fn n_controls(&self) -> usize {
        self.coeffs.gbar.len()
    }

    fn controls_at(&self, x: &[f64]) -> Vec<ControlPoint> {
        let z = [self.z_of(x[0], x[1])];
        let s = self.coeffs.sigma[0].eval(&z);
        let ds = self.dsigma.eval(&z);
        let b = self.coeffs.drift[0].eval(&z);
        let r = self.coeffs.r[0].eval(&z);
        self.coeffs
            .gbar
            .iter()
            .map(|a| {
                let a = a[(0, 0)];
                ControlPoint::unchecked(
                    DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, a])),
                    DVector::from_column_slice(&[b / s + a * (r / s - 0.5 * ds), 0.0]),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct NCheckOptions {
    pub z0: Vec<f64>,
    /// Diffusion-axis spacing.
    pub dx: f64,
    /// Drift-axis spacing.
    pub dy: f64,
    /// Half-width of the window where residuals are measured.
    pub window: f64,
    pub tolerance: Tolerance,
}

impl Default for NCheckOptions {
    fn default() -> Self {
        NCheckOptions {
            z0: vec![0.0],
            dx: 0.05,
            dy: 0.05,
            window: 1.0,
            tolerance: Tolerance::Fixed(1e-9),
        }
    }
}

fn sup_on(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    (0..=400)
        .map(|i| f(lo + (hi - lo) * i as f64 / 400.0).abs())
        .fold(0.0, f64::max)
}

/// Grid for a lift whose axis 0 or 1 carries the diffusion; the other axis
/// is pure transport.
fn lift_grid(
    centers: [f64; 2],
    diffusion_axis: usize,
    diff_bound: f64,
    drift_bound: f64,
    horizon: f64,
    opts: &NCheckOptions,
) -> Result<(Grid, Window)> {
    let w = opts.window;
    let margin_diff = 10.0 * (diff_bound * horizon).sqrt() + 2.0 * opts.dx;
    // upwind transport spreads like a diffusion with variance |b| dy T
    let margin_drift =
        drift_bound * horizon + 12.0 * (drift_bound * opts.dy * horizon).sqrt() + 3.0 * opts.dy;
    let mut radius = [0.0; 2];
    let mut step = [0.0; 2];
    radius[diffusion_axis] = w + margin_diff;
    step[diffusion_axis] = opts.dx;
    radius[1 - diffusion_axis] = w + margin_drift;
    step[1 - diffusion_axis] = opts.dy;
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut nx = Vec::new();
    for k in 0..2 {
        let n = (radius[k] / step[k]).ceil() as usize;
        lo.push(centers[k] - n as f64 * step[k]);
        hi.push(centers[k] + n as f64 * step[k]);
        nx.push(2 * n + 1);
    }
    let window = Window {
        lo: centers.iter().map(|c| c - w).collect(),
        hi: centers.iter().map(|c| c + w).collect(),
    };
    Ok((Grid::new(lo, hi, nx)?, window))
}

/// Martingale residual of `N^{p,η}`.
///
/// In one dimension the check runs on the `(x, y)` lift with
/// `φ = p (x + y) + ½ η x²`; the source is then exactly
/// `Ḡ(2 r p + σ² η) + p b`. In higher dimension the reduced operator is used
/// with `φ(z) = pᵀz + ½ zᵀηz` and source `G̃(z, Dφ, D²φ)`.
pub fn check_n_martingale(
    coeffs: &SdeCoefficients,
    p: &[f64],
    eta: &[f64],
    horizon: f64,
    opts: &NCheckOptions,
) -> Result<ResidualReport> {
    let d = coeffs.dim;
    if p.len() != d || eta.len() != d * d || opts.z0.len() != d {
        return Err(Error::invalid("check_n_martingale: dimension mismatch"));
    }
    let fixture = if d == 1 {
        let z0 = opts.z0[0];
        let expr = Expr::parse(&format!("{} * (x1 + x2) + 0.5 * {} * x1^2", p[0], eta[0]))?;
        let span = (opts.window + 15.0, opts.window + 15.0);
        let s = sup_on(|z| coeffs.sigma[0].eval(&[z]), z0 - span.0, z0 + span.1);
        let b = sup_on(|z| coeffs.drift[0].eval(&[z]), z0 - span.0, z0 + span.1);
        let r = sup_on(|z| coeffs.r[0].eval(&[z]), z0 - span.0, z0 + span.1);
        let amax = coeffs.gbar.iter().map(|a| a[(0, 0)]).fold(0.0, f64::max);
        let (grid, window) = lift_grid([0.0, z0], 0, s * s * amax, b + amax * r, horizon, opts)?;
        MartingaleFixture {
            name: "n-martingale".into(),
            generator: Arc::new(PairLift::new(coeffs)?),
            phi: Payoff::new(expr, 2)?,
            horizon,
            grid,
            window,
            tolerance: opts.tolerance,
        }
    } else {
        let mut src = String::new();
        for i in 0..d {
            src.push_str(&format!("{} * x{} + ", p[i], i + 1));
            for j in 0..d {
                src.push_str(&format!("0.5 * {} * x{} * x{} + ", eta[i * d + j], i + 1, j + 1));
            }
        }
        src.push('0');
        let wg = build_weak_generator(
            coeffs,
            &Grid::centered(&opts.z0, &vec![opts.window + 8.0; d], 0.25)?,
            200,
            0,
        )?;
        let grid = Grid::centered(&opts.z0, &vec![opts.window + 8.0; d], opts.dx)?;
        MartingaleFixture {
            name: "n-martingale".into(),
            generator: Arc::new(wg.spec),
            phi: Payoff::parse(&src, d)?,
            horizon,
            window: Window {
                lo: opts.z0.iter().map(|c| c - opts.window).collect(),
                hi: opts.z0.iter().map(|c| c + opts.window).collect(),
            },
            grid,
            tolerance: opts.tolerance,
        }
    };
    Ok(martingale_residual(&fixture)?
        .with_param("p0", p[0])
        .with_param("eta00", eta[0]))
}

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub horizon: f64,
    pub z0: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Euler steps per unit time for the refinement sequence of the
    /// quadratic-variation check.
    pub refinement_steps: Vec<usize>,
    pub moment_steps: usize,
    pub budget: SchemeBudget,
    pub lift: NCheckOptions,
}

impl Default for DemoOptions {
    fn default() -> Self {
        DemoOptions {
            horizon: 1.0,
            z0: 0.0,
            n_paths: 2000,
            seed: 2024,
            refinement_steps: vec![100, 1000, 10000],
            moment_steps: 200,
            budget: SchemeBudget::new(0.05),
            lift: NCheckOptions::default(),
        }
    }
}

fn lift_fixture(
    lift: &Arc<LampertiLift>,
    name: &str,
    phi: &str,
    centers: [f64; 2],
    drift_bound: f64,
    amax: f64,
    demo: &DemoOptions,
) -> Result<MartingaleFixture> {
    let (grid, window) = lift_grid(centers, 1, amax, drift_bound, demo.horizon, &demo.lift)?;
    Ok(MartingaleFixture {
        name: name.into(),
        generator: lift.clone(),
        phi: Payoff::parse(phi, 2)?,
        horizon: demo.horizon,
        grid,
        window,
        tolerance: demo.lift.tolerance,
    })
}

/// `Ẽ[ψ(z_T)]` at `z0` on the `(v, B)` lift and on the reduced operator;
/// returns `(lift value, reduced value, dx, dt)`.
fn lifted_vs_reduced(
    coeffs: &SdeCoefficients,
    lift: &LampertiLift,
    psi: &Payoff,
    drift_bound: f64,
    amax: f64,
    demo: &DemoOptions,
    scale: f64,
) -> Result<(f64, f64, f64, f64)> {
    let opts = NCheckOptions {
        dx: demo.lift.dx / scale,
        dy: demo.lift.dy / scale,
        window: 0.0,
        ..demo.lift.clone()
    };
    let v0 = lift.map.forward(demo.z0);
    let (grid, _) = lift_grid([v0, 0.0], 1, amax, drift_bound, demo.horizon, &opts)?;
    let plan = SchemePlan::new(lift, &grid)?;
    let u0 = grid.sample(|x| psi.value(&[lift.z_of(x[0], x[1])]));
    let sol_lift = evolve(&plan, u0, demo.horizon, None, &SolveOptions::default())?;
    let lifted = sol_lift.value_at(&[v0, 0.0]);

    let s = sup_on(|z| coeffs.sigma[0].eval(&[z]), demo.z0 - 30.0, demo.z0 + 30.0);
    let zgrid = Grid::centered(
        &[demo.z0],
        &[Grid::truncation_radius(0.0, drift_bound * s, s * s * amax, demo.horizon) + 4.0],
        opts.dx,
    )?;
    let wg = build_weak_generator(coeffs, &zgrid, 100, 0)?;
    let sol = crate::pde::solve_cauchy(&wg.spec, psi, demo.horizon, &zgrid, None, &SolveOptions::default())?;
    Ok((lifted, sol.value_at(&[demo.z0]), opts.dx, sol_lift.dt.max(sol.dt)))
}

/// End-to-end weak-solution pipeline for the d = 1 coefficients.
pub fn weak_solution_demo(coeffs: &SdeCoefficients, demo: &DemoOptions) -> Result<ResidualReport> {
    if coeffs.dim != 1 {
        return Err(Error::invalid("weak_solution_demo runs in one dimension"));
    }
    let t = demo.horizon;
    let z0 = demo.z0;
    let mut children = Vec::new();

    let search = Grid::centered(&[z0], &[20.0], 0.05)?;
    let wg = build_weak_generator(coeffs, &search, 500, demo.seed)?;
    children.push(wg.report.clone());

    let n_opts = NCheckOptions {
        z0: vec![z0],
        ..demo.lift.clone()
    };
    let mut n_reports = Vec::new();
    for (p, eta) in [(0.0, 0.0), (1.0, 0.0), (0.0, 2.0), (0.5, -1.0)] {
        let mut r = check_n_martingale(coeffs, &[p], &[eta], t, &n_opts)?;
        r.check = format!("n-martingale(p={p},eta={eta})");
        n_reports.push(r);
    }
    children.push(ResidualReport::aggregate("n-martingale", n_reports));

    let amax = coeffs.gbar.iter().map(|a| a[(0, 0)]).fold(0.0, f64::max);
    let amin = coeffs.gbar.iter().map(|a| a[(0, 0)]).fold(f64::INFINITY, f64::min);
    let lift = Arc::new(LampertiLift::new(coeffs, z0 - 40.0, z0 + 40.0)?);
    let v0 = lift.map.forward(z0);
    let drift_bound = {
        let s_lo = (0..=400)
            .map(|i| coeffs.sigma[0].eval(&[z0 - 30.0 + 60.0 * i as f64 / 400.0]).abs())
            .fold(f64::INFINITY, f64::min);
        let b = sup_on(|z| coeffs.drift[0].eval(&[z]), z0 - 30.0, z0 + 30.0);
        let r = sup_on(|z| coeffs.r[0].eval(&[z]), z0 - 30.0, z0 + 30.0);
        let ds = sup_on(
            |z| lift.dsigma.eval(&[z]),
            z0 - 30.0,
            z0 + 30.0,
        );
        b / s_lo + amax * (r / s_lo + 0.5 * ds)
    };
    let mut corollary = Vec::new();
    for (name, phi) in [
        ("b-symmetric(+B)", "x2"),
        ("b-symmetric(-B)", "-x2"),
        ("b-squared-minus-upper", "x2^2"),
        ("lower-minus-b-squared", "-x2^2"),
    ] {
        let fx = lift_fixture(&lift, name, phi, [v0, 0.0], drift_bound, amax, demo)?;
        corollary.push(martingale_residual(&fx)?);
    }
    children.push(ResidualReport::aggregate("corollary", corollary));

    let psi = Payoff::parse("cos(z)", 1)?;
    let coarse = lifted_vs_reduced(coeffs, &lift, &psi, drift_bound, amax, demo, 0.5)?;
    let fine = lifted_vs_reduced(coeffs, &lift, &psi, drift_bound, amax, demo, 1.0)?;
    let c = (coarse.0 - coarse.1).abs() / (coarse.2 + coarse.3);
    let cross = ResidualReport::new(
        "lift-vs-reduced",
        (fine.0 - fine.1).abs(),
        SchemeBudget::new(c.max(demo.budget.constant)).tolerance(fine.2, fine.3),
    )
    .with_param("lifted", fine.0)
    .with_param("reduced", fine.1)
    .with_param("coarse_gap", (coarse.0 - coarse.1).abs());
    children.push(cross);

    let mut rt = 0.0f64;
    let mut quad = Vec::new();
    for &steps in &demo.refinement_steps {
        let n = (steps as f64 * t).round().max(1.0) as usize;
        let paths = simulate_paths(coeffs, &[z0], t, n, 8, demo.seed, ControlSchedule::RandomPerStep)?;
        let mut acc = 0.0;
        for p in &paths {
            let rec = reconstruct_b(p, coeffs)?;
            rt = rt.max(round_trip_residual(p, &rec, coeffs));
            acc += quad_b_residual(&rec);
        }
        quad.push(acc / paths.len() as f64);
    }
    children.push(ResidualReport::new("round-trip", rt, 1e-12));
    let decreasing = quad.windows(2).all(|w| w[1] < w[0]);
    let mut q = ResidualReport::predicate("quad-b-refinement", decreasing);
    for (s, v) in demo.refinement_steps.iter().zip(&quad) {
        q = q.with_note(format!("steps={s} residual={v:e}"));
    }
    children.push(q);

    let mut moments = Vec::new();
    for (label, schedule, target) in [
        ("upper", ControlSchedule::Constant(argmax(coeffs)), Some(amax * t)),
        ("lower", ControlSchedule::Constant(argmin(coeffs)), Some(amin * t)),
        ("switching", ControlSchedule::RandomPerStep, None),
    ] {
        let paths = simulate_paths(
            coeffs,
            &[z0],
            t,
            demo.moment_steps,
            demo.n_paths,
            demo.seed ^ 0x5eed,
            schedule,
        )?;
        let mut ends = Vec::with_capacity(paths.len());
        for p in &paths {
            ends.push(reconstruct_b(p, coeffs)?.b.terminal()[0]);
        }
        let (m1, se1) = mean_se(ends.iter().copied());
        let (m2, se2) = mean_se(ends.iter().map(|b| b * b));
        moments.push(
            ResidualReport::new(format!("{label}-mean"), m1.abs(), 3.0 * se1)
                .with_param("mean", m1),
        );
        let excess = match target {
            Some(v) => (m2 - v).abs(),
            None => (m2 - amax * t).max(amin * t - m2).max(0.0),
        };
        moments.push(
            ResidualReport::new(format!("{label}-second-moment"), excess, 3.0 * se2)
                .with_param("mean", m2),
        );
    }
    children.push(ResidualReport::aggregate("b-moments", moments));

    Ok(ResidualReport::aggregate("weak-solution", children)
        .with_param("horizon", t)
        .with_param("z0", z0)
        .with_param("seed", demo.seed as f64))
}

fn argmax(c: &SdeCoefficients) -> usize {
    (0..c.gbar.len())
        .max_by(|&i, &j| c.gbar[i].trace().total_cmp(&c.gbar[j].trace()))
        .unwrap_or(0)
}

fn argmin(c: &SdeCoefficients) -> usize {
    (0..c.gbar.len())
        .min_by(|&i, &j| c.gbar[i].trace().total_cmp(&c.gbar[j].trace()))
        .unwrap_or(0)
}

pub(crate) fn mean_se(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = xs.collect();
    let n = v.len() as f64;
    let mean = crate::oracle::pairwise_sum(&v) / n;
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let var = crate::oracle::pairwise_sum(&dev) / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn identity_coefficients_reduce_to_g_heat() {
        let c = fixtures::weak_sde_identity();
        let g = fixtures::g_heat();
        for (p, a) in [(0.0, 2.0), (1.0, -2.0), (-0.4, 0.7)] {
            let lhs = c.weak_generator_value(
                &[0.3],
                &DVector::from_element(1, p),
                &DMatrix::from_element(1, 1, a),
            );
            assert!((lhs - g.evaluate(&[0.3], &[p], &[a]).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn formula_instances() {
        let c = SdeCoefficients::scalar("0", "0", "2", 0.25, 1.0).unwrap();
        let v = c.weak_generator_value(&[0.0], &DVector::zeros(1), &DMatrix::from_element(1, 1, 1.5));
        assert!((v - c.gbar_value(&DMatrix::from_element(1, 1, 6.0))).abs() < 1e-15);

        let c = SdeCoefficients::scalar("0", "0.3", "1", 0.25, 1.0).unwrap();
        let v = c.weak_generator_value(&[0.0], &DVector::from_element(1, 1.0), &DMatrix::zeros(1, 1));
        assert!((v - 0.3).abs() < 1e-15);
    }

    #[test]
    fn linear_controls_match_formula() {
        let c = SdeCoefficients::scalar("0.1", "0.2 * cos(z)", "1 + 0.1 * sin(z)", 0.25, 1.0).unwrap();
        let spec = build_weak_generator(&c, &Grid::uniform_1d(-5.0, 5.0, 101).unwrap(), 100, 1)
            .unwrap()
            .spec;
        for z in [-1.0, 0.4, 2.0] {
            for (p, a) in [(1.0, 0.5), (-2.0, -3.0), (0.3, 0.0)] {
                let pv = DVector::from_element(1, p);
                let am = DMatrix::from_element(1, 1, a);
                let direct = c.weak_generator_value(&[z], &pv, &am);
                assert!((spec.evaluate_forms(&[z], &pv, &am) - direct).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn singular_sigma_rejected_with_witness() {
        let c = SdeCoefficients::scalar("0", "0", "z", 0.25, 1.0).unwrap();
        match build_weak_generator(&c, &Grid::uniform_1d(-1.0, 1.0, 21).unwrap(), 10, 0) {
            Err(Error::Singular { node, .. }) => assert!(node[0].abs() < 1e-12),
            other => panic!("expected singular, got {other:?}"),
        }
    }

    #[test]
    fn lamperti_round_trip() {
        let s = Expr::parse("1 + 0.1 * sin(z)").unwrap();
        let m = LampertiMap::new(&s, -10.0, 10.0, 1e-3).unwrap();
        for z in [-9.0, -0.3, 0.0, 2.7, 12.0] {
            assert!((m.inverse(m.forward(z)) - z).abs() < 1e-10);
        }
        // F(z) − F(0) for σ ≡ 1 + 0.1 sin z against midpoint quadrature
        let n = 200_000;
        let h = 2.0 / n as f64;
        let q: f64 = (0..n).map(|i| h / s.eval(&[(i as f64 + 0.5) * h])).sum();
        assert!((m.forward(2.0) - m.forward(0.0) - q).abs() < 1e-9);
    }

    #[test]
    fn n_martingale_trivial_and_quadratic() {
        let c = fixtures::weak_sde_demo();
        let r = check_n_martingale(&c, &[0.0], &[0.0], 0.5, &NCheckOptions::default()).unwrap();
        assert_eq!(r.residual, 0.0);
        let r = check_n_martingale(&c, &[0.5], &[-1.0], 0.5, &NCheckOptions::default()).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn psd_root_of_control() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = crate::generator::psd_sqrt(&a).unwrap();
        assert!((&r * &r - a).norm() < 1e-12);
    }
}

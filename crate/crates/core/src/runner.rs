//! Suite dispatch and report emission.
//!
//! `report.jsonl` holds a header line and one line per suite and is a pure
//! function of the config text, the seed, the grid scale and the suite
//! list. Wall-clock timings go to `timings.jsonl`.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Suite};
use crate::error::{Error, Result};
use crate::expectation::{
    check_expectation_properties, conditional, inconsistency_demo, inconsistency_demo_numeric,
    recursion, CylinderFunctional, ExpectationOptions,
};
use crate::expr::Expr;
use crate::fixtures;
use crate::generator::{check_axioms, check_domination, GeneratorSpec, SamplePlan};
use crate::grid::{Grid, Payoff, Window};
use crate::gsde::{weak_solution_demo, DemoOptions};
use crate::martingale::{
    frozen_source_convergence, martingale_refinement, martingale_residual, MartingaleFixture,
    Tolerance,
};
use crate::oracle::{agreement_report, lower_bound, lower_bound_report, standard_family, McOptions};
use crate::path::{reconstruct_b, simulate_path, ControlSchedule};
use crate::pde::{
    check_comparison, check_solution_properties, convergence_study, solve_cauchy,
    PropertyFixture, Reference, SchemeBudget, SolveOptions,
};
use crate::report::ResidualReport;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub suites: Vec<Suite>,
    /// Overrides `[run] seed`.
    pub seed: Option<u64>,
    /// Multiplies the node spacing count of every grid (> 1 refines).
    pub grid_scale: f64,
    pub parallel: bool,
}

/// A CSV side file produced by a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub report: ResidualReport,
    pub artifacts: Vec<Artifact>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub config_hash: String,
    pub version: &'static str,
    pub seed: u64,
    pub grid_scale: f64,
    pub budget: SchemeBudget,
    pub suites: Vec<SuiteOutcome>,
}

#[derive(Serialize)]
struct HeaderLine<'a> {
    kind: &'static str,
    config_hash: &'a str,
    version: &'a str,
    seed: u64,
    grid_scale: f64,
    budget_constant: f64,
    suites: Vec<&'static str>,
}

#[derive(Serialize)]
struct SuiteLine<'a> {
    kind: &'static str,
    suite: &'static str,
    passed: bool,
    artifacts: Vec<&'a str>,
    report: &'a ResidualReport,
}

#[derive(Serialize)]
struct TimingLine {
    suite: &'static str,
    seconds: f64,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.report.passed)
    }

    /// Dotted paths of failing checks with residual and tolerance.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.suites {
            for f in s.report.failures() {
                out.push(format!("{}: {f}", s.suite.name()));
            }
            if !s.report.passed && s.report.failures().is_empty() {
                out.push(format!("{}: {}", s.suite.name(), s.report.check));
            }
            for n in &s.report.notes {
                if n.starts_with("error:") || n.starts_with("witness") {
                    out.push(format!("{}: {n}", s.suite.name()));
                }
            }
        }
        out
    }

    /// The deterministic report, one JSON object per line.
    pub fn report_jsonl(&self) -> String {
        let mut out = String::new();
        let header = HeaderLine {
            kind: "header",
            config_hash: &self.config_hash,
            version: self.version,
            seed: self.seed,
            grid_scale: self.grid_scale,
            budget_constant: self.budget.constant,
            suites: self.suites.iter().map(|s| s.suite.name()).collect(),
        };
        out.push_str(&serde_json::to_string(&header).expect("serializable"));
        out.push('\n');
        for s in &self.suites {
            let line = SuiteLine {
                kind: "suite",
                suite: s.suite.name(),
                passed: s.report.passed,
                artifacts: s.artifacts.iter().map(|a| a.name.as_str()).collect(),
                report: &s.report,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn timings_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            let line = TimingLine {
                suite: s.suite.name(),
                seconds: s.seconds,
            };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Writes `report.jsonl`, `timings.jsonl` and every artifact into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.jsonl"), self.report_jsonl())?;
        std::fs::write(dir.join("timings.jsonl"), self.timings_jsonl())?;
        for s in &self.suites {
            for a in &s.artifacts {
                std::fs::write(dir.join(&a.name), &a.bytes)?;
            }
        }
        Ok(())
    }
}

/// Scheme constant from the singleton heat operator on `cos x`, `T = 1`,
/// `nx ∈ {101, 201, 401}` on `[−10, 10]`.
pub fn calibrated_budget() -> Result<SchemeBudget> {
    let grids = [101, 201, 401]
        .iter()
        .map(|&n| Grid::uniform_1d(-10.0, 10.0, n))
        .collect::<Result<Vec<_>>>()?;
    let table = convergence_study(
        &fixtures::heat_singleton(),
        &Payoff::parse("cos(x)", 1)?,
        1.0,
        &grids,
        &[0.0],
        Reference::Exact((-0.5f64).exp()),
    )?;
    Ok(SchemeBudget::from_table(&table))
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Validates `config` for the selected suites and runs them.
pub fn run(config: &RunConfig, text: &str, opts: &RunOptions) -> Result<RunReport> {
    if !(opts.grid_scale > 0.0 && opts.grid_scale.is_finite()) {
        return Err(Error::Config("grid scale must be positive".into()));
    }
    config.validate(&opts.suites)?;
    let seed = opts.seed.unwrap_or(config.run.seed);
    let budget = match config.run.budget_constant {
        Some(c) if c > 0.0 => SchemeBudget::new(c),
        Some(_) => return Err(Error::Config("budget_constant must be positive".into())),
        None => calibrated_budget()?,
    };
    let ctx = Ctx {
        config,
        gens: config.generators()?,
        seed,
        scale: opts.grid_scale,
        budget,
    };
    let exec = |suite: &Suite| {
        let start = Instant::now();
        let (report, artifacts) = match ctx.suite(*suite) {
            Ok(v) => v,
            Err(e) => (
                ResidualReport::predicate(suite.name(), false).with_note(format!("error: {e}")),
                Vec::new(),
            ),
        };
        SuiteOutcome {
            suite: *suite,
            report,
            artifacts,
            seconds: start.elapsed().as_secs_f64(),
        }
    };
    let suites: Vec<SuiteOutcome> = if opts.parallel {
        opts.suites.par_iter().map(exec).collect()
    } else {
        opts.suites.iter().map(exec).collect()
    };
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.update(seed.to_le_bytes());
    hasher.update(opts.grid_scale.to_le_bytes());
    Ok(RunReport {
        config_hash: hex::encode(hasher.finalize()),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        grid_scale: opts.grid_scale,
        budget,
        suites,
    })
}

struct Ctx<'a> {
    config: &'a RunConfig,
    gens: std::collections::BTreeMap<String, GeneratorSpec>,
    seed: u64,
    scale: f64,
    budget: SchemeBudget,
}

type SuiteResult = Result<(ResidualReport, Vec<Artifact>)>;

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

impl Ctx<'_> {
    fn gen(&self, name: &str) -> Result<GeneratorSpec> {
        RunConfig::generator(&self.gens, name)
    }

    fn expectation_options(&self, dx: Option<f64>) -> ExpectationOptions {
        let base = ExpectationOptions::default();
        ExpectationOptions {
            dx: dx.unwrap_or(base.dx) / self.scale,
            ..base
        }
    }

    fn suite(&self, s: Suite) -> SuiteResult {
        match s {
            Suite::Axioms => self.axioms(),
            Suite::Domination => self.domination(),
            Suite::Solve => self.solve(),
            Suite::Properties => self.properties(),
            Suite::Expectation => self.expectation(),
            Suite::Martingale => self.martingale(),
            Suite::Gsde => self.gsde(),
            Suite::Oracle => self.oracle(),
        }
    }

    fn axioms(&self) -> SuiteResult {
        let s = self.config.axioms.as_ref().expect("validated");
        let mut children = Vec::new();
        for n in &s.generators {
            let g = self.gen(n)?;
            let mut r = check_axioms(&g, &SamplePlan::new(g.dim, s.samples, self.seed))?;
            r.check = format!("axioms({n})");
            children.push(r);
        }
        Ok((ResidualReport::aggregate("axioms", children), Vec::new()))
    }

    fn domination(&self) -> SuiteResult {
        let s = self.config.domination.as_ref().expect("validated");
        let gt = self.gen(&s.generator)?;
        let g = match &s.dominating {
            Some(d) => self.gen(d)?,
            None => *gt.dominating.clone().expect("validated"),
        };
        let rep = check_domination(&gt, &g, &SamplePlan::new(gt.dim, s.samples, self.seed))?;
        let r = rep.to_residual(&format!("domination({})", s.generator));
        Ok((r, Vec::new()))
    }

    fn solve(&self) -> SuiteResult {
        let s = self.config.solve.as_ref().expect("validated");
        let g = self.gen(&s.generator)?;
        let grid = self.config.grid_for(&s.grid, self.scale)?;
        let phi = Payoff::parse(&s.payoff, g.dim)?;
        let sol = solve_cauchy(&g, &phi, s.horizon, &grid, None, &SolveOptions::default())?;
        let v = sol.value_at(&s.eval_at);
        let r = match s.expected {
            Some(e) => ResidualReport::new("solve", (v - e).abs(), s.tolerance.unwrap_or(1e-2))
                .with_param("expected", e),
            None => ResidualReport::predicate("solve", v.is_finite()),
        }
        .with_param("value", v)
        .with_param("dx", grid.min_dx())
        .with_param("dt", sol.dt)
        .with_param("steps", sol.steps as f64);
        let name = s.csv.clone().unwrap_or_else(|| "solve_u.csv".into());
        let bytes = csv_bytes(|b| sol.terminal.write_csv(b))?;
        Ok((r, vec![Artifact { name, bytes }]))
    }

    fn properties(&self) -> SuiteResult {
        let s = self.config.properties.as_ref().expect("validated");
        let g = self.gen(&s.generator)?;
        let grid = self.config.grid_for(&s.grid, self.scale)?;
        let phi = Payoff::parse(&s.phi, g.dim)?;
        let psi = Payoff::parse(&s.psi, g.dim)?;
        let fx = PropertyFixture {
            phi: &phi,
            psi: &psi,
            shift: s.shift,
            scale: s.scale,
            horizon: s.horizon,
        };
        let mut children = vec![check_solution_properties(&g, &fx, &grid, &self.budget)?];
        for (i, [a, b]) in s.comparison.iter().enumerate() {
            let mut r = check_comparison(
                &g,
                &Payoff::parse(a, g.dim)?,
                &Payoff::parse(b, g.dim)?,
                s.horizon,
                &grid,
            )?;
            r.check = format!("comparison[{i}]");
            children.push(r);
        }
        Ok((ResidualReport::aggregate("properties", children), Vec::new()))
    }

    fn expectation(&self) -> SuiteResult {
        let s = self.config.expectation.as_ref().expect("validated");
        let opts = self.expectation_options(s.dx);
        let mut children = Vec::new();
        let mut artifacts = Vec::new();
        for (i, f) in s.fixture.iter().enumerate() {
            let g = self.gen(&f.generator)?;
            let xi = CylinderFunctional::new(f.times.clone(), Expr::parse(&f.payoff)?, f.x0.clone())?;
            let rec = recursion(&g, &xi, &opts)?;
            let name = format!("expectation[{i}]");
            let r = match f.expected {
                Some(e) => ResidualReport::new(
                    name,
                    (rec.value - e).abs(),
                    f.tolerance.unwrap_or(self.budget.tolerance(rec.dx, rec.dt)),
                )
                .with_param("expected", e),
                None => ResidualReport::predicate(name, rec.value.is_finite()),
            };
            children.push(r.with_param("value", rec.value).with_param("dt", rec.dt));
            if let Some(t) = f.conditional_at {
                let cv = conditional(&g, &xi, t, &opts)?;
                artifacts.push(Artifact {
                    name: format!("conditional_{i}.csv"),
                    bytes: csv_bytes(|b| cv.write_csv(b))?,
                });
            }
        }
        if let Some(p) = &s.properties {
            let g = self.gen(&p.generator)?;
            children.push(check_expectation_properties(&g, p.x0, &opts, &self.budget)?);
        }
        if let Some(rm) = &s.remark {
            let demo = if rm.numeric {
                inconsistency_demo_numeric(rm.t1, rm.t2, rm.c, rm.x0)?
            } else {
                inconsistency_demo(rm.t1, rm.t2, rm.c, rm.x0)?
            };
            children.push(demo.to_report());
        }
        Ok((ResidualReport::aggregate("expectation", children), artifacts))
    }

    fn martingale(&self) -> SuiteResult {
        let s = self.config.martingale.as_ref().expect("validated");
        let mut children = Vec::new();
        for f in &s.fixture {
            let g = self.gen(&f.generator)?;
            let d = g.dim;
            let fx = MartingaleFixture {
                name: format!("martingale({}, {})", f.generator, f.phi),
                generator: Arc::new(g),
                phi: Payoff::parse(&f.phi, d)?,
                horizon: f.horizon,
                grid: self.config.grid_for(&s.grid, self.scale)?,
                window: Window {
                    lo: vec![-f.window; d],
                    hi: vec![f.window; d],
                },
                tolerance: match f.tolerance {
                    Some(t) => Tolerance::Fixed(t),
                    None => Tolerance::Budget(self.budget),
                },
            };
            children.push(martingale_residual(&fx)?);
            if f.refine {
                children.push(martingale_refinement(&fx, &[1, 2], 1.5)?);
            }
        }
        let opts = self.expectation_options(None);
        for f in &s.frozen {
            let g = self.gen(&f.generator)?;
            let (r, _) = frozen_source_convergence(
                &g,
                &Expr::parse(&f.phi)?,
                &Expr::parse(&f.f)?,
                f.horizon,
                f.x0,
                &[1, 2, 3],
                &opts,
            )?;
            children.push(r);
        }
        Ok((ResidualReport::aggregate("martingale", children), Vec::new()))
    }

    fn gsde(&self) -> SuiteResult {
        let s = self.config.gsde.as_ref().expect("validated");
        let coeffs = self.config.sde(s)?;
        let base = DemoOptions::default();
        let lift = crate::gsde::NCheckOptions {
            dx: base.lift.dx / self.scale,
            dy: base.lift.dy / self.scale,
            ..base.lift.clone()
        };
        let demo = DemoOptions {
            horizon: s.horizon,
            z0: s.z0,
            n_paths: s.n_paths.unwrap_or(base.n_paths),
            seed: self.seed,
            budget: self.budget,
            lift,
            ..base
        };
        let report = weak_solution_demo(&coeffs, &demo)?;
        let mut artifacts = Vec::new();
        if s.path_csv {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(self.seed);
            let path = simulate_path(&coeffs, &[s.z0], s.horizon, 1000, ControlSchedule::RandomPerStep, &mut rng)?;
            let rec = reconstruct_b(&path, &coeffs)?;
            artifacts.push(Artifact {
                name: "gsde_z.csv".into(),
                bytes: csv_bytes(|b| path.write_csv(b, "z"))?,
            });
            artifacts.push(Artifact {
                name: "gsde_b.csv".into(),
                bytes: csv_bytes(|b| rec.b.write_csv(b, "b"))?,
            });
        }
        Ok((report, artifacts))
    }

    fn oracle(&self) -> SuiteResult {
        let s = self.config.oracle.as_ref().expect("validated");
        let g = self.gen(&s.generator)?;
        let n_controls = g.control_points().expect("validated").len();
        let opts = self.expectation_options(None);
        let mc = McOptions {
            dt: s.dt,
            n_paths: s.n_paths,
            seed: self.seed,
        };
        let mut children = Vec::new();
        for (i, f) in s.fixture.iter().enumerate() {
            let xi = CylinderFunctional::new(f.times.clone(), Expr::parse(&f.payoff)?, f.x0.clone())?;
            let rec = recursion(&g, &xi, &opts)?;
            let tol = self.budget.tolerance(rec.dx, rec.dt);
            let horizon = *f.times.last().expect("non-empty");
            let family = standard_family(n_controls, horizon, f.x0[0]);
            let lb = lower_bound(&g, &xi, &family, &mc)?;
            children.push(
                lower_bound_report(&format!("lower-bound[{i}]"), &lb.best, rec.value, tol)
                    .with_param("best_policy", lb.best_policy as f64),
            );
            if n_controls == 1 {
                children.push(agreement_report(&format!("agreement[{i}]"), &lb.best, rec.value, tol));
            }
        }
        Ok((ResidualReport::aggregate("oracle", children), Vec::new()))
    }
}

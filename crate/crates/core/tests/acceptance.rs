//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nonlin_expect::config::{RunConfig, Suite};
use nonlin_expect::expectation::{
    check_expectation_properties, expectation, inconsistency_demo, inconsistency_demo_numeric,
    CylinderFunctional, ExpectationOptions,
};
use nonlin_expect::expr::Expr;
use nonlin_expect::fixtures;
use nonlin_expect::generator::{Generator, GeneratorSpec};
use nonlin_expect::grid::{Grid, Payoff, Window};
use nonlin_expect::gsde::{weak_solution_demo, DemoOptions};
use nonlin_expect::martingale::{
    frozen_source_convergence, martingale_refinement, martingale_residual, MartingaleFixture,
    Tolerance,
};
use nonlin_expect::oracle::{lower_bound, simulate, standard_family, McOptions, Policy};
use nonlin_expect::path::{ito_residual, simulate_paths, ControlSchedule, DiscretePath, ItoProcess};
use nonlin_expect::pde::{
    check_comparison, check_solution_properties, convergence_study, solve_cauchy, PropertyFixture,
    Reference, SchemeBudget, SolveOptions,
};
use nonlin_expect::runner::{calibrated_budget, run, RunOptions};

type Outcome = Result<String, String>;

fn ok_if(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn line() -> Grid {
    Grid::uniform_1d(-10.0, 10.0, 401).expect("grid")
}

fn c1_gheat_quadratics() -> Outcome {
    let g = fixtures::g_heat();
    let mut detail = Vec::new();
    let mut ok = true;
    for (src, want) in [("x^2", 1.0), ("-x^2", -0.25)] {
        let t0 = Instant::now();
        let s = solve_cauchy(&g, &Payoff::parse(src, 1).map_err(err)?, 1.0, &line(), None, &SolveOptions::default())
            .map_err(err)?;
        let secs = t0.elapsed().as_secs_f64();
        let v = s.value_at(&[0.0]);
        ok &= (v - want).abs() <= 1e-2 && secs <= 5.0;
        detail.push(format!("{src}: u(1,0)={v:.12} ({secs:.3}s)"));
    }
    ok_if(ok, detail.join("; "))
}

fn c2_convergence(budget: &mut Option<SchemeBudget>) -> Outcome {
    let grids = [101, 201, 401]
        .iter()
        .map(|&n| Grid::uniform_1d(-10.0, 10.0, n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let table = convergence_study(
        &fixtures::heat_singleton(),
        &Payoff::parse("cos(x)", 1).map_err(err)?,
        1.0,
        &grids,
        &[0.0],
        Reference::Exact((-0.5f64).exp()),
    )
    .map_err(err)?;
    *budget = Some(SchemeBudget::from_table(&table));
    let errs: Vec<String> = table.rows.iter().map(|r| format!("{:.3e}", r.error)).collect();
    ok_if(
        table.monotone && table.min_order >= 0.8,
        format!("errors [{}], min order {:.3}, C = {:.3e}", errs.join(", "), table.min_order, table.constant),
    )
}

fn property_fixtures() -> Vec<(&'static str, GeneratorSpec)> {
    let gh = fixtures::g_heat();
    vec![
        ("g-heat", gh.clone().with_dominating(gh).expect("dim")),
        ("isaacs-toy", fixtures::isaacs_toy()),
        ("isaacs-drifted", fixtures::isaacs_drifted()),
    ]
}

fn c3_exactness(budget: &SchemeBudget) -> Outcome {
    let grid = line();
    let mut worst = 0.0f64;
    let mut ok = true;
    let p = |s: &str| Payoff::parse(s, 1).expect("payoff");
    let pairs: [(&str, GeneratorSpec, &str, &str); 4] = [
        ("g-heat", fixtures::g_heat(), "x^2 - 1", "x^2"),
        ("isaacs-toy", fixtures::isaacs_toy(), "-abs(x)", "0"),
        ("isaacs-toy", fixtures::isaacs_toy(), "cos(x)", "cos(x)"),
        ("drifted", fixtures::drifted_sublinear(), "sin(x) - 2", "sin(x) + 0.1 * x^2"),
    ];
    for (_, g, a, b) in &pairs {
        let r = check_comparison(g, &p(a), &p(b), 1.0, &grid).map_err(err)?;
        ok &= r.passed && r.residual <= 1e-9;
        worst = worst.max(r.residual);
    }
    for (_, g) in property_fixtures() {
        let fx = PropertyFixture {
            phi: &p("x^2"),
            psi: &p("cos(x)"),
            shift: 5.0,
            scale: 2.0,
            horizon: 1.0,
        };
        let r = check_solution_properties(&g, &fx, &grid, budget).map_err(err)?;
        for c in r.children.iter().filter(|c| c.check != "domination") {
            ok &= c.passed && c.residual <= 1e-9;
            worst = worst.max(c.residual);
        }
    }
    ok_if(ok, format!("worst comparison/shift/homogeneity residual {worst:.3e}"))
}

fn c4_domination(budget: &SchemeBudget) -> Outcome {
    let grid = line();
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, g) in property_fixtures().into_iter().skip(1) {
        let phi = Payoff::parse("x^2", 1).map_err(err)?;
        let psi = Payoff::parse("cos(x)", 1).map_err(err)?;
        let fx = PropertyFixture {
            phi: &phi,
            psi: &psi,
            shift: 5.0,
            scale: 2.0,
            horizon: 1.0,
        };
        let r = check_solution_properties(&g, &fx, &grid, budget).map_err(err)?;
        let d = r.children.iter().find(|c| c.check == "domination").expect("child");
        ok &= d.passed;
        detail.push(format!("{name}: excess {:.3e} <= {:.3e}", d.residual, d.tolerance));
    }
    ok_if(ok, detail.join("; "))
}

fn c5_expectation(budget: &SchemeBudget) -> Outcome {
    let t0 = Instant::now();
    let r = check_expectation_properties(&fixtures::isaacs_toy(), 0.3, &ExpectationOptions::default(), budget)
        .map_err(err)?;
    let parts: Vec<String> = r
        .children
        .iter()
        .map(|c| format!("{}={}", c.check, if c.passed { "ok" } else { "FAIL" }))
        .collect();
    let detail = format!("{} ({:.1}s)", parts.join(" "), t0.elapsed().as_secs_f64());
    if !r.passed {
        return Err(format!("{detail}; failures: {:?}", r.failures()));
    }
    Ok(detail)
}

fn c6_remark() -> Outcome {
    let d = inconsistency_demo(0.5, 1.0, 1.0, 2.0).map_err(err)?;
    let n = inconsistency_demo_numeric(0.5, 1.0, 1.0, 2.0).map_err(err)?;
    let exact = (d.bare - 1.0).abs() <= 1e-12
        && (d.recursion - 3.0).abs() <= 1e-12
        && (d.mismatch - 2.0).abs() <= 1e-12
        && (d.mismatch - d.t2 * d.x0).abs() <= 1e-12;
    ok_if(
        exact && n.to_report().passed,
        format!(
            "values ({}, {}), mismatch {}, solver recursion {:.12}",
            d.bare,
            d.recursion,
            d.mismatch,
            n.numeric.unwrap_or(f64::NAN)
        ),
    )
}

fn mfix(gen: Arc<dyn Generator>, phi: &str, tol: Tolerance) -> MartingaleFixture {
    MartingaleFixture {
        name: phi.into(),
        generator: gen,
        phi: Payoff::parse(phi, 1).expect("payoff"),
        horizon: 1.0,
        grid: line(),
        window: Window {
            lo: vec![-2.0],
            hi: vec![2.0],
        },
        tolerance: tol,
    }
}

fn c7_martingale(budget: &SchemeBudget) -> Outcome {
    let mut ok = true;
    let mut worst_quad = 0.0f64;
    let quads: [(Arc<dyn Generator>, &str); 5] = [
        (Arc::new(fixtures::g_heat()), "x^2"),
        (Arc::new(fixtures::g_heat()), "-0.5 * x^2 + 0.3 * x"),
        (Arc::new(fixtures::drifted_sublinear()), "0.5 * 2 * x^2 - x"),
        (Arc::new(fixtures::isaacs_toy()), "0.75 * x^2 + 0.3 * x"),
        (Arc::new(fixtures::isaacs_drifted()), "-x^2 + x"),
    ];
    for (g, phi) in quads {
        let r = martingale_residual(&mfix(g, phi, Tolerance::Fixed(1e-9))).map_err(err)?;
        ok &= r.passed;
        worst_quad = worst_quad.max(r.residual);
    }
    let toy: Arc<dyn Generator> = Arc::new(fixtures::isaacs_toy());
    let fx = mfix(toy, "cos(x)", Tolerance::Budget(*budget));
    let r = martingale_residual(&fx).map_err(err)?;
    let refine = martingale_refinement(&fx, &[1, 2], 1.5).map_err(err)?;
    ok &= r.passed && refine.passed;
    ok_if(
        ok,
        format!(
            "quadratic worst {worst_quad:.3e}; isaacs cos residual {:.3e} <= {:.3e}; halving ratio {:.3}",
            r.residual,
            r.tolerance,
            refine.params["worst_ratio"]
        ),
    )
}

fn c8_frozen() -> Outcome {
    let g = fixtures::g_heat();
    let mut ok = true;
    let mut detail = Vec::new();
    for f in ["z", "cos(z)"] {
        let (r, d) = frozen_source_convergence(
            &g,
            &Expr::parse("z^2").map_err(err)?,
            &Expr::parse(f).map_err(err)?,
            1.0,
            0.5,
            &[1, 2, 3],
            &ExpectationOptions::default(),
        )
        .map_err(err)?;
        ok &= r.passed;
        let ds: Vec<String> = d.iter().map(|v| format!("{v:.3e}")).collect();
        detail.push(format!("f={f}: [{}]", ds.join(", ")));
    }
    ok_if(ok, detail.join("; "))
}

fn c9_gsde() -> Outcome {
    let t0 = Instant::now();
    let r = weak_solution_demo(&fixtures::weak_sde_demo(), &DemoOptions::default()).map_err(err)?;
    let want = ["round-trip", "quad-b-refinement", "corollary"];
    let mut ok = true;
    let mut detail = Vec::new();
    for name in want {
        let c = r.children.iter().find(|c| c.check == name).ok_or(format!("missing {name}"))?;
        ok &= c.passed;
        detail.push(format!("{name}={}", if c.passed { "ok" } else { "FAIL" }));
    }
    let rest: Vec<String> = r.failures();
    detail.push(format!("other failures {rest:?} ({:.1}s)", t0.elapsed().as_secs_f64()));
    ok_if(ok, detail.join("; "))
}

fn subsample(p: &DiscretePath, every: usize) -> DiscretePath {
    let idx: Vec<usize> = (0..p.len()).step_by(every).collect();
    DiscretePath::new(
        idx.iter().map(|&i| p.times[i]).collect(),
        idx.iter().map(|&i| p.states[i].clone()).collect(),
    )
    .expect("path")
}

fn c10_ito() -> Outcome {
    let coeffs = fixtures::weak_sde_identity();
    let fine = simulate_paths(&coeffs, &[0.0], 1.0, 10_000, 8, 99, ControlSchedule::RandomPerStep).map_err(err)?;
    let mut ok = true;
    let mut exact_worst = 0.0f64;
    let lin = Payoff::parse("2 * x - 0.5", 1).map_err(err)?;
    let quad = Payoff::parse("x^2 - 3 * x", 1).map_err(err)?;
    let quartic = Payoff::parse("x^4", 1).map_err(err)?;
    let mut quartic_means = Vec::new();
    for every in [100, 10, 1] {
        let mut acc = 0.0;
        for p in &fine {
            let x = subsample(p, every);
            // with a drift only the formula is exact; ΣΔξ² picks up αβ Δt ΔX
            let drifted = ItoProcess {
                alpha: vec![Expr::parse("0.2 * cos(x)").map_err(err)?],
                ..ItoProcess::linear(1, 1, &[1.3])
            };
            let r = ito_residual(&x, None, &lin, &drifted, &[0.1], 1e-9).map_err(err)?;
            ok &= r.children[0].passed;
            exact_worst = exact_worst.max(r.children[0].residual);
            for (phi, beta) in [(&lin, 1.3), (&quad, 0.8)] {
                let r = ito_residual(&x, None, phi, &ItoProcess::linear(1, 1, &[beta]), &[0.1], 1e-9)
                    .map_err(err)?;
                ok &= r.passed;
                exact_worst = exact_worst.max(r.children[0].residual).max(r.children[1].residual);
            }
            let r = ito_residual(&x, None, &quartic, &ItoProcess::linear(1, 1, &[1.0]), &[0.0], f64::INFINITY)
                .map_err(err)?;
            acc += r.children[0].residual;
        }
        quartic_means.push(acc / fine.len() as f64);
    }
    let decreasing = quartic_means.windows(2).all(|w| w[1] < w[0]);
    ok &= decreasing;
    let q: Vec<String> = quartic_means.iter().map(|v| format!("{v:.3e}")).collect();
    ok_if(
        ok,
        format!("linear/quadratic worst {exact_worst:.3e}; x^4 residual over dt 1e-2,1e-3,1e-4: [{}]", q.join(", ")),
    )
}

fn c11_oracle(budget: &SchemeBudget) -> Outcome {
    let t0 = Instant::now();
    let eopts = ExpectationOptions::default();
    let mc = McOptions {
        dt: 0.01,
        n_paths: 100_000,
        seed: 2024,
    };
    let x1sq = CylinderFunctional::parse(vec![1.0], "x1^2", vec![0.0]).map_err(err)?;
    let neg = CylinderFunctional::parse(vec![1.0], "-x1^2", vec![0.0]).map_err(err)?;
    let mut ok = true;
    let mut detail = Vec::new();
    let tol = budget.tolerance(eopts.dx, 0.01);

    let single = fixtures::heat_singleton();
    let pde = expectation(&single, &x1sq, &eopts).map_err(err)?;
    let est = simulate(&single, &Policy::constant(0), &x1sq, &mc).map_err(err)?;
    ok &= (est.mean - pde).abs() <= 3.0 * est.se + tol;
    detail.push(format!("singleton mc {:.4}±{:.4} vs pde {pde:.4}", est.mean, est.se));

    let gh = fixtures::g_heat();
    let n = gh.control_points().expect("sublinear").len();
    for (xi, want) in [(&x1sq, 1.0), (&neg, -0.25)] {
        let lb = lower_bound(&gh, xi, &standard_family(n, 1.0, 0.0)[..n], &mc).map_err(err)?;
        ok &= (lb.best.mean - want).abs() <= 3.0 * lb.best.se + tol;
        detail.push(format!("best constant {:.4} (want {want})", lb.best.mean));
    }

    let corpus = [
        (vec![1.0], "x1^2"),
        (vec![1.0], "-x1^2"),
        (vec![1.0], "cos(x1)"),
        (vec![1.0], "max(x1, 0)"),
        (vec![0.5, 1.0], "(x2 - x1)^2"),
        (vec![0.5, 1.0], "x1 * x2 - x2^2"),
    ];
    let small = McOptions {
        n_paths: 20_000,
        ..mc
    };
    let mut violations = 0;
    let mut count = 0;
    for spec in [fixtures::g_heat(), fixtures::drifted_sublinear()] {
        let n = spec.control_points().expect("sublinear").len();
        for (times, src) in &corpus {
            let xi = CylinderFunctional::parse(times.clone(), src, vec![0.0]).map_err(err)?;
            let rec = nonlin_expect::expectation::recursion(&spec, &xi, &eopts).map_err(err)?;
            let lb = lower_bound(&spec, &xi, &standard_family(n, *times.last().unwrap(), 0.0), &small)
                .map_err(err)?;
            count += 1;
            if lb.best.mean > rec.value + 3.0 * lb.best.se + budget.tolerance(rec.dx, rec.dt) {
                violations += 1;
            }
        }
    }
    ok &= violations == 0;
    let secs = t0.elapsed().as_secs_f64();
    ok &= secs <= 60.0;
    detail.push(format!("lower-bound violations {violations}/{count} ({secs:.1}s)"));
    ok_if(ok, detail.join("; "))
}

fn c12_determinism() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/gheat.cfg");
    let text = std::fs::read_to_string(&path).map_err(err)?;
    let config = RunConfig::parse(&text).map_err(err)?;
    let suites = Suite::parse_list("all", &config).map_err(err)?;
    let opts = RunOptions {
        suites: suites.clone(),
        seed: None,
        grid_scale: 1.0,
        parallel: false,
    };
    let a = run(&config, &text, &opts).map_err(err)?;
    let b = run(&config, &text, &RunOptions { parallel: true, ..opts }).map_err(err)?;
    let dir_a = tempfile::tempdir().map_err(err)?;
    let dir_b = tempfile::tempdir().map_err(err)?;
    a.write(dir_a.path()).map_err(err)?;
    b.write(dir_b.path()).map_err(err)?;
    let mut same = a.report_jsonl() == b.report_jsonl();
    for entry in std::fs::read_dir(dir_a.path()).map_err(err)? {
        let name = entry.map_err(err)?.file_name();
        if name == "timings.jsonl" {
            continue;
        }
        let x = std::fs::read(dir_a.path().join(&name)).map_err(err)?;
        let y = std::fs::read(dir_b.path().join(&name)).map_err(err)?;
        same &= x == y;
    }
    ok_if(
        same,
        format!("{} suites, report {} bytes", suites.len(), a.report_jsonl().len()),
    )
}

fn main() {
    let mut budget = None;
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "g-heat quadratic oracle", c1_gheat_quadratics()));
    results.push((2, "convergence order", c2_convergence(&mut budget)));
    let budget = budget.or_else(|| calibrated_budget().ok()).unwrap_or(SchemeBudget::new(f64::NAN));
    results.push((3, "comparison, homogeneity, constant shift", c3_exactness(&budget)));
    results.push((4, "solution domination", c4_domination(&budget)));
    results.push((5, "expectation properties", c5_expectation(&budget)));
    results.push((6, "inconsistency counterexample", c6_remark()));
    results.push((7, "martingale residuals", c7_martingale(&budget)));
    results.push((8, "frozen-source convergence", c8_frozen()));
    results.push((9, "g-sde pipeline", c9_gsde()));
    results.push((10, "ito residuals", c10_ito()));
    results.push((11, "monte-carlo oracle", c11_oracle(&budget)));
    results.push((12, "determinism", c12_determinism()));
    let mut failed = 0;
    for (k, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {k:>2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {k:>2} FAIL  {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

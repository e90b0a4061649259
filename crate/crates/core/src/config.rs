//! Run configuration: TOML with one table per suite and a list of named
//! generators. Parsing and resolution are separate so that every reference,
//! expression and grid is checked before any suite runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::generator::{ControlPoint, GeneratorSpec, IsaacsEntry, IsaacsOrder, IsaacsSpec};
use crate::grid::{Grid, Payoff};
use crate::gsde::SdeCoefficients;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<String>,
    /// Scheme constant `C` of the budget `C (dx + dt)`; calibrated on the
    /// heat cosine study when absent.
    pub budget_constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlDecl {
    /// Row-major d×d.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorDecl {
    pub name: String,
    /// `sublinear`, `g-heat`, `isaacs` or `envelope`.
    pub kind: String,
    pub controls: Option<Vec<ControlDecl>>,
    pub sigma_lo_sq: Option<f64>,
    pub sigma_hi_sq: Option<f64>,
    pub n_gamma: Option<usize>,
    pub n_lambda: Option<usize>,
    /// `sup-inf` or `inf-sup`.
    pub order: Option<String>,
    /// One row-major σ per (γ, λ), γ-major.
    pub sigma: Option<Vec<Vec<String>>>,
    pub drift: Option<Vec<Vec<String>>>,
    pub lipschitz: Option<f64>,
    /// For `envelope`: the Isaacs generator whose sup over all pairs is taken.
    pub of: Option<String>,
    /// Name of a sublinear generator dominating this one.
    pub dominating: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridDecl {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nx: Vec<usize>,
}

impl GridDecl {
    pub fn build(&self, scale: f64) -> Result<Grid> {
        Grid::new(self.lo.clone(), self.hi.clone(), self.nx.clone())?.scaled(scale)
    }
}

fn default_samples() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxiomsSuite {
    pub generators: Vec<String>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominationSuite {
    pub generator: String,
    /// Defaults to the generator's attached dominating generator.
    pub dominating: Option<String>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSuite {
    pub generator: String,
    pub payoff: String,
    pub horizon: f64,
    pub grid: Option<GridDecl>,
    pub eval_at: Vec<f64>,
    pub expected: Option<f64>,
    pub tolerance: Option<f64>,
    /// Name of the CSV side file for `u(T, ·)`.
    pub csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertiesSuite {
    pub generator: String,
    pub phi: String,
    pub psi: String,
    #[serde(default = "default_shift")]
    pub shift: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub horizon: f64,
    pub grid: Option<GridDecl>,
    /// Ordered payoff pairs `[φ₁, φ₂]` with `φ₁ ≤ φ₂`.
    #[serde(default)]
    pub comparison: Vec<[String; 2]>,
}

fn default_shift() -> f64 {
    5.0
}

fn default_scale() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationFixtureDecl {
    pub generator: String,
    pub times: Vec<f64>,
    pub payoff: String,
    pub x0: Vec<f64>,
    pub expected: Option<f64>,
    pub tolerance: Option<f64>,
    /// Emits `Ẽ_t[ξ]` as CSV for this conditioning time.
    pub conditional_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationPropertiesDecl {
    pub generator: String,
    #[serde(default)]
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemarkDecl {
    pub t1: f64,
    pub t2: f64,
    pub c: f64,
    pub x0: f64,
    #[serde(default)]
    pub numeric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationSuite {
    pub dx: Option<f64>,
    #[serde(default)]
    pub fixture: Vec<ExpectationFixtureDecl>,
    pub properties: Option<ExpectationPropertiesDecl>,
    pub remark: Option<RemarkDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleFixtureDecl {
    pub generator: String,
    pub phi: String,
    pub horizon: f64,
    /// Half-width of the measurement window around the origin.
    #[serde(default = "default_window")]
    pub window: f64,
    /// Fixed tolerance; the scheme budget is used when absent.
    pub tolerance: Option<f64>,
    /// Also report the residual ratio under one halving of `(dx, dt)`.
    #[serde(default)]
    pub refine: bool,
}

fn default_window() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenDecl {
    pub generator: String,
    pub phi: String,
    pub f: String,
    pub horizon: f64,
    #[serde(default)]
    pub x0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MartingaleSuite {
    pub grid: Option<GridDecl>,
    #[serde(default)]
    pub fixture: Vec<MartingaleFixtureDecl>,
    #[serde(default)]
    pub frozen: Vec<FrozenDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GsdeSuite {
    pub b: String,
    pub r: String,
    pub sigma: String,
    pub sigma_lo_sq: f64,
    pub sigma_hi_sq: f64,
    pub horizon: f64,
    #[serde(default)]
    pub z0: f64,
    pub n_paths: Option<usize>,
    /// Writes one simulated path and its reconstructed `B` as CSV.
    #[serde(default)]
    pub path_csv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFixtureDecl {
    pub times: Vec<f64>,
    pub payoff: String,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSuite {
    pub generator: String,
    #[serde(default = "default_mc_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    pub fixture: Vec<OracleFixtureDecl>,
}

fn default_mc_dt() -> f64 {
    0.01
}

fn default_paths() -> usize {
    100_000
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub generator: Vec<GeneratorDecl>,
    pub grid: Option<GridDecl>,
    pub axioms: Option<AxiomsSuite>,
    pub domination: Option<DominationSuite>,
    pub solve: Option<SolveSuite>,
    pub properties: Option<PropertiesSuite>,
    pub expectation: Option<ExpectationSuite>,
    pub martingale: Option<MartingaleSuite>,
    pub gsde: Option<GsdeSuite>,
    pub oracle: Option<OracleSuite>,
}

fn cfg(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn need<T: Clone>(v: &Option<T>, gen: &str, field: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| cfg(format!("generator `{gen}` needs `{field}`")))
}

fn parse_expr(src: &str, ctx: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| cfg(format!("{ctx}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| cfg(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Builds every declared generator. Envelope references must point to
    /// earlier declarations; dominating references may point anywhere.
    pub fn generators(&self) -> Result<BTreeMap<String, GeneratorSpec>> {
        let mut out: BTreeMap<String, GeneratorSpec> = BTreeMap::new();
        for decl in &self.generator {
            if out.contains_key(&decl.name) {
                return Err(cfg(format!("generator `{}` declared twice", decl.name)));
            }
            let spec = build_generator(decl, &out)?;
            out.insert(decl.name.clone(), spec);
        }
        let bare = out.clone();
        for decl in &self.generator {
            if let Some(d) = &decl.dominating {
                let dom = bare
                    .get(d)
                    .ok_or_else(|| cfg(format!("unknown dominating generator `{d}`")))?
                    .clone();
                if !dom.is_sublinear() {
                    return Err(cfg(format!("dominating generator `{d}` must be sublinear")));
                }
                let spec = out.remove(&decl.name).expect("built above");
                let spec = spec.with_dominating(dom).map_err(|e| cfg(e.to_string()))?;
                out.insert(decl.name.clone(), spec);
            }
        }
        Ok(out)
    }

    pub fn generator(
        gens: &BTreeMap<String, GeneratorSpec>,
        name: &str,
    ) -> Result<GeneratorSpec> {
        gens.get(name)
            .cloned()
            .ok_or_else(|| cfg(format!("unknown generator `{name}`")))
    }

    /// Suite grid, falling back to the top-level `[grid]`.
    pub fn grid_for(&self, local: &Option<GridDecl>, scale: f64) -> Result<Grid> {
        local
            .as_ref()
            .or(self.grid.as_ref())
            .ok_or_else(|| cfg("no grid declared for this suite"))?
            .build(scale)
            .map_err(|e| cfg(e.to_string()))
    }

    /// Checks every reference and expression of the given suites without
    /// running anything.
    pub fn validate(&self, suites: &[Suite]) -> Result<()> {
        let gens = self.generators()?;
        let g = |n: &str| RunConfig::generator(&gens, n);
        let payoff = |s: &str, d: usize| {
            Payoff::parse(s, d).map_err(|e| cfg(format!("payoff `{s}`: {e}")))
        };
        for suite in suites {
            match suite {
                Suite::Axioms => {
                    let s = self.axioms.as_ref().ok_or_else(|| missing(*suite))?;
                    for n in &s.generators {
                        if !g(n)?.is_sublinear() {
                            return Err(cfg(format!("axioms need sublinear generators; `{n}` is not")));
                        }
                    }
                }
                Suite::Domination => {
                    let s = self.domination.as_ref().ok_or_else(|| missing(*suite))?;
                    let gt = g(&s.generator)?;
                    match &s.dominating {
                        Some(d) => {
                            g(d)?;
                        }
                        None if gt.dominating.is_none() => {
                            return Err(cfg(format!(
                                "generator `{}` has no dominating generator",
                                s.generator
                            )))
                        }
                        None => {}
                    }
                }
                Suite::Solve => {
                    let s = self.solve.as_ref().ok_or_else(|| missing(*suite))?;
                    let gen = g(&s.generator)?;
                    payoff(&s.payoff, gen.dim)?;
                    let grid = self.grid_for(&s.grid, 1.0)?;
                    if grid.dim() != gen.dim || s.eval_at.len() != gen.dim {
                        return Err(cfg("solve: grid, eval_at and generator dimensions differ"));
                    }
                    positive(s.horizon, "solve.horizon")?;
                    if let Some(t) = s.tolerance {
                        positive(t, "solve.tolerance")?;
                    }
                }
                Suite::Properties => {
                    let s = self.properties.as_ref().ok_or_else(|| missing(*suite))?;
                    let gen = g(&s.generator)?;
                    if gen.dominating.is_none() {
                        return Err(cfg("properties: generator needs a dominating generator"));
                    }
                    payoff(&s.phi, gen.dim)?;
                    payoff(&s.psi, gen.dim)?;
                    for [a, b] in &s.comparison {
                        payoff(a, gen.dim)?;
                        payoff(b, gen.dim)?;
                    }
                    self.grid_for(&s.grid, 1.0)?;
                    positive(s.horizon, "properties.horizon")?;
                }
                Suite::Expectation => {
                    let s = self.expectation.as_ref().ok_or_else(|| missing(*suite))?;
                    for f in &s.fixture {
                        g(&f.generator)?;
                        parse_expr(&f.payoff, "expectation payoff")?;
                    }
                    if let Some(p) = &s.properties {
                        if g(&p.generator)?.dominating.is_none() {
                            return Err(cfg("expectation.properties: generator needs a dominating generator"));
                        }
                    }
                    if let Some(dx) = s.dx {
                        positive(dx, "expectation.dx")?;
                    }
                    if s.fixture.is_empty() && s.properties.is_none() && s.remark.is_none() {
                        return Err(cfg("expectation suite declares nothing to run"));
                    }
                }
                Suite::Martingale => {
                    let s = self.martingale.as_ref().ok_or_else(|| missing(*suite))?;
                    for f in &s.fixture {
                        let gen = g(&f.generator)?;
                        payoff(&f.phi, gen.dim)?;
                        positive(f.horizon, "martingale.horizon")?;
                        if let Some(t) = f.tolerance {
                            positive(t, "martingale.tolerance")?;
                        }
                    }
                    if !s.fixture.is_empty() {
                        self.grid_for(&s.grid, 1.0)?;
                    }
                    for f in &s.frozen {
                        g(&f.generator)?;
                        parse_expr(&f.phi, "frozen phi")?;
                        parse_expr(&f.f, "frozen f")?;
                    }
                }
                Suite::Gsde => {
                    let s = self.gsde.as_ref().ok_or_else(|| missing(*suite))?;
                    self.sde(s)?;
                    positive(s.horizon, "gsde.horizon")?;
                }
                Suite::Oracle => {
                    let s = self.oracle.as_ref().ok_or_else(|| missing(*suite))?;
                    if !g(&s.generator)?.is_sublinear() {
                        return Err(cfg("oracle: generator must be sublinear"));
                    }
                    positive(s.dt, "oracle.dt")?;
                    for f in &s.fixture {
                        parse_expr(&f.payoff, "oracle payoff")?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn sde(&self, s: &GsdeSuite) -> Result<SdeCoefficients> {
        SdeCoefficients::scalar(&s.b, &s.r, &s.sigma, s.sigma_lo_sq, s.sigma_hi_sq)
            .map_err(|e| cfg(format!("gsde: {e}")))
    }
}

fn positive(v: f64, what: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg(format!("{what} must be positive")))
    }
}

fn missing(s: Suite) -> Error {
    cfg(format!("suite `{}` selected but section [{}] is missing", s.name(), s.name()))
}

fn build_generator(
    decl: &GeneratorDecl,
    known: &BTreeMap<String, GeneratorSpec>,
) -> Result<GeneratorSpec> {
    let n = &decl.name;
    let wrap = |e: Error| cfg(format!("generator `{n}`: {e}"));
    match decl.kind.as_str() {
        "sublinear" => {
            let controls = need(&decl.controls, n, "controls")?
                .iter()
                .map(|c| ControlPoint::from_flat(&c.a, &c.b))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            let spec = GeneratorSpec::sublinear(controls).map_err(wrap)?;
            Ok(match decl.lipschitz {
                Some(l) => spec.with_lipschitz(l),
                None => spec,
            })
        }
        "g-heat" => GeneratorSpec::g_heat(
            need(&decl.sigma_lo_sq, n, "sigma_lo_sq")?,
            need(&decl.sigma_hi_sq, n, "sigma_hi_sq")?,
        )
        .map_err(wrap),
        "isaacs" => {
            let n_gamma = need(&decl.n_gamma, n, "n_gamma")?;
            let n_lambda = need(&decl.n_lambda, n, "n_lambda")?;
            let sigma = need(&decl.sigma, n, "sigma")?;
            let pairs = n_gamma * n_lambda;
            if sigma.len() != pairs {
                return Err(cfg(format!("generator `{n}`: expected {pairs} sigma entries")));
            }
            let dim = (sigma[0].len() as f64).sqrt().round() as usize;
            let drift = match &decl.drift {
                Some(d) => d.clone(),
                None => vec![vec!["0".to_string(); dim]; pairs],
            };
            if drift.len() != pairs {
                return Err(cfg(format!("generator `{n}`: expected {pairs} drift entries")));
            }
            let mut entries = Vec::with_capacity(pairs);
            for (s, b) in sigma.iter().zip(&drift) {
                entries.push(IsaacsEntry {
                    sigma: s.iter().map(|e| parse_expr(e, n)).collect::<Result<_>>()?,
                    drift: b.iter().map(|e| parse_expr(e, n)).collect::<Result<_>>()?,
                });
            }
            let order = match decl.order.as_deref().unwrap_or("sup-inf") {
                "sup-inf" => IsaacsOrder::SupInf,
                "inf-sup" => IsaacsOrder::InfSup,
                other => return Err(cfg(format!("generator `{n}`: unknown order `{other}`"))),
            };
            GeneratorSpec::isaacs(
                dim,
                IsaacsSpec {
                    n_gamma,
                    n_lambda,
                    entries,
                    order,
                    lipschitz: need(&decl.lipschitz, n, "lipschitz")?,
                },
            )
            .map_err(wrap)
        }
        "envelope" => {
            let of = need(&decl.of, n, "of")?;
            known
                .get(&of)
                .ok_or_else(|| cfg(format!("generator `{n}`: unknown generator `{of}`")))?
                .isaacs_upper_envelope()
                .map_err(wrap)
        }
        other => Err(cfg(format!("generator `{n}`: unknown kind `{other}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Axioms,
    Domination,
    Solve,
    Properties,
    Expectation,
    Martingale,
    Gsde,
    Oracle,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Axioms,
        Suite::Domination,
        Suite::Solve,
        Suite::Properties,
        Suite::Expectation,
        Suite::Martingale,
        Suite::Gsde,
        Suite::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Axioms => "axioms",
            Suite::Domination => "domination",
            Suite::Solve => "solve",
            Suite::Properties => "properties",
            Suite::Expectation => "expectation",
            Suite::Martingale => "martingale",
            Suite::Gsde => "gsde",
            Suite::Oracle => "oracle",
        }
    }

    /// Comma-separated list; `all` selects every suite whose section is
    /// present in `config`.
    pub fn parse_list(s: &str, config: &RunConfig) -> Result<Vec<Suite>> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part == "all" {
                out.extend(Suite::ALL.iter().copied().filter(|s| config.has(*s)));
                continue;
            }
            let suite = Suite::ALL
                .iter()
                .copied()
                .find(|x| x.name() == part)
                .ok_or_else(|| cfg(format!("unknown suite `{part}`")))?;
            out.push(suite);
        }
        out.dedup();
        if out.is_empty() {
            return Err(cfg("no suites selected"));
        }
        Ok(out)
    }
}

impl RunConfig {
    pub fn has(&self, s: Suite) -> bool {
        match s {
            Suite::Axioms => self.axioms.is_some(),
            Suite::Domination => self.domination.is_some(),
            Suite::Solve => self.solve.is_some(),
            Suite::Properties => self.properties.is_some(),
            Suite::Expectation => self.expectation.is_some(),
            Suite::Martingale => self.martingale.is_some(),
            Suite::Gsde => self.gsde.is_some(),
            Suite::Oracle => self.oracle.is_some(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[run]
seed = 3

[[generator]]
name = "g"
kind = "g-heat"
sigma_lo_sq = 0.25
sigma_hi_sq = 1.0

[[generator]]
name = "toy"
kind = "isaacs"
n_gamma = 2
n_lambda = 1
sigma = [["1 + 0.1 * sin(x)"], ["0.5"]]
lipschitz = 0.1
dominating = "g"

[grid]
lo = [-5.0]
hi = [5.0]
nx = [101]

[solve]
generator = "g"
payoff = "x^2"
horizon = 1.0
eval_at = [0.0]
"#;

    #[test]
    fn parses_and_resolves() {
        let c = RunConfig::parse(SMALL).unwrap();
        let gens = c.generators().unwrap();
        assert!(gens["g"].is_sublinear());
        assert!(gens["toy"].dominating.is_some());
        c.validate(&[Suite::Solve]).unwrap();
        assert!(matches!(c.validate(&[Suite::Oracle]), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_unknown_keys_and_references() {
        assert!(RunConfig::parse("[run]\nseeds = 1\n").is_err());
        let bad = SMALL.replace("dominating = \"g\"", "dominating = \"nope\"");
        assert!(RunConfig::parse(&bad).unwrap().generators().is_err());
        let bad = SMALL.replace("payoff = \"x^2\"", "payoff = \"x^\"");
        assert!(RunConfig::parse(&bad).unwrap().validate(&[Suite::Solve]).is_err());
    }

    #[test]
    fn suite_lists() {
        let c = RunConfig::parse(SMALL).unwrap();
        assert_eq!(Suite::parse_list("all", &c).unwrap(), vec![Suite::Solve]);
        assert_eq!(
            Suite::parse_list("solve, oracle", &c).unwrap(),
            vec![Suite::Solve, Suite::Oracle]
        );
        assert!(Suite::parse_list("bogus", &c).is_err());
    }
}

//! Monte-Carlo lower bounds for sublinear expectations: each admissible
//! selection of controls is a classical diffusion, and its expectation can
//! only sit below the sup over the family.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expectation::CylinderFunctional;
use crate::generator::{psd_sqrt, ControlPoint, GeneratorSpec};
use crate::report::ResidualReport;

/// Compensation-free pairwise summation in a fixed split order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// State-feedback rule in the first coordinate: bin `i` is
/// `edges[i−1] ≤ x < edges[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackTable {
    pub edges: Vec<f64>,
    pub controls: Vec<usize>,
}

impl FeedbackTable {
    fn control(&self, x: f64) -> usize {
        self.controls[self.edges.partition_point(|&e| e <= x)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Interval `i` is `[switch_times[i−1], switch_times[i])`.
    pub switch_times: Vec<f64>,
    pub controls: Vec<usize>,
    pub feedback: Option<FeedbackTable>,
}

impl Policy {
    pub fn constant(c: usize) -> Self {
        Policy {
            switch_times: Vec::new(),
            controls: vec![c],
            feedback: None,
        }
    }

    pub fn switching(at: f64, before: usize, after: usize) -> Self {
        Policy {
            switch_times: vec![at],
            controls: vec![before, after],
            feedback: None,
        }
    }

    pub fn threshold(edge: f64, below: usize, above: usize) -> Self {
        Policy {
            switch_times: Vec::new(),
            controls: vec![below],
            feedback: Some(FeedbackTable {
                edges: vec![edge],
                controls: vec![below, above],
            }),
        }
    }

    pub fn validate(&self, n_controls: usize, horizon: f64) -> Result<()> {
        if self.controls.len() != self.switch_times.len() + 1 {
            return Err(Error::invalid("policy needs one control per interval"));
        }
        if self
            .switch_times
            .iter()
            .any(|&s| !(0.0..=horizon).contains(&s))
            || self.switch_times.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::invalid("policy switching times must be increasing in [0, T]"));
        }
        let mut all: Vec<usize> = self.controls.clone();
        if let Some(fb) = &self.feedback {
            if fb.controls.len() != fb.edges.len() + 1 || fb.edges.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid("feedback table needs increasing edges and one control per bin"));
            }
            all.extend_from_slice(&fb.controls);
        }
        if all.iter().any(|&c| c >= n_controls) {
            return Err(Error::invalid("policy control index out of range"));
        }
        Ok(())
    }

    fn control(&self, t: f64, x: f64) -> usize {
        match &self.feedback {
            Some(fb) => fb.control(x),
            None => self.controls[self.switch_times.partition_point(|&s| s <= t)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(count)`.
    pub se: f64,
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            dt: 0.01,
            n_paths: 100_000,
            seed: 7,
        }
    }
}

struct Compiled {
    roots: Vec<DMatrix<f64>>,
    drifts: Vec<DVector<f64>>,
}

fn compile(spec: &GeneratorSpec) -> Result<Compiled> {
    let controls: &[ControlPoint] = spec
        .control_points()
        .ok_or_else(|| Error::invalid("the Monte-Carlo oracle needs a sublinear generator"))?;
    let roots = controls
        .iter()
        .map(|c| psd_sqrt(&c.a))
        .collect::<Result<Vec<_>>>()?;
    Ok(Compiled {
        roots,
        drifts: controls.iter().map(|c| c.b.clone()).collect(),
    })
}

/// `E[ξ]` under the diffusion that follows `policy`, by Euler–Maruyama.
/// Path `i` draws from stream `i` of the seed, so different policies see
/// the same noise.
pub fn simulate(
    spec: &GeneratorSpec,
    policy: &Policy,
    xi: &CylinderFunctional,
    opts: &McOptions,
) -> Result<McEstimate> {
    let comp = compile(spec)?;
    let d = spec.dim;
    if xi.dim() != d {
        return Err(Error::invalid("functional and generator dimensions differ"));
    }
    if !(opts.dt > 0.0) || opts.n_paths < 2 {
        return Err(Error::invalid("Monte-Carlo options: dt > 0 and at least two paths"));
    }
    let horizon = *xi.times().last().expect("non-empty times");
    policy.validate(comp.roots.len(), horizon)?;
    let values: Vec<f64> = (0..opts.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            let mut x = xi.x0().to_vec();
            let mut noise = vec![0.0; d];
            let mut args = Vec::with_capacity(d * xi.n());
            let mut t = 0.0;
            for &target in xi.times() {
                let steps = ((target - t) / opts.dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
                let h = (target - t) / steps as f64;
                let sh = h.sqrt();
                for s in 0..steps {
                    let c = policy.control(t + s as f64 * h, x[0]);
                    for v in noise.iter_mut() {
                        *v = rng.sample::<f64, _>(StandardNormal);
                    }
                    let (root, drift) = (&comp.roots[c], &comp.drifts[c]);
                    for (i, xv) in x.iter_mut().enumerate() {
                        let mut dw = 0.0;
                        for (k, nk) in noise.iter().enumerate() {
                            dw += root[(i, k)] * nk;
                        }
                        *xv += drift[i] * h + dw * sh;
                    }
                }
                t = target;
                args.extend_from_slice(&x);
            }
            xi.eval(&args)
        })
        .collect();
    let n = values.len() as f64;
    let mean = pairwise_sum(&values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    Ok(McEstimate {
        mean,
        se: (var / n).sqrt(),
        count: values.len(),
        seed: opts.seed,
    })
}

/// All constant policies, every one-switch policy at `T/2`, and every
/// two-bin threshold policy at `x₀`.
pub fn standard_family(n_controls: usize, horizon: f64, x0: f64) -> Vec<Policy> {
    let mut out: Vec<Policy> = (0..n_controls).map(Policy::constant).collect();
    for i in 0..n_controls {
        for j in 0..n_controls {
            if i != j {
                out.push(Policy::switching(0.5 * horizon, i, j));
                out.push(Policy::threshold(x0, i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LowerBound {
    pub best: McEstimate,
    pub best_policy: usize,
    pub estimates: Vec<McEstimate>,
}

/// Best estimate across `family`.
pub fn lower_bound(
    spec: &GeneratorSpec,
    xi: &CylinderFunctional,
    family: &[Policy],
    opts: &McOptions,
) -> Result<LowerBound> {
    if family.is_empty() {
        return Err(Error::invalid("policy family is empty"));
    }
    let estimates = family
        .iter()
        .map(|p| simulate(spec, p, xi, opts))
        .collect::<Result<Vec<_>>>()?;
    let best_policy = (0..estimates.len())
        .max_by(|&a, &b| estimates[a].mean.total_cmp(&estimates[b].mean).then(b.cmp(&a)))
        .expect("non-empty");
    Ok(LowerBound {
        best: estimates[best_policy],
        best_policy,
        estimates,
    })
}

/// `mc ≤ pde + 3 se + budget`.
pub fn lower_bound_report(
    check: &str,
    bound: &McEstimate,
    pde_value: f64,
    budget: f64,
) -> ResidualReport {
    ResidualReport::new(check, (bound.mean - pde_value).max(0.0), 3.0 * bound.se + budget)
        .with_param("mc", bound.mean)
        .with_param("se", bound.se)
        .with_param("pde", pde_value)
        .with_param("seed", bound.seed as f64)
}

/// `|mc − target| ≤ 3 se + budget`.
pub fn agreement_report(check: &str, est: &McEstimate, target: f64, budget: f64) -> ResidualReport {
    ResidualReport::new(check, (est.mean - target).abs(), 3.0 * est.se + budget)
        .with_param("mc", est.mean)
        .with_param("se", est.se)
        .with_param("target", target)
        .with_param("seed", est.seed as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn x1sq() -> CylinderFunctional {
        CylinderFunctional::parse(vec![1.0], "x1^2", vec![0.0]).unwrap()
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn gaussian_second_moments() {
        let o = McOptions {
            n_paths: 20_000,
            ..Default::default()
        };
        let g = fixtures::g_heat();
        let hi = simulate(&g, &Policy::constant(0), &x1sq(), &o).unwrap();
        let lo = simulate(&g, &Policy::constant(1), &x1sq(), &o).unwrap();
        let (ahi, alo) = {
            let c = g.control_points().unwrap();
            (c[0].a[(0, 0)], c[1].a[(0, 0)])
        };
        assert!((hi.mean - ahi).abs() < 4.0 * hi.se);
        assert!((lo.mean - alo).abs() < 4.0 * lo.se);
    }

    #[test]
    fn deterministic_transport() {
        let g = GeneratorSpec::sublinear(vec![ControlPoint::scalar(0.0, 1.0).unwrap()]).unwrap();
        let xi = CylinderFunctional::parse(vec![1.0], "x1", vec![0.0]).unwrap();
        let e = simulate(&g, &Policy::constant(0), &xi, &McOptions { n_paths: 10, ..Default::default() }).unwrap();
        assert!((e.mean - 1.0).abs() < 1e-12);
        assert!(e.se < 1e-12);
    }

    #[test]
    fn reproducible_and_validated() {
        let g = fixtures::g_heat();
        let o = McOptions {
            n_paths: 500,
            ..Default::default()
        };
        let a = simulate(&g, &Policy::switching(0.5, 0, 1), &x1sq(), &o).unwrap();
        let b = simulate(&g, &Policy::switching(0.5, 0, 1), &x1sq(), &o).unwrap();
        assert_eq!(a, b);
        assert!(simulate(&g, &Policy::constant(5), &x1sq(), &o).is_err());
        assert!(simulate(&fixtures::isaacs_toy(), &Policy::constant(0), &x1sq(), &o).is_err());
    }

    #[test]
    fn family_enlargement_never_lowers_bound() {
        let g = fixtures::g_heat();
        let o = McOptions {
            n_paths: 2000,
            ..Default::default()
        };
        let fam = standard_family(2, 1.0, 0.0);
        let small = lower_bound(&g, &x1sq(), &fam[..1], &o).unwrap();
        let big = lower_bound(&g, &x1sq(), &fam, &o).unwrap();
        assert!(big.best.mean >= small.best.mean);
    }
}

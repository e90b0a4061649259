//! Named generators used across the test suites, the default configs and
//! the acceptance criteria.

use crate::expr::Expr;
use crate::generator::{ControlPoint, GeneratorSpec, IsaacsEntry, IsaacsOrder, IsaacsSpec};
use crate::gsde::SdeCoefficients;

pub const SIGMA_LO_SQ: f64 = 0.25;
pub const SIGMA_HI_SQ: f64 = 1.0;

pub fn g_heat() -> GeneratorSpec {
    GeneratorSpec::g_heat(SIGMA_LO_SQ, SIGMA_HI_SQ).expect("valid controls")
}

/// Classical heat operator `½ u''`.
pub fn heat_singleton() -> GeneratorSpec {
    GeneratorSpec::sublinear(vec![ControlPoint::scalar(1.0, 0.0).expect("psd")]).expect("one control")
}

/// Constant-coefficient sublinear operator with drift uncertainty.
pub fn drifted_sublinear() -> GeneratorSpec {
    GeneratorSpec::sublinear(vec![
        ControlPoint::scalar(1.0, 0.5).expect("psd"),
        ControlPoint::scalar(0.25, -0.2).expect("psd"),
    ])
    .expect("controls")
}

const TOY_SCALES: [[f64; 2]; 2] = [[1.0, 0.6], [0.8, 0.5]];

fn toy_entries(drift: [[f64; 2]; 2]) -> Vec<IsaacsEntry> {
    let mut entries = Vec::new();
    for (g, row) in TOY_SCALES.iter().enumerate() {
        for (l, s) in row.iter().enumerate() {
            entries.push(IsaacsEntry {
                sigma: vec![Expr::parse(&format!("{s} * (1 + 0.1 * sin(x))")).expect("grammar")],
                drift: vec![Expr::constant(drift[g][l])],
            });
        }
    }
    entries
}

/// Two-by-two sup-inf game with state-dependent volatility
/// `σ(x, γ, λ) = s_{γλ} (1 + 0.1 sin x)` and no drift. Dominated by the
/// sup over all four pairs, which is attached.
pub fn isaacs_toy() -> GeneratorSpec {
    let spec = GeneratorSpec::isaacs(
        1,
        IsaacsSpec {
            n_gamma: 2,
            n_lambda: 2,
            entries: toy_entries([[0.0; 2]; 2]),
            order: IsaacsOrder::SupInf,
            lipschitz: 0.1,
        },
    )
    .expect("valid toy");
    let upper = spec.isaacs_upper_envelope().expect("isaacs");
    spec.with_dominating(upper).expect("same dimension")
}

/// The toy game with a small drift on each pair.
pub fn isaacs_drifted() -> GeneratorSpec {
    let spec = GeneratorSpec::isaacs(
        1,
        IsaacsSpec {
            n_gamma: 2,
            n_lambda: 2,
            entries: toy_entries([[0.1, -0.1], [0.05, 0.0]]),
            order: IsaacsOrder::SupInf,
            lipschitz: 0.1,
        },
    )
    .expect("valid toy");
    let upper = spec.isaacs_upper_envelope().expect("isaacs");
    spec.with_dominating(upper).expect("same dimension")
}

/// `b = 0.1`, `r = 0`, `σ(z) = 1 + 0.1 sin z`, `Ḡ(A) = ½(A⁺ − 0.25 A⁻)`.
pub fn weak_sde_demo() -> SdeCoefficients {
    SdeCoefficients::scalar("0.1", "0", "1 + 0.1 * sin(z)", SIGMA_LO_SQ, SIGMA_HI_SQ)
        .expect("valid coefficients")
}

pub fn weak_sde_identity() -> SdeCoefficients {
    SdeCoefficients::scalar("0", "0", "1", SIGMA_LO_SQ, SIGMA_HI_SQ).expect("valid coefficients")
}

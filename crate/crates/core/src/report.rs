//! Residual reports shared by every check in the crate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Outcome of one named numerical check.
///
/// `residual` and `tolerance` are in the units of the quantity checked. For
/// aggregate reports `residual` is the worst child ratio `residual /
/// tolerance` and `tolerance` is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub check: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<ResidualReport>,
}

impl ResidualReport {
    pub fn new(check: impl Into<String>, residual: f64, tolerance: f64) -> Self {
        let residual = finite_or_max(residual);
        ResidualReport {
            check: check.into(),
            params: BTreeMap::new(),
            residual,
            tolerance,
            passed: residual <= tolerance,
            notes: Vec::new(),
            children: Vec::new(),
        }
    }

    /// A report that passes iff `ok`; residual is 0 or 1.
    pub fn predicate(check: impl Into<String>, ok: bool) -> Self {
        let mut r = ResidualReport::new(check, if ok { 0.0 } else { 1.0 }, 0.0);
        r.passed = ok;
        r
    }

    pub fn aggregate(check: impl Into<String>, children: Vec<ResidualReport>) -> Self {
        let worst = children
            .iter()
            .map(|c| {
                if c.tolerance > 0.0 {
                    c.residual / c.tolerance
                } else if c.passed {
                    0.0
                } else {
                    f64::MAX
                }
            })
            .fold(0.0, f64::max);
        let passed = children.iter().all(|c| c.passed);
        ResidualReport {
            check: check.into(),
            params: BTreeMap::new(),
            residual: finite_or_max(worst),
            tolerance: 1.0,
            passed,
            notes: Vec::new(),
            children,
        }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: f64) -> Self {
        self.params.insert(key.into(), finite_or_max(value));
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    /// Names of every failing leaf, depth first.
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_failures("", &mut out);
        out
    }

    fn collect_failures(&self, prefix: &str, out: &mut Vec<String>) {
        let name = if prefix.is_empty() {
            self.check.clone()
        } else {
            format!("{prefix}/{}", self.check)
        };
        if self.children.is_empty() {
            if !self.passed {
                out.push(format!(
                    "{name}: residual {:e} > tolerance {:e}",
                    self.residual, self.tolerance
                ));
            }
        } else {
            for c in &self.children {
                c.collect_failures(&name, out);
            }
        }
    }
}

fn finite_or_max(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        f64::MAX
    } else if x == f64::NEG_INFINITY {
        f64::MIN
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_uses_worst_ratio() {
        let a = ResidualReport::new("a", 1e-3, 1e-2);
        let b = ResidualReport::new("b", 3e-2, 1e-2);
        let agg = ResidualReport::aggregate("both", vec![a, b]);
        assert!(!agg.passed);
        assert!((agg.residual - 3.0).abs() < 1e-12);
        assert_eq!(agg.failures().len(), 1);
        assert!(agg.failures()[0].starts_with("both/b"));
    }

    #[test]
    fn nan_residual_fails_and_serializes() {
        let r = ResidualReport::new("nan", f64::NAN, 1.0);
        assert!(!r.passed);
        let s = serde_json::to_string(&r).unwrap();
        let back: ResidualReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}

//! Replays the checked-in fuzz seeds through the fuzz target bodies.

use std::fs;
use std::path::{Path, PathBuf};

use nonlin_expect::config::{RunConfig, Suite};
use nonlin_expect::path::DiscretePath;
use nonlin_expect::Expr;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn expr_seeds() {
    let mut accepted = 0;
    for (_, bytes) in seeds("expr_parse") {
        let Ok(src) = std::str::from_utf8(&bytes) else { continue };
        if let Ok(e) = Expr::parse(src) {
            accepted += 1;
            let back = Expr::parse(&e.to_string()).unwrap();
            let x: Vec<f64> = (0..back.arity()).map(|i| 0.5 - i as f64).collect();
            assert!((e.eval(&x) - back.eval(&x)).abs() <= 1e-12 * (1.0 + e.eval(&x).abs()));
        }
    }
    assert!(accepted >= 4);
}

#[test]
fn config_seeds() {
    for (p, bytes) in seeds("config_parse") {
        let text = String::from_utf8(bytes).unwrap();
        let cfg = RunConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        cfg.generators().unwrap();
        let suites = Suite::parse_list("all", &cfg).unwrap();
        cfg.validate(&suites).unwrap();
        let _ = cfg.validate(&Suite::ALL);
    }
}

#[test]
fn path_seeds() {
    let mut accepted = 0;
    for (_, bytes) in seeds("path_csv") {
        if let Ok(p) = DiscretePath::read_csv(bytes.as_slice()) {
            accepted += 1;
            let mut buf = Vec::new();
            p.write_csv(&mut buf, "x").unwrap();
            let back = DiscretePath::read_csv(buf.as_slice()).unwrap();
            assert_eq!(back.len(), p.len());
            assert_eq!(back.terminal(), p.terminal());
        }
    }
    assert_eq!(accepted, 2);
}

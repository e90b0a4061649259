#![no_main]

use libfuzzer_sys::fuzz_target;
use nonlin_expect::Expr;

fuzz_target!(|data: &str| {
    if let Ok(e) = Expr::parse(data) {
        let printed = e.to_string();
        let back = Expr::parse(&printed).expect("printed expression reparses");
        let x: Vec<f64> = (0..back.arity()).map(|i| 0.5 - i as f64).collect();
        let _ = back.eval(&x);
        let _ = e.derivative(0);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use nonlin_expect::config::{RunConfig, Suite};

fuzz_target!(|data: &str| {
    let Ok(cfg) = RunConfig::parse(data) else {
        return;
    };
    let _ = cfg.generators();
    if let Ok(suites) = Suite::parse_list("all", &cfg) {
        let _ = cfg.validate(&suites);
    }
    let _ = cfg.validate(&Suite::ALL);
});

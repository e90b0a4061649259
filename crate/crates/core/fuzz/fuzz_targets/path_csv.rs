#![no_main]

use libfuzzer_sys::fuzz_target;
use nonlin_expect::path::DiscretePath;

// Accepted paths must survive a write/read round trip.
fuzz_target!(|data: &[u8]| {
    let Ok(p) = DiscretePath::read_csv(data) else {
        return;
    };
    let mut buf = Vec::new();
    p.write_csv(&mut buf, "x").expect("write accepted path");
    DiscretePath::read_csv(buf.as_slice()).expect("round trip");
});

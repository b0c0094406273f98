#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(exp) = sa_lab::parse_config(text) {
        assert_eq!(exp.theta0.len(), exp.dim());
    }
});

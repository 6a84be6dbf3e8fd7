#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = latsolve::config::RunConfig::parse(text) {
            // resolved configs re-parse to themselves
            let rt = latsolve::config::RunConfig::parse(&cfg.to_text()).unwrap();
            assert_eq!(rt, cfg);
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(norm) = latsolve::encoders::Normalization::parse(text) {
            for a in [norm.solution, norm.source, norm.sdf] {
                let _ = a.denormalize(a.normalize(0.25));
            }
        }
    }
});

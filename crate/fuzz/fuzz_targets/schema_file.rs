#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(schema) = latsolve::encoders::ProblemSchema::parse(text) {
            let _ = schema.flux_row_width();
            let _ = schema.time_input_width();
        }
    }
});

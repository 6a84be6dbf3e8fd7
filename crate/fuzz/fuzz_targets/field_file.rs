#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(field) = latsolve::io::parse_field(text) {
            // accepted fields must survive a write/read cycle bit for bit
            let rt = latsolve::io::parse_field(&latsolve::io::field_to_string(&field)).unwrap();
            assert_eq!(field.grid(), rt.grid());
            for (a, b) in field.values().iter().zip(rt.values()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
});

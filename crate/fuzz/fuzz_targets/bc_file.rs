#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(bc) = latsolve::io::parse_bc(text) {
            let out = latsolve::io::bc_to_string(&bc).unwrap();
            assert_eq!(latsolve::io::parse_bc(&out).unwrap(), bc);
        }
    }
});

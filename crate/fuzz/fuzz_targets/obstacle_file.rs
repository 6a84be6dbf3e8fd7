#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(obstacle) = latsolve::io::parse_obstacle(text) {
            let out = latsolve::io::obstacle_to_string(&obstacle);
            assert_eq!(latsolve::io::parse_obstacle(&out).unwrap(), obstacle);
        }
    }
});

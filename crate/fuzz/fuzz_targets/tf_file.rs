#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad::tf::{density_peaks, parse_tf, write_tf};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tf) = parse_tf(text) {
        assert_eq!(parse_tf(&write_tf(&tf)).unwrap(), tf);
        let _ = density_peaks(&tf);
    }
});

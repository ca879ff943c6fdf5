#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad::volume::VolumeMeta;

fuzz_target!(|data: &[u8]| {
    let name = String::from_utf8_lossy(data);
    if let Ok(meta) = VolumeMeta::from_filename(&name) {
        assert!(meta.dims.iter().all(|&d| d > 0));
        assert!(meta.payload_len().is_some());
    }
});

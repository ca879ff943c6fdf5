#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad::volume::VolumeMeta;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = VolumeMeta::from_sidecar_str(text) {
        // anything accepted must survive a write/read cycle
        let again = VolumeMeta::from_sidecar_str(&meta.to_sidecar_string()).unwrap();
        assert_eq!(again, meta);
    }
});

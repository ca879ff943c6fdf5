#![no_main]

use libfuzzer_sys::fuzz_target;
use tfgrad_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        let _ = cfg.scorer_choice();
        let _ = cfg.validate();
        if let Ok(again) = RunConfig::from_toml(&cfg.to_toml()) {
            assert_eq!(again.to_toml(), cfg.to_toml());
        }
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;
use mmgen_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_toml(text) {
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }
});

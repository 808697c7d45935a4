//! Fig. 2, moment and bound configs share one input.

#![no_main]
use libfuzzer_sys::fuzz_target;
use zo_core::analysis::Fig2Config;
use zo_core::harness::{BoundsConfig, MomentsConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = Fig2Config::from_toml_str(s);
        let _ = MomentsConfig::from_toml_str(s);
        let _ = BoundsConfig::from_toml_str(s);
    }
});

//! Arbitrary text through the experiment config parser and validator.

#![no_main]
use libfuzzer_sys::fuzz_target;
use zo_core::harness::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(c) = ExperimentConfig::from_toml_str(s) {
            let text = c.to_toml_string();
            let back = ExperimentConfig::from_toml_str(&text).expect("re-parse");
            assert_eq!(back.to_toml_string(), text);
        }
    }
});

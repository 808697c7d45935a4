#![no_main]
use libfuzzer_sys::fuzz_target;
use zo_core::perturb::Distribution;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(d) = s.parse::<Distribution>() {
            assert_eq!(d.to_string().parse::<Distribution>().unwrap(), d);
        }
    }
});

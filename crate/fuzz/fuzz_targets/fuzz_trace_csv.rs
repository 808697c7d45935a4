#![no_main]
use libfuzzer_sys::fuzz_target;
use zo_core::harness::trace::parse_trace_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = parse_trace_csv(s);
    }
});

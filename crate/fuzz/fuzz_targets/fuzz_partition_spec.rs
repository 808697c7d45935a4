#![no_main]
use libfuzzer_sys::fuzz_target;
use zo_core::estimators::PartitionSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    let Ok(spec) = s.parse::<PartitionSpec>() else { return };
    assert_eq!(spec.to_string().parse::<PartitionSpec>().unwrap(), spec);
    let natural = [0..3, 3..6, 6..9];
    let _ = spec.resolve(9, Some(&natural));
    let _ = spec.resolve(64, None);
});

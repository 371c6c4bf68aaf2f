#![no_main]

use libfuzzer_sys::fuzz_target;
use robust_kd::data::parse_cifar10_binary;

fuzz_target!(|data: &[u8]| {
    let Some((&factor, bytes)) = data.split_first() else {
        return;
    };
    if let Ok(examples) = parse_cifar10_binary(bytes, usize::from(factor % 8)) {
        assert_eq!(examples.len() * 3073, bytes.len());
        assert!(examples.iter().all(|e| e.label < 10 && e.image.is_in_unit_range()));
    }
});

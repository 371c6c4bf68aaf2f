#![no_main]

use libfuzzer_sys::fuzz_target;
use robust_kd::corruptions::parse_manifest_line;

fuzz_target!(|data: &[u8]| {
    if let Ok(line) = std::str::from_utf8(data) {
        if let Ok(rec) = parse_manifest_line(line) {
            assert_eq!(rec.beta == 1, rec.provenance.is_none());
        }
    }
});

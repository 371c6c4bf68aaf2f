#![no_main]

use libfuzzer_sys::fuzz_target;
use robust_kd::corruptions::{CorruptionKind, SeverityTable};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(table) = SeverityTable::parse(text) {
            for &kind in CorruptionKind::ALL {
                if let Some(m) = table.magnitudes(kind) {
                    assert!(m.windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }
    }
});

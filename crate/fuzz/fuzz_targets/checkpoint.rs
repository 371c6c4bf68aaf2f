#![no_main]

use libfuzzer_sys::fuzz_target;
use robust_kd::checkpoint::{decode, Checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode(data) {
        match ck {
            Checkpoint::Network { .. } => {
                let _ = ck.into_network();
            }
            _ => {
                let _ = ck.into_multihead();
            }
        }
    }
});

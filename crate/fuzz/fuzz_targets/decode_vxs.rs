#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::formats::{decode_vxs, encode_vxs};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_vxs(data) {
        assert_eq!(encode_vxs(&set).unwrap(), data);
    }
});

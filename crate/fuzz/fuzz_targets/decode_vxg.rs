#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::formats::{decode_vxg, encode_vxg};

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = decode_vxg(data) {
        // whatever decodes must re-encode to the same bytes
        assert_eq!(encode_vxg(&grid).unwrap(), data);
    }
});

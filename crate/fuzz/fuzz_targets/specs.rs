#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::synth::{Region, Shape};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(shape) = text.parse::<Shape>() {
        let _ = shape.contains([0.5, 0.5, 0.5]);
        let _ = shape.to_string().parse::<Shape>().unwrap();
    }
    if let Ok(region) = text.parse::<Region>() {
        let _ = region.voxelize(4);
    }
});

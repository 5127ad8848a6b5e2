#![no_main]

use libfuzzer_sys::fuzz_target;
use voxflow::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::resolve(Some(text), None, &[]) {
        // a resolved config survives its own text form
        let again = RunConfig::resolve(Some(&cfg.to_text()), None, &[]).unwrap();
        assert_eq!(again, cfg);
    }
});

#![no_main]

use lapx::model::ModelConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ModelConfig::from_json(text) {
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).expect("round trip"), cfg);
    }
});

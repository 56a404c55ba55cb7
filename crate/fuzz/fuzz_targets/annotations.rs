#![no_main]

use lapx::annotations::AnnotationSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = AnnotationSet::from_json(text) {
        assert_eq!(AnnotationSet::from_json(&set.to_json()).expect("round trip"), set);
    }
});

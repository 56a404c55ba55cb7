#![no_main]

use lapx::model::TensorFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = TensorFile::parse(data) {
        // Anything that parses must serialize back to something that parses the same.
        let again = TensorFile::parse(&file.to_bytes()).expect("re-parse");
        assert_eq!(again.to_bytes(), file.to_bytes());
    }
});

#![no_main]

use std::sync::OnceLock;

use lapx::model::{Model, ModelConfig, TensorFile};
use lapx::train::AdamState;
use libfuzzer_sys::fuzz_target;

fn tiny() -> &'static (ModelConfig, Vec<u8>) {
    static CELL: OnceLock<(ModelConfig, Vec<u8>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut cfg = ModelConfig::toy(1, 8);
        cfg.num_keypoints = 4;
        let model = Model::build(&cfg, 0).expect("tiny model");
        let before = model.to_tensor_file().to_bytes();
        (cfg, before)
    })
}

fuzz_target!(|data: &[u8]| {
    let Ok(file) = TensorFile::parse(data) else { return };
    let (cfg, before) = tiny();
    let mut model = Model::build(cfg, 0).expect("tiny model");
    if model.load_tensor_file(&file).is_err() {
        // A rejected file must leave the weights untouched.
        assert_eq!(&model.to_tensor_file().to_bytes(), before);
    }
    let _ = AdamState::read_sidecar(&model.params, &file);
});

#![no_main]

use karma_core::model::{CheckpointFile, KarmaModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = CheckpointFile::from_bytes(data) else {
        return;
    };
    let again = CheckpointFile::from_bytes(&file.to_bytes()).expect("re-encoded checkpoint must decode");
    assert_eq!(again.to_bytes(), file.to_bytes());
    // A decodable header may still describe a model; building it must not panic.
    if let Ok(cfg) = file.model_config() {
        if cfg.validate().is_ok() && cfg.d_model <= 64 && cfg.vocab_size <= 256 && cfg.max_seq <= 16 {
            if let Ok(mut m) = KarmaModel::<f32>::new(cfg) {
                let _ = m.import_params(&file, "param/");
            }
        }
    }
});

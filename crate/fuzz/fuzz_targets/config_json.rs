#![no_main]

use karma_cli::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(mut cfg) = serde_json::from_slice::<ExperimentConfig>(data) else {
        return;
    };
    cfg.sync_model();
    let _ = cfg.validate();
    let text = serde_json::to_string(&cfg).unwrap();
    let again: ExperimentConfig = serde_json::from_str(&text).expect("echoed config must parse");
    assert_eq!(again, cfg);
});

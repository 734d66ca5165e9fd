#![no_main]

use karma_core::evalkit::sink_profile;
use karma_core::model::read_records_jsonl;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_records_jsonl(data) {
        let _ = sink_profile(&records);
    }
});

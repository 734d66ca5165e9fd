#![no_main]

use karma_core::synthdata::{read_sessions_jsonl, split_chronological, write_sessions_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&n, rest)) = data.split_first() else {
        return;
    };
    let catalog_size = n as usize + 1;
    let Ok(sessions) = read_sessions_jsonl(rest, catalog_size) else {
        return;
    };
    let mut out = Vec::new();
    write_sessions_jsonl(&sessions, &mut out).unwrap();
    assert_eq!(read_sessions_jsonl(out.as_slice(), catalog_size).unwrap(), sessions);
    let _ = split_chronological(&sessions, 0.2);
});

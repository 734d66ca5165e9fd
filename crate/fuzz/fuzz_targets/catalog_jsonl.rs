#![no_main]

use karma_core::synthdata::{read_catalog_jsonl, write_catalog_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(catalog) = read_catalog_jsonl(data) else {
        return;
    };
    let mut out = Vec::new();
    write_catalog_jsonl(&catalog, &mut out).unwrap();
    let again = read_catalog_jsonl(out.as_slice()).expect("written catalog must parse");
    assert_eq!(again, catalog);
});

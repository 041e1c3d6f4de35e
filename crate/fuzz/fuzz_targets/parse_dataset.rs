#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(ds) = viker::io::dataset::parse_dataset(text, "fuzz") {
            let again = viker::io::dataset::write_dataset(&ds);
            let back = viker::io::dataset::parse_dataset(&again, "fuzz2").unwrap();
            assert_eq!(back.full.len(), ds.full.len());
        }
    }
});

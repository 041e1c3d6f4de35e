#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((refs, id, category)) = viker::io::reference::parse_reference(text, "fuzz") {
            let again = viker::io::reference::write_reference(&refs, id, category);
            viker::io::reference::parse_reference(&again, "fuzz2").unwrap();
        }
    }
});

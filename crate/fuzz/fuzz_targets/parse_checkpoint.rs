#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // round-trip whatever parses
        if let Ok((params, opt)) = viker::io::checkpoint::parse_checkpoint(text, "fuzz") {
            let again = viker::io::checkpoint::write_checkpoint(&params, opt.as_ref());
            let (back, _) = viker::io::checkpoint::parse_checkpoint(&again, "fuzz2").unwrap();
            assert!(back.bitwise_eq(&params));
        }
    }
});

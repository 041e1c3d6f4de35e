#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(config) = viker::io::config::parse_unlearn_config(text, "fuzz") {
            let again = viker::io::config::write_unlearn_config(&config);
            viker::io::config::parse_unlearn_config(&again, "fuzz2").unwrap();
        }
        if let Ok(spec) = viker::io::config::parse_benchmark_spec(text, "fuzz") {
            let again = viker::io::config::write_benchmark_spec(&spec);
            viker::io::config::parse_benchmark_spec(&again, "fuzz2").unwrap();
        }
    }
});

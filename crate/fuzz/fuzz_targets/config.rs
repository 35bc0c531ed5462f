#![no_main]

use implant_locator::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = Config::parse(text) {
            let _ = cfg.validate();
        }
    }
});

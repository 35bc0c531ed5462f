#![no_main]

use implant_locator::eval::parse_predictions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_predictions(data);
});

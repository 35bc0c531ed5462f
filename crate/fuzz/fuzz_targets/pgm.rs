#![no_main]

use implant_locator::volume::Slice;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = Slice::from_pgm(data);
});

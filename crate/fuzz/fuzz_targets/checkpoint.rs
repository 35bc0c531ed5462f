#![no_main]

use implant_locator::model::TripletNet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = TripletNet::from_checkpoint_bytes(data);
});

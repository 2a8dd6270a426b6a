#![no_main]
use libfuzzer_sys::fuzz_target;
use mmgen_core::checkpoint::parse_checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = parse_checkpoint(data) {
        let _ = ck.into_state();
    }
});

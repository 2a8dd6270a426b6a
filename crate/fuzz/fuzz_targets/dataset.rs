#![no_main]
use libfuzzer_sys::fuzz_target;
use mmgen_core::synth::DatasetReader;

fuzz_target!(|data: &[u8]| {
    if let Ok(mut r) = DatasetReader::new(std::io::Cursor::new(data)) {
        for i in 0..r.len().min(8) {
            if let Ok(s) = r.get(i) {
                let _ = s.encode(r.registry());
            }
        }
    }
});

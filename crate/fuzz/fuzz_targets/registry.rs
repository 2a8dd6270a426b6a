#![no_main]
use libfuzzer_sys::fuzz_target;
use mmgen_core::modality::ModalityRegistry;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(reg) = ModalityRegistry::from_text(text) {
            assert_eq!(ModalityRegistry::from_text(&reg.to_text()).unwrap(), reg);
        }
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;
use mmgen_core::features::{encode_feature_records, parse_feature_records};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = parse_feature_records(data) {
        let again = parse_feature_records(&encode_feature_records(&records)).expect("re-encoded records parse");
        assert_eq!(again.len(), records.len());
    }
});

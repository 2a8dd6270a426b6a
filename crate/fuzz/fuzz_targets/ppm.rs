#![no_main]
use libfuzzer_sys::fuzz_target;
use mmgen_core::image::parse_ppm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = parse_ppm(data) {
        assert_eq!(parse_ppm(&img.to_ppm()).unwrap(), img);
    }
});

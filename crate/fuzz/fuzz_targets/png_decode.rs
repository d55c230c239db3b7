#![no_main]

use docclean::imaging::Gray8;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Gray8::decode_png(data) {
        assert_eq!(img.pixels.len(), img.height * img.width);
        if img.pixels.len() <= 1 << 20 {
            let png = img.encode_png().unwrap();
            assert_eq!(Gray8::decode_png(&png).unwrap(), img);
        }
    }
});

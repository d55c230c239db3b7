#![no_main]

use docclean::engines::BackendSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = text.parse::<BackendSpec>() {
        assert_eq!(spec.to_string().parse::<BackendSpec>().unwrap(), spec);
    }
});

#![no_main]

use docclean::engines::parse_http_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_http_response(data);
});

#![no_main]

use docclean::engines::parse_cache_lines;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    let (good, bad) = parse_cache_lines(&text);
    assert!(good.len() + bad <= text.lines().count());
});

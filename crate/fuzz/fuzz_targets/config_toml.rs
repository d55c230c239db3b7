#![no_main]

use docclean::trainer::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_toml(text) {
        let again = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&again).unwrap(), cfg);
    }
});

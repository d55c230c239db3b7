#![no_main]

use docclean::neural::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_json(data) {
        let bytes = ckpt.to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&bytes).unwrap(), ckpt);
        let _ = ckpt.to_preprocessor();
        let _ = ckpt.to_approximator();
    }
});

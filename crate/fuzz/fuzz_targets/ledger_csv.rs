#![no_main]

use docclean::engines::QueryLedger;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entries) = QueryLedger::parse_csv(text) {
        let ledger = QueryLedger::new();
        for e in entries.iter().cloned() {
            ledger.append(e);
        }
        let mut buf = Vec::new();
        ledger.write_csv(&mut buf).unwrap();
        assert_eq!(QueryLedger::parse_csv(std::str::from_utf8(&buf).unwrap()).unwrap().len(), entries.len());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use tkc::bank::HistoryBank;

fuzz_target!(|data: &[u8]| {
    if let Ok(bank) = HistoryBank::decode(data) {
        let mut out = Vec::new();
        bank.encode(&mut out);
        assert_eq!(out, data);
    }
});

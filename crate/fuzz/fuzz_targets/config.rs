#![no_main]

use libfuzzer_sys::fuzz_target;
use tkc::config::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = TrainConfig::from_text(text, &[]) {
        // the resolved text must parse back to the resolved configuration
        let text = cfg.to_text();
        let again = TrainConfig::from_text(&text, &[]).expect("resolved config parses");
        assert_eq!(again, cfg.resolved());
        assert_eq!(again.to_text(), text);
    }
});

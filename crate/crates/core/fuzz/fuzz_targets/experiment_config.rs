#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ctcst::experiment::ExperimentConfig::from_json(text) {
            let back = ctcst::experiment::ExperimentConfig::from_json(&cfg.to_json()).expect("snapshot reloads");
            assert_eq!(back, cfg);
        }
    }
});

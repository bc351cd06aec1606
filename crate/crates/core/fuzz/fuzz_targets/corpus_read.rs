#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = ctcst::corpus::read_corpus(data) {
        let mut out = Vec::new();
        ctcst::corpus::write_corpus(&corpus, &mut out).expect("valid corpus serializes");
        let again = ctcst::corpus::read_corpus(&out).expect("round trip");
        assert_eq!(again, corpus);
    }
});

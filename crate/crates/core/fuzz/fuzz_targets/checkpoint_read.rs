#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = ctcst::model::read_checkpoint(data) {
        let mut out = Vec::new();
        ctcst::model::write_checkpoint(&ckpt, &mut out).expect("valid checkpoint serializes");
        let again = ctcst::model::read_checkpoint(&out).expect("round trip");
        assert_eq!(again, ckpt);
    }
});

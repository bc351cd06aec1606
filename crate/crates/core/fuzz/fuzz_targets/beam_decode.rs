#![no_main]

use ctcst::decode::{beam_decode, greedy_decode, Posteriorgram};
use ctcst::Matrix;
use libfuzzer_sys::fuzz_target;

// Layout: [classes, beam, logits as i8...]; logits are scaled to [-8, 8).
fuzz_target!(|data: &[u8]| {
    let [c, w, rest @ ..] = data else { return };
    let classes = usize::from(*c % 6) + 1;
    let beam = usize::from(*w % 8) + 1;
    let frames = (rest.len() / classes).min(24);
    if frames == 0 {
        return;
    }
    let logits: Vec<f64> = rest[..frames * classes].iter().map(|&b| f64::from(b as i8) / 16.0).collect();
    let post = Posteriorgram::from_logits(&Matrix::from_vec(frames, classes, logits));
    let hyp = beam_decode(&post, 0, beam);
    assert!(hyp.log_score <= 0.0);
    assert!(hyp.labels.iter().all(|&l| l != 0 && l < classes));
    if beam == 1 {
        assert_eq!(hyp, greedy_decode(&post, 0));
    }
});

//! Token ids frozen from the reference Python tokenizer.

use bkprobe_clip::{ClipError, Tokenizer};

const CASES: &[(&str, &[u32])] = &[
    ("The label for this image is bouba", &[49406, 518, 9093, 556, 589, 2867, 533, 3728, 1792, 49407]),
    ("kiki", &[49406, 23962, 49407]),
    ("A picture of a spiky object", &[49406, 320, 1674, 539, 320, 3174, 2383, 14115, 49407]),
    ("This is very  loonah", &[49406, 589, 533, 1070, 549, 521, 1288, 49407]),
    ("kitaki's <label> 3.5 héllo!!", &[49406, 4566, 6592, 568, 283, 9093, 285, 274, 269, 276, 71, 3459, 19293, 748, 49407]),
    ("This drawing is takete", &[49406, 589, 3610, 533, 5052, 756, 49407]),
];

#[test]
fn bundled_vocabulary_reproduces_reference_ids() {
    let tok = Tokenizer::bundled();
    assert_eq!(tok.vocab_size(), 49408);
    for (text, want) in CASES {
        let ids = tok.tokenize(text, 77).unwrap();
        assert_eq!(ids, *want, "{text}");
    }
}

#[test]
fn overlong_prompts_are_rejected() {
    let tok = Tokenizer::bundled();
    let text = "kiki ".repeat(80);
    match tok.tokenize(&text, 77) {
        Err(ClipError::PromptTooLong { tokens, limit }) => {
            assert_eq!(tokens, 82);
            assert_eq!(limit, 77);
        }
        other => panic!("expected PromptTooLong, got {other:?}"),
    }
}

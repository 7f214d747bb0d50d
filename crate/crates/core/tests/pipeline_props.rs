use ctxpeft_core::pipeline::{
    assemble, assemble_layout, synth_dataset, CaptionRecord, Tokenizer, BOS, CAPTION_START, EOS, IMAGE_START, IMG,
    MAX_CAPTION, PAD, SEQ_LEN,
};
use ctxpeft_core::{ContextId, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, ..ProptestConfig::default() })]

    #[test]
    fn layout_holds_for_any_caption(caption in prop::collection::vec(4u32..120, 0..=70)) {
        let l = assemble_layout(&caption);
        let n = caption.len().min(MAX_CAPTION);
        prop_assert_eq!(l.token_ids.len(), SEQ_LEN);
        prop_assert_eq!(l.context_ids.len(), SEQ_LEN);
        prop_assert_eq!(l.loss_mask.len(), SEQ_LEN);
        prop_assert_eq!(l.token_ids[0], BOS);
        prop_assert!(l.token_ids[IMAGE_START..CAPTION_START].iter().all(|&t| t == IMG));
        prop_assert_eq!(&l.token_ids[CAPTION_START..CAPTION_START + n], &caption[..n]);
        if n < MAX_CAPTION {
            prop_assert_eq!(l.token_ids[CAPTION_START + n], EOS);
            prop_assert!(l.token_ids[CAPTION_START + n + 1..].iter().all(|&t| t == PAD));
        }
        let image = l.context_ids.iter().filter(|&&c| c == ContextId::IMAGE).count();
        prop_assert_eq!(image, 64);
        prop_assert_eq!(SEQ_LEN - image, 64);
        for (i, &c) in l.context_ids.iter().enumerate() {
            prop_assert_eq!(c == ContextId::IMAGE, (IMAGE_START..CAPTION_START).contains(&i));
        }
        for i in 0..SEQ_LEN {
            if l.loss_mask[i] {
                prop_assert!(i >= CAPTION_START - 1);
                prop_assert!(l.targets[i] != PAD);
            }
        }
        prop_assert_eq!(l.loss_positions().len(), n + 1);
        prop_assert_eq!(l.truncated, caption.len() > MAX_CAPTION);
        for i in 0..SEQ_LEN - 1 {
            prop_assert_eq!(l.targets[i], l.token_ids[i + 1]);
        }
    }
}

#[test]
fn five_word_caption_trains_six_positions() {
    let l = assemble_layout(&[10, 11, 12, 13, 14]);
    assert_eq!(l.loss_positions(), vec![64, 65, 66, 67, 68, 69]);
    assert_eq!(l.targets[69], EOS);
}

#[test]
fn long_caption_is_truncated_to_fit() {
    let rec = CaptionRecord::new(3, (0..70).map(|i| 4 + i as u32).collect());
    assert_eq!(rec.tokens.len(), MAX_CAPTION);
    let seq = assemble(&rec, Tensor::zeros(&[64, 8])).unwrap();
    assert_eq!(seq.len(), SEQ_LEN);
    assert_eq!(seq.targets[SEQ_LEN - 1], EOS);
}

#[test]
fn tokenizer_round_trips_its_vocabulary() {
    let tok = Tokenizer::new();
    let ids: Vec<u32> = (4..tok.vocab_size() as u32).collect();
    let text = tok.detokenize(&ids);
    assert_eq!(tok.tokenize(&text).unwrap(), ids);
}

#[test]
fn synthetic_captions_stay_in_vocabulary() {
    let tok = Tokenizer::new();
    assert!(tok.vocab_size() <= 256);
    for s in synth_dataset(300, 1, 8) {
        assert_eq!(tok.tokenize(&s.text).unwrap(), s.caption.tokens);
        assert!(s.caption.tokens.len() <= MAX_CAPTION);
    }
}

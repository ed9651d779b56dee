mod common;

use common::{toks, toy_pair, vocab_for};
use kqg::bundled;
use kqg::corpus::{
    bio_from_span, encode_batch, load_samples, write_samples, Bio, TagVocabs, TrainingSample, Vocabulary, BOS, EOS,
    PAD, UNK,
};
use proptest::prelude::*;

#[test]
fn bio_example() {
    let tags = bio_from_span(5, (1, 3)).unwrap();
    assert_eq!(tags, [Bio::O, Bio::B, Bio::I, Bio::I, Bio::O]);
    assert!(bio_from_span(3, (2, 3)).is_err());
    assert!(bio_from_span(3, (2, 1)).is_err());
}

#[test]
fn special_ids_are_fixed() {
    let v = Vocabulary::from_tokens(["zebra", "apple"]);
    assert_eq!((PAD, UNK, BOS, EOS), (0, 1, 2, 3));
    assert_eq!(v.token(PAD), Some("<pad>"));
    assert_eq!(v.token(UNK), Some("<unk>"));
    assert_eq!(v.len(), 6);
    assert_eq!(v.id_or_unk("missing"), UNK);
}

#[test]
fn oov_passage_token_gets_first_extended_id() {
    let samples = toy_pair();
    let vocab = vocab_for(&samples, &["zyx"]);
    let tags = TagVocabs::build(&samples);
    let b = encode_batch(&samples, &vocab, &tags).unwrap();
    assert_eq!(b.oov[0], Vec::<String>::new());
    assert_eq!(b.oov[1], vec!["zyx".to_string()]);
    assert_eq!(b.passage_ids[1][1], UNK);
    assert_eq!(b.copy_ids[1][1], vocab.len());
    // Question "what zyx animal sat ?" targets the copy slot.
    assert_eq!(b.question_ids[1][2], vocab.len());
    assert_eq!(b.surface(&vocab, 1, vocab.len()), "zyx");
    assert_eq!(b.extended_size(1), vocab.len() + 1);
}

#[test]
fn batch_shapes_are_consistent() {
    let samples = bundled::annotated().unwrap();
    let vocab = Vocabulary::build(&samples, 10_000, 1);
    let tags = TagVocabs::build(&samples);
    let b = encode_batch(&samples, &vocab, &tags).unwrap();
    let w = b.width();
    assert_eq!(w, samples.iter().map(|s| s.passage.len()).max().unwrap());
    for rows in [&b.passage_ids, &b.bio_ids, &b.pos_ids, &b.ner_ids, &b.copy_ids] {
        assert_eq!(rows.len(), samples.len());
        assert!(rows.iter().all(|r| r.len() == w));
    }
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(b.passage_lens[i], s.passage.len());
        assert!(b.passage_ids[i][s.passage.len()..].iter().all(|&x| x == PAD));
        assert!(b.bio_ids[i][s.passage.len()..].iter().all(|&x| x == PAD));
        assert_eq!(b.question_lens[i], s.question.len() + 2);
        assert_eq!(b.question_ids[i][0], BOS);
        assert_eq!(b.question_ids[i][s.question.len() + 1], EOS);
        assert_eq!(b.triples[i].is_some(), !s.triples.is_empty());
    }
    assert!(encode_batch(&[], &vocab, &tags).is_err());
}

#[test]
fn bundled_jsonl_roundtrips() {
    let samples = bundled::annotated().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let mut buf = Vec::new();
    write_samples(&mut buf, &samples).unwrap();
    std::fs::write(&path, &buf).unwrap();
    let back = load_samples(&path).unwrap();
    assert_eq!(back, samples);
    let mut again = Vec::new();
    write_samples(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn malformed_lines_are_rejected() {
    assert!(TrainingSample::from_json("{not json", 0).is_err());
    assert!(TrainingSample::from_json(r#"{"passage":["a"],"answer_span":[0,3],"question":["b"]}"#, 0).is_err());
}

fn span() -> impl Strategy<Value = (usize, (usize, usize))> {
    (1usize..30).prop_flat_map(|n| (Just(n), (0..n)).prop_flat_map(|(n, s)| (Just(n), (Just(s), s..n))))
}

proptest! {
    #[test]
    fn bio_is_well_formed((n, (s, e)) in span()) {
        let tags = bio_from_span(n, (s, e)).unwrap();
        prop_assert_eq!(tags.len(), n);
        prop_assert_eq!(tags.iter().filter(|&&t| t == Bio::B).count(), 1);
        for i in 0..n {
            if tags[i] == Bio::I {
                prop_assert!(i > 0 && matches!(tags[i - 1], Bio::B | Bio::I));
            }
        }
        prop_assert_eq!(tags.iter().filter(|&&t| t != Bio::O).count(), e - s + 1);
    }

    #[test]
    fn in_vocab_tokens_roundtrip(words in prop::collection::vec(prop::sample::select(vec!["ant", "bee", "cow", "dog"]), 1..10)) {
        let vocab = Vocabulary::from_tokens(["ant", "bee", "cow", "dog"]);
        let sentence = words.join(" ");
        let s = common::sample("x", &sentence, (0, 0), &sentence, None);
        let tags = TagVocabs::build(std::slice::from_ref(&s));
        let b = encode_batch(&[s], &vocab, &tags).unwrap();
        let decoded: Vec<String> = b.passage_ids[0].iter().map(|&i| b.surface(&vocab, 0, i)).collect();
        prop_assert_eq!(decoded, toks(&sentence));
        let q = &b.question_ids[0][1..b.question_lens[0] - 1];
        prop_assert_eq!(q, &b.copy_ids[0][..]);
    }

    #[test]
    fn oov_slots_are_dense_and_distinct(words in prop::collection::vec(prop::sample::select(vec!["ant", "qq", "rr", "ss", "dog"]), 1..10)) {
        let vocab = Vocabulary::from_tokens(["ant", "dog"]);
        let s = common::sample("x", &words.join(" "), (0, 0), "ant", None);
        let tags = TagVocabs::build(std::slice::from_ref(&s));
        let b = encode_batch(&[s], &vocab, &tags).unwrap();
        let mut seen = Vec::new();
        for (w, &c) in words.iter().zip(&b.copy_ids[0]) {
            if vocab.id(w).is_none() {
                prop_assert!(c >= vocab.len() && c < b.extended_size(0));
                prop_assert_eq!(b.surface(&vocab, 0, c), w.to_string());
                if !seen.contains(&c) { seen.push(c); }
            } else {
                prop_assert!(c < vocab.len());
            }
        }
        prop_assert_eq!(seen.len(), b.oov[0].len());
        prop_assert!(seen.iter().enumerate().all(|(k, &c)| c == vocab.len() + k));
    }
}

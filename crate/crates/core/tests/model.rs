mod common;

use common::{sample, setup, toy_pair, Setup};
use kqg::corpus::{encode_batch, BOS};
use kqg::kb::RelationLabel;
use kqg::model::{Ablation, PassageMemory};
use kqg::nn::{ForwardCtx, Group, Mat, ParameterSet, Tape};
use proptest::prelude::*;

fn set(params: &mut ParameterSet, id: kqg::nn::ParamId, value: Mat) {
    params.get_mut(id).value = value;
}

#[test]
fn gated_blend_is_exact() {
    let s = setup(&toy_pair(), &[], 8, 6, 1);
    let mut t = Tape::new(&s.params);
    let enc = s
        .model
        .encode_passage(&mut t, &mut ForwardCtx::eval(), &s.batch, 0)
        .unwrap();
    let (h, f, g, hh) = (t.value(enc.h), t.value(enc.f), t.value(enc.g), t.value(enc.h_hat));
    assert_eq!(g.shape(), (5, 1));
    for i in 0..5 {
        let gi = g.get(i, 0);
        for j in 0..8 {
            let expected = f.get(i, j) * gi + h.get(i, j) * (1.0 - gi);
            assert!((hh.get(i, j) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn single_token_passage_keeps_encoding() {
    let samples = vec![sample("one", "Paris", (0, 0), "where ?", None)];
    let s = setup(&samples, &[], 8, 6, 2);
    let mut t = Tape::new(&s.params);
    let enc = s
        .model
        .encode_passage(&mut t, &mut ForwardCtx::eval(), &s.batch, 0)
        .unwrap();
    assert!(t.value(enc.h_hat).max_abs_diff(t.value(enc.h)) < 1e-15);
}

#[test]
fn closed_gate_keeps_encoding() {
    let mut s = setup(&toy_pair(), &[], 8, 6, 3);
    set(&mut s.params, s.model.gate.b.unwrap(), Mat::filled(1, 1, -1000.0));
    let mut t = Tape::new(&s.params);
    let enc = s
        .model
        .encode_passage(&mut t, &mut ForwardCtx::eval(), &s.batch, 1)
        .unwrap();
    assert!(t.value(enc.h_hat).max_abs_diff(t.value(enc.h)) < 1e-12);
}

#[test]
fn zero_match_weights_average_the_passage() {
    let mut s = setup(&toy_pair(), &[], 8, 6, 4);
    set(&mut s.params, s.model.match_w, Mat::zeros(8, 8));
    let mut t = Tape::new(&s.params);
    let enc = s
        .model
        .encode_passage(&mut t, &mut ForwardCtx::eval(), &s.batch, 0)
        .unwrap();
    let (h, f) = (t.value(enc.h), t.value(enc.f));
    for j in 0..8 {
        let mean: f64 = (0..5).map(|i| h.get(i, j)).sum::<f64>() / 5.0;
        for i in 0..5 {
            assert!((f.get(i, j) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn copy_mass_accumulates_over_repeats() {
    let p = ParameterSet::new();
    let mut t = Tape::new(&p);
    let alpha = t.constant(Mat::row_vector(vec![0.2, 0.5, 0.3])).unwrap();
    // "the cat the" with the = 7, cat = 9, extended size 10.
    let pc = t.scatter(alpha, &[7, 9, 7], 10).unwrap();
    let v = t.value(pc);
    assert!((v.get(0, 7) - 0.5).abs() < 1e-15);
    assert!((v.get(0, 9) - 0.5).abs() < 1e-15);
    assert_eq!(v.sum(), 1.0);
}

fn first_step(s: &Setup, b: usize, knowledge: bool) -> (Mat, Mat, Mat, Mat, f64) {
    let mut t = Tape::new(&s.params);
    let mut ctx = ForwardCtx::eval();
    let enc = s.model.encode_passage(&mut t, &mut ctx, &s.batch, b).unwrap();
    let passage = PassageMemory::new(&mut t, enc.h_hat, &s.batch, b).unwrap();
    let mem = if knowledge {
        let ids = s.batch.triples[b].as_ref().unwrap();
        Some(
            s.model
                .knowledge_memory(&mut t, &mut ctx, &ids.head, ids.relation, &ids.tail)
                .unwrap(),
        )
    } else {
        None
    };
    let state = s.model.qg_init(&mut t, &enc).unwrap();
    let y = s.model.embed_words(&mut t, &[BOS]).unwrap();
    let out = s
        .model
        .qg_step(&mut t, &mut ctx, y, &state, &passage, mem.as_ref())
        .unwrap();
    (
        t.value(out.dist).clone(),
        t.value(out.p_vocab).clone(),
        t.value(out.p_copy).clone(),
        t.value(out.alpha).clone(),
        t.value(out.p_g).item(),
    )
}

#[test]
fn forced_copy_gate_selects_one_source() {
    let mut s = setup(&toy_pair(), &["zyx"], 8, 6, 5);
    let gate = s.model.qg.copy_gate.b.unwrap();
    set(&mut s.params, gate, Mat::filled(1, 1, 1000.0));
    let (dist, pv, _, _, pg) = first_step(&s, 1, true);
    assert_eq!(pg, 1.0);
    let v = pv.cols();
    assert!(dist.data()[..v]
        .iter()
        .zip(pv.data())
        .all(|(a, b)| (a - b).abs() < 1e-15));
    assert!(dist.data()[v..].iter().all(|&x| x == 0.0));

    set(&mut s.params, gate, Mat::filled(1, 1, -1000.0));
    let (dist, _, pc, _, pg) = first_step(&s, 1, true);
    assert_eq!(pg, 0.0);
    assert!(dist.max_abs_diff(&pc) < 1e-15);
}

#[test]
fn zero_knowledge_columns_match_memoryless_decoder() {
    let mut s = setup(&toy_pair(), &[], 8, 6, 6);
    let w = s.model.qg.w_e.w;
    let mut m = s.params.value(w).clone();
    for r in 8..16 {
        m.row_mut(r).fill(0.0);
    }
    set(&mut s.params, w, m);
    let with = first_step(&s, 0, true).0;
    let without = first_step(&s, 0, false).0;
    assert!(with.max_abs_diff(&without) < 1e-12);
}

#[test]
fn attention_ignores_padding() {
    let s = setup(&toy_pair(), &[], 8, 6, 7);
    // Row 0 has 5 tokens, row 1 has 6; width is 6.
    let (dist, _, pc, alpha, pg) = first_step(&s, 0, true);
    assert_eq!(alpha.cols(), 6);
    assert_eq!(alpha.get(0, 5), 0.0);
    assert!((alpha.sum() - 1.0).abs() < 1e-12);
    assert!((pc.sum() - 1.0).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&pg));
    assert!((dist.sum() - 1.0).abs() < 1e-12);
    assert!(dist.data().iter().all(|&p| p >= 0.0));
}

#[test]
fn coattention_on_single_rows() {
    let s = setup(&toy_pair(), &[], 8, 6, 8);
    let mut t = Tape::new(&s.params);
    let r = t
        .constant(Mat::row_vector((0..8).map(|i| i as f64 * 0.1).collect()))
        .unwrap();
    let h = t
        .constant(Mat::row_vector((0..8).map(|i| 1.0 - i as f64 * 0.05).collect()))
        .unwrap();
    let co = s.model.coattend(&mut t, r, h).unwrap();
    assert_eq!(t.value(co.a_h).data(), [1.0]);
    assert_eq!(t.value(co.a_r).data(), [1.0]);
    let expected: Vec<f64> = t.value(h).data().iter().chain(t.value(r).data()).copied().collect();
    assert_eq!(t.value(co.r_hat).data(), &expected[..]);
}

#[test]
fn coattention_weights_are_normalised() {
    let s = setup(&toy_pair(), &[], 8, 6, 9);
    let mut t = Tape::new(&s.params);
    let mut ctx = ForwardCtx::eval();
    let enc = s.model.encode_passage(&mut t, &mut ctx, &s.batch, 1).unwrap();
    let ids = s.batch.triples[1].as_ref().unwrap();
    let r = s
        .model
        .encode_head_tail(&mut t, &mut ctx, &ids.head, &ids.tail)
        .unwrap();
    assert_eq!(t.shape(r), (3, 8));
    let co = s.model.coattend(&mut t, r, enc.h_hat).unwrap();
    assert_eq!(t.shape(co.a_h), (6, 3));
    assert_eq!(t.shape(co.a_r), (3, 6));
    assert_eq!(t.shape(co.r_hat), (3, 16));
    for a in [co.a_h, co.a_r] {
        let m = t.value(a);
        for i in 0..m.rows() {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let two = s.model.encode_head_tail(&mut t, &mut ctx, &[4, 5], &[6]).unwrap();
    assert_eq!(t.shape(two).0, 4);
    let te = s
        .model
        .encode_head_relation(&mut t, &mut ctx, &[4, 5], RelationLabel::IsA)
        .unwrap();
    assert_eq!(t.shape(te), (3, 8));
}

#[test]
fn zero_classifier_is_uniform() {
    let mut s = setup(&toy_pair(), &[], 8, 6, 10);
    set(&mut s.params, s.model.rc.w, Mat::zeros(16, 6));
    let (label, probs) = s.model.predict_relation(&s.params, &s.batch, 0).unwrap();
    assert_eq!(label, RelationLabel::from_index(0).unwrap());
    assert!(probs.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
    let mut t = Tape::new(&s.params);
    let l = s
        .model
        .batch_loss(&mut t, &mut ForwardCtx::eval(), &s.batch, true, Ablation::default())
        .unwrap();
    assert!((t.scalar(l.l_r) - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn pure_batches_leave_knowledge_untouched() {
    let s = setup(&toy_pair(), &[], 8, 6, 11);
    let mut t = Tape::new(&s.params);
    let l = s
        .model
        .batch_loss(&mut t, &mut ForwardCtx::eval(), &s.batch, false, Ablation::default())
        .unwrap();
    let b = l.bundle(&t);
    assert_eq!((b.l_r, b.l_t), (0.0, 0.0));
    assert_eq!(b.l, b.l_q);
    let grads = t.backward(l.l).unwrap();
    for (id, p) in s.params.iter() {
        let g = grads.get(id);
        if p.group == Group::Knowledge {
            assert!(g.is_none_or(|g| g.data().iter().all(|&x| x == 0.0)), "{}", p.name);
        }
    }
    assert!(grads.get(s.model.word_emb).is_some());
}

#[test]
fn ablations_zero_their_terms() {
    let s = setup(&toy_pair(), &[], 8, 6, 12);
    let run = |ab: Ablation| {
        let mut t = Tape::new(&s.params);
        let l = s
            .model
            .batch_loss(&mut t, &mut ForwardCtx::eval(), &s.batch, true, ab)
            .unwrap();
        l.bundle(&t)
    };
    let full = run(Ablation::default());
    let bare = run(Ablation {
        no_tg: true,
        no_rc: true,
    });
    assert!(full.l_r > 0.0 && full.l_t > 0.0);
    assert_eq!((bare.l_r, bare.l_t), (0.0, 0.0));
    assert_eq!(bare.l_q, full.l_q);
    assert_ne!(bare.l, full.l);
    let no_tg = run(Ablation {
        no_tg: true,
        no_rc: false,
    });
    assert_eq!((no_tg.l_t, no_tg.l_r), (0.0, full.l_r));
}

#[test]
fn missing_triple_is_rejected_for_knowledge_batches() {
    let samples = vec![sample("p", "a plain passage here", (1, 1), "what passage ?", None)];
    let s = setup(&samples, &[], 8, 6, 13);
    let mut t = Tape::new(&s.params);
    assert!(s
        .model
        .batch_loss(&mut t, &mut ForwardCtx::eval(), &s.batch, true, Ablation::default())
        .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decode_distributions_are_proper(seed in 0u64..10_000, b in 0usize..2, knowledge in any::<bool>()) {
        let s = setup(&toy_pair(), &["zyx"], 8, 6, seed);
        let (dist, pv, pc, alpha, pg) = first_step(&s, b, knowledge);
        prop_assert_eq!(dist.cols(), s.batch.extended_size(b));
        for m in [&dist, &pv, &pc, &alpha] {
            prop_assert!(m.data().iter().all(|&p| p >= 0.0 && p.is_finite()));
            prop_assert!((m.sum() - 1.0).abs() < 1e-9);
        }
        prop_assert!((0.0..=1.0).contains(&pg));
        for i in s.batch.passage_lens[b]..s.batch.width() {
            prop_assert_eq!(alpha.get(0, i), 0.0);
        }
    }

    #[test]
    fn losses_are_finite_and_additive(seed in 0u64..10_000) {
        let samples = toy_pair();
        let s = setup(&samples, &["zyx"], 8, 6, seed);
        let batch = encode_batch(&samples, &s.vocab, &s.tags).unwrap();
        let mut t = Tape::new(&s.params);
        let l = s.model.batch_loss(&mut t, &mut ForwardCtx::eval(), &batch, true, Ablation::default()).unwrap();
        let b = l.bundle(&t);
        prop_assert!(b.l_q.is_finite() && b.l_r.is_finite() && b.l_t.is_finite());
        prop_assert_eq!((b.l_q + b.l_r) + b.l_t, b.l);
    }
}

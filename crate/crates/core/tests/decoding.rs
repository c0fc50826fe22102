mod common;

use std::sync::OnceLock;

use common::{toy_features, toy_model, TOY_TEXTS};
use las::beam::{beam_search, decode, greedy, oracle_wer, Dictionary, LasDecoder, StepModel};
use las::listener::encode;
use las::numerics::Tensor;
use las::speller::sequence_log_prob;
use las::training::Checkpoint;
use las::vocab::{output_token, Vocabulary, SOS_ID};

fn model() -> &'static Checkpoint {
    static MODEL: OnceLock<Checkpoint> = OnceLock::new();
    MODEL.get_or_init(|| toy_model(150))
}

/// Twenty noisy renditions of the toy texts.
fn inputs() -> Vec<(String, Tensor<f32>)> {
    (0..20)
        .map(|i| {
            let t = TOY_TEXTS[i % TOY_TEXTS.len()];
            (t.to_string(), toy_features(t, 0.4, i as u64 + 1))
        })
        .collect()
}

#[test]
fn stored_scores_match_teacher_forced_recomputation() {
    let m = model();
    for (_, x) in inputs() {
        let enc = encode(&m.params, &m.model, &x).unwrap();
        let r = decode(&m.params, &m.model, &x, 6, None, None).unwrap();
        assert!(r.complete);
        for h in &r.hyps {
            let mut toks = vec![SOS_ID];
            toks.extend(h.symbols.iter().map(|&s| output_token(s)));
            let want = sequence_log_prob(&m.params, &m.model, &enc, &toks).unwrap();
            assert!((h.log_prob - want).abs() < 1e-5, "{} vs {want}", h.log_prob);
        }
    }
}

#[test]
fn width_one_is_greedy() {
    let m = model();
    for (_, x) in inputs() {
        let enc = encode(&m.params, &m.model, &x).unwrap();
        let dec = LasDecoder::new(&m.params, &m.model, &enc).unwrap();
        let g = greedy(&dec, dec.default_max_len()).unwrap();
        let b = beam_search(&dec, 1, dec.default_max_len(), None).unwrap();
        assert_eq!(b.best().unwrap().symbols, g.symbols);
    }
}

#[test]
fn top_score_does_not_fall_as_beam_widens() {
    let m = model();
    for (_, x) in inputs() {
        let enc = encode(&m.params, &m.model, &x).unwrap();
        let dec = LasDecoder::new(&m.params, &m.model, &enc).unwrap();
        let mut last = f64::NEG_INFINITY;
        for beta in [1, 2, 4, 8] {
            let r = beam_search(&dec, beta, dec.default_max_len(), None).unwrap();
            let best = r.best().unwrap().log_prob;
            assert!(best >= last - 1e-9, "beta {beta}: {best} < {last}");
            last = best;
        }
    }
}

#[test]
fn oracle_never_worse_than_top_one_and_improves_with_width() {
    let vocab = Vocabulary::standard();
    let m = model();
    for (truth, x) in inputs() {
        let mut last = f64::INFINITY;
        for beta in [1, 2, 4, 8, 16] {
            let r = decode(&m.params, &m.model, &x, beta, None, None).unwrap();
            let top = las::eval::wer(&truth, &r.best().unwrap().text(&vocab)).unwrap().percent();
            let (oracle, _) = oracle_wer(&r, &truth, &vocab).unwrap();
            assert!(oracle <= top);
            assert!(oracle <= last + 1e-9, "beta {beta}: {oracle} > {last}");
            last = oracle;
        }
    }
}

#[test]
fn dictionary_decoding_only_emits_known_words() {
    let vocab = Vocabulary::standard();
    let words = ["ab", "cab", "c", "bb"];
    let dict = Dictionary::new(words);
    let m = model();
    let mut complete = 0;
    for (_, x) in inputs() {
        let r = decode(&m.params, &m.model, &x, 4, None, Some(&dict)).unwrap();
        for h in r.hyps.iter().filter(|h| h.complete) {
            complete += 1;
            let text = h.text(&vocab);
            for w in text.split(' ') {
                assert!(words.contains(&w), "{text:?}");
            }
        }
    }
    assert!(complete > 0);
}

#[test]
fn decoder_distributions_are_normalized() {
    let m = model();
    let x = toy_features("cab", 0.4, 9);
    let enc = encode(&m.params, &m.model, &x).unwrap();
    let dec = LasDecoder::new(&m.params, &m.model, &enc).unwrap();
    let mut state = dec.initial();
    let mut prev = None;
    for _ in 0..6 {
        let (next, lp) = dec.step(&state, prev).unwrap();
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-5);
        let arg = lp.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prev = Some(arg);
        state = next;
    }
}

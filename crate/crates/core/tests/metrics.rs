use las::eval::{cer, corpus_error, edit_counts, error_by_length, recall_by_frequency, wer, wer_with};
use las::lm::{NGramModel, BOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain recursive edit distance, no memoization.
fn brute_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_distance(ra, rb) + usize::from(x != y);
            let del = brute_distance(ra, b) + 1;
            let ins = brute_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for w in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(w);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn edit_counts_match_brute_force_distance() {
    let short = all_sequences(3);
    for a in &short {
        for b in &short {
            let e = edit_counts(a, b);
            assert_eq!(e.errors(), brute_distance(a, b), "{a:?} {b:?}");
            assert_eq!(e.ref_words, a.len());
            assert_eq!(a.len() + e.insertions - e.deletions, b.len());
        }
    }
    let long = all_sequences(5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..3000 {
        let a = &long[rng.random_range(0..long.len())];
        let b = &long[rng.random_range(0..long.len())];
        assert_eq!(edit_counts(a, b).errors(), brute_distance(a, b), "{a:?} {b:?}");
    }
}

#[test]
fn word_error_edge_cases() {
    assert_eq!(wer("a b c", "a b c").unwrap().percent(), 0.0);
    assert_eq!(wer("a b", "").unwrap().deletions, 2);
    assert_eq!(wer("a", "a b c").unwrap().percent(), 200.0);
    assert!(wer("", "a").is_err());
    assert_eq!(wer("a <unk> b", "a b").unwrap().percent(), 0.0);
    assert!(wer_with("a <unk> b", "a b", true).unwrap().percent() > 0.0);
    assert_eq!(cer("abc", "abd").unwrap().substitutions, 1);
}

#[test]
fn corpus_rate_pools_counts() {
    let refs = vec!["a b c d".to_string(), "e f".to_string()];
    let hyps = vec!["a b c d".to_string(), "e".to_string()];
    let pooled = corpus_error(&refs, &hyps, wer).unwrap();
    assert_eq!(pooled.errors(), 1);
    assert_eq!(pooled.ref_words, 6);
    assert!(corpus_error(&refs, &hyps[..1], wer).is_err());
}

#[test]
fn breakdowns_ignore_utterance_order() {
    let train: Vec<String> = ["a b", "a c", "b"].iter().map(|s| s.to_string()).collect();
    let refs: Vec<String> = ["a b", "c", "a c d"].iter().map(|s| s.to_string()).collect();
    let hyps: Vec<String> = ["a", "c", "a d"].iter().map(|s| s.to_string()).collect();
    let rec = recall_by_frequency(&train, &refs, &hyps).unwrap();
    let a = rec.iter().find(|r| r.word == "a").unwrap();
    assert_eq!((a.train_count, a.expected, a.hits), (2, 2, 2));
    let d = rec.iter().find(|r| r.word == "d").unwrap();
    assert_eq!((d.train_count, d.recall), (0, 1.0));
    let rows = error_by_length(&refs, &hyps).unwrap();
    assert_eq!(rows.iter().map(|r| r.words).collect::<Vec<_>>(), vec![1, 2, 3]);

    let rev = |v: &[String]| v.iter().rev().cloned().collect::<Vec<_>>();
    assert_eq!(recall_by_frequency(&train, &rev(&refs), &rev(&hyps)).unwrap(), rec);
    assert_eq!(error_by_length(&rev(&refs), &rev(&hyps)).unwrap(), rows);
}

fn random_corpus(seed: u64, sentences: usize) -> Vec<String> {
    let words = ["a", "b", "c", "d", "e"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sentences)
        .map(|_| {
            let n = rng.random_range(1..6);
            (0..n).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

#[test]
fn every_history_sums_to_one() {
    for (seed, n, k) in [(0, 3, 1.0), (1, 2, 0.5), (2, 3, 0.01), (3, 1, 2.0)] {
        let lm = NGramModel::fit(&random_corpus(seed, 30), n, k).unwrap();
        let outcomes = lm.outcomes();
        assert_eq!(outcomes.len(), lm.vocab_size());
        let mut histories: Vec<Vec<String>> = lm.histories().cloned().collect();
        histories.push(vec!["zzz".into(); n - 1]);
        histories.push(vec![BOS.to_string(); n - 1]);
        for h in &histories {
            let total: f64 = outcomes.iter().map(|w| lm.prob(h, w)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{h:?}: {total}");
        }
    }
}

#[test]
fn more_evidence_never_lowers_a_sentence() {
    let base = random_corpus(4, 20);
    let lm = NGramModel::fit(&base, 3, 0.5).unwrap();
    for s in base.iter().take(10) {
        let mut more = base.clone();
        more.push(s.clone());
        let lm2 = NGramModel::fit(&more, 3, 0.5).unwrap();
        assert_eq!(lm.vocab_size(), lm2.vocab_size());
        assert!(lm2.log_prob(s) >= lm.log_prob(s));
    }
}

#[test]
fn single_sentence_corpus_prefers_its_sentence() {
    let lm = NGramModel::fit(&["a b c"], 3, 0.1).unwrap();
    let seen = lm.log_prob("a b c");
    for other in ["a c b", "b a c", "a b", "a b c c", "c b a"] {
        assert!(seen > lm.log_prob(other), "{other}");
    }
    assert!(lm.log_prob("never seen words").is_finite());
}

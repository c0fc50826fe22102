use las::synth::{
    gen_corpus, generate_texts, read_features, synth_corpus, write_features, Manifest, SynthConfig, LEXICON,
};
use las::vocab::normalize;
use las::LasError;

fn texts() -> Vec<String> {
    vec!["call one".into(), "help".into(), "weather today near me".into()]
}

#[test]
fn three_texts_make_three_rows_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let ms = gen_corpus(&cfg, &texts(), dir.path(), false).unwrap();
    assert_eq!(ms.len(), 1);
    let back = Manifest::read(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(back.entries, ms[0].entries);
    assert_eq!(back.len(), 3);
    for (e, t) in back.entries.iter().zip(texts()) {
        assert!(back.feature_path(e).is_file());
        assert_eq!(e.transcript, t);
    }
    let utts = back.load().unwrap();
    for u in &utts {
        assert_eq!(u.features.cols(), cfg.feature_dim);
        assert!(u.features.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn noisy_copy_shares_labels_and_durations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let ms = gen_corpus(&cfg, &texts(), dir.path(), true).unwrap();
    assert_eq!(ms.len(), 2);
    let clean = ms[0].load().unwrap();
    let noisy = Manifest::read(&dir.path().join("noisy/manifest.tsv")).unwrap().load().unwrap();
    for (c, n) in clean.iter().zip(&noisy) {
        assert_eq!((&c.id, &c.transcript), (&n.id, &n.transcript));
        assert_eq!(c.features.shape(), n.features.shape());
        assert_ne!(c.features, n.features);
    }
    // Doubled noise shows up as a larger spread around the clean signal.
    let noiseless = synth_corpus(&SynthConfig { noise: 0.0, ..cfg.clone() }, &texts(), "utt", 1.0).unwrap();
    let spread = |us: &[las::synth::Utterance]| -> f64 {
        let mut sq = 0.0;
        let mut n = 0.0;
        for (u, z) in us.iter().zip(&noiseless) {
            for (a, b) in u.features.data().iter().zip(z.features.data()) {
                sq += ((a - b) as f64).powi(2);
                n += 1.0;
            }
        }
        (sq / n).sqrt()
    };
    let (s1, s2) = (spread(&clean), spread(&noisy));
    assert!((s1 - 0.1).abs() < 0.02, "{s1}");
    assert!((s2 - 0.2).abs() < 0.04, "{s2}");
}

#[test]
fn features_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let u = &synth_corpus(&cfg, &texts(), "x", 1.0).unwrap()[2];
    let p = dir.path().join("a/b/u.feat");
    write_features(&p, &u.features).unwrap();
    let back = read_features(&p).unwrap();
    let bits = |t: &las::numerics::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(back.shape(), u.features.shape());
    assert_eq!(bits(&back), bits(&u.features));
}

#[test]
fn io_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.feat");
    match read_features(&missing) {
        Err(e @ LasError::Io { .. }) => assert!(e.to_string().contains("nope.feat")),
        other => panic!("{other:?}"),
    }
    let bad = dir.path().join("manifest.tsv");
    std::fs::write(&bad, "only\ttwo\n").unwrap();
    assert!(matches!(Manifest::read(&bad), Err(LasError::Format { .. })));
}

#[test]
fn generated_texts_are_normalized_lexicon_words() {
    let ts = generate_texts(3, 200, LEXICON, 1, 6).unwrap();
    assert_eq!(ts.len(), 200);
    assert_eq!(ts, generate_texts(3, 200, LEXICON, 1, 6).unwrap());
    for t in &ts {
        assert_eq!(&normalize(t), t);
        let n = t.split(' ').count();
        assert!((1..=6).contains(&n));
        assert!(t.split(' ').all(|w| LEXICON.contains(&w) && w.len() <= 8));
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use las::beam::{decode, greedy, read_nbest, LasDecoder};
use las::listener::encode;
use las::synth::Manifest;
use las::training::Checkpoint;
use las::vocab::Vocabulary;

fn las(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_las"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = las(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"{
  "model": {"input_dim": 40, "listener_hidden": 4, "pyramid_layers": 1, "speller_hidden": 6,
            "embed_dim": 4, "attention_dim": 5, "output_hidden": 6},
  "train": {"epochs": 2, "batch_size": 2, "checkpoint_every": 2},
  "synth": {"frames_min": 2, "frames_max": 3}
}"#;

#[test]
fn pipeline_from_data_to_rescored_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(d, &["--config", "tiny.json", "--seed", "4", "gen-data", "--out", "data", "--count", "6", "--noisy"]);
    assert_eq!(Manifest::read(&d.join("data/manifest.tsv")).unwrap().len(), 6);
    assert!(d.join("data/noisy/manifest.tsv").is_file());

    let log = ok(d, &["--config", "tiny.json", "train", "--manifest", "data/manifest.tsv", "--out", "run"]);
    let steps: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(steps.len(), 6);
    assert!(steps.iter().all(|s| s["loss"].as_f64().unwrap().is_finite()));
    assert!(d.join("run/final.ckpt").is_file());
    assert!(d.join("run/step00000002.ckpt").is_file());

    // Resuming from the last checkpoint with one more epoch adds three steps.
    let more = TINY.replace("\"epochs\": 2", "\"epochs\": 3");
    fs::write(d.join("more.json"), more).unwrap();
    let log = ok(
        d,
        &["--config", "more.json", "train", "--manifest", "data/manifest.tsv", "--out", "run2", "--checkpoint", "run/final.ckpt"],
    );
    assert_eq!(log.lines().count(), 3);

    // Width one is greedy.
    ok(d, &["decode", "--manifest", "data/manifest.tsv", "--checkpoint", "run/final.ckpt", "--beam", "1", "--out", "b1.jsonl"]);
    let nb = read_nbest(&fs::read_to_string(d.join("b1.jsonl")).unwrap()).unwrap();
    let ckpt = Checkpoint::load(&d.join("run/final.ckpt")).unwrap();
    let utts = Manifest::read(&d.join("data/manifest.tsv")).unwrap().load().unwrap();
    let vocab = Vocabulary::standard();
    for (n, u) in nb.iter().zip(&utts) {
        assert_eq!(n.utt_id, u.id);
        let enc = encode(&ckpt.params, &ckpt.model, &u.features).unwrap();
        let dec = LasDecoder::new(&ckpt.params, &ckpt.model, &enc).unwrap();
        let g = greedy(&dec, dec.default_max_len()).unwrap();
        assert_eq!(n.hyps[0].text, g.text(&vocab));
        let b = decode(&ckpt.params, &ckpt.model, &u.features, 1, None, None).unwrap();
        assert_eq!(n.hyps[0].text, b.best().unwrap().text(&vocab));
    }

    ok(d, &["decode", "--manifest", "data/manifest.tsv", "--checkpoint", "run/final.ckpt", "--beam", "3", "--out", "b3.jsonl"]);
    ok(d, &["fit-lm", "--text", "data/manifest.tsv", "--out", "lm.txt"]);
    ok(d, &["rescore", "--nbest", "b3.jsonl", "--lm", "lm.txt", "--lambda", "0.5", "--out", "r.jsonl"]);
    let rescored = read_nbest(&fs::read_to_string(d.join("r.jsonl")).unwrap()).unwrap();
    assert!(rescored.iter().all(|n| n.hyps.iter().all(|h| h.combined.is_some())));

    let report = ok(d, &["eval", "--ref", "data/manifest.tsv", "--hyp", "r.jsonl", "--oracle", "--by-length"]);
    assert!(report.starts_with("WER "));
    assert!(report.contains("oracle WER"));
    assert!(report.contains("words,utterances"));

    let sweep = ok(d, &["beam-sweep", "--manifest", "data/manifest.tsv", "--checkpoint", "run/final.ckpt", "--beams", "1,2"]);
    assert_eq!(sweep.lines().next(), Some("beam,wer,oracle_wer"));
    assert_eq!(sweep.lines().count(), 3);

    let csv = ok(
        d,
        &["attention-dump", "--manifest", "data/manifest.tsv", "--checkpoint", "run/final.ckpt", "--utt", "utt00000", "--reference"],
    );
    let transcript = &utts[0].transcript;
    assert_eq!(csv.lines().count(), 1 + transcript.chars().count() + 1);
}

#[test]
fn identical_reference_and_hypothesis_score_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("ref.tsv"), "a\thow much wood\nb\tcall one\n").unwrap();
    let out = ok(d, &["eval", "--ref", "ref.tsv", "--hyp", "ref.tsv"]);
    assert!(out.starts_with("WER 0.00"), "{out}");
}

#[test]
fn usage_errors_exit_two_and_runtime_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bad_flag = las(d, &["decode", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    let missing = las(d, &["decode", "--manifest", "nope.tsv", "--checkpoint", "nope.ckpt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

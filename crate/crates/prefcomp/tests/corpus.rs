use std::fs;

use prefcomp::corpus::{load_corpus, write_synthetic_corpus, CorpusManifest};
use prefcomp::wav::{read_wav, write_wav, WavFormat};
use prefcomp::Error;
use prefcomp_core::audio::AudioClip;
use prefcomp_core::fixtures::SyntheticCorpusConfig;

fn clip(n: usize, rate: u32) -> AudioClip {
    AudioClip::new("c", (0..n).map(|i| 0.3 * (i as f64 * 0.01).sin()).collect(), rate).unwrap()
}

#[test]
fn three_wavs_are_listed_in_path_order() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("spk2")).unwrap();
    fs::create_dir_all(dir.path().join("spk1")).unwrap();
    write_wav(&dir.path().join("spk2/b.wav"), &clip(100, 16000), WavFormat::Pcm16).unwrap();
    write_wav(&dir.path().join("spk1/z.WAV"), &clip(100, 16000), WavFormat::Pcm16).unwrap();
    write_wav(&dir.path().join("spk1/a.wav"), &clip(100, 16000), WavFormat::Float32).unwrap();
    fs::write(dir.path().join("notes.txt"), "not audio").unwrap();
    let m = load_corpus(dir.path()).unwrap();
    let ids: Vec<&str> = m.entries.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["spk1/a", "spk1/z", "spk2/b"]);
    assert_eq!(m.entries[0].speaker, "spk1");
    assert_eq!(m.entries[2].sentence, "b");
}

#[test]
fn empty_directory_has_no_audio() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_corpus(dir.path()), Err(Error::NoAudioFound(_))));
}

#[test]
fn corrupt_header_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("a.wav");
    write_wav(&good, &clip(100, 16000), WavFormat::Pcm16).unwrap();
    let bytes = fs::read(&good).unwrap();
    let bad = dir.path().join("b.wav");
    fs::write(&bad, &bytes[..30]).unwrap();
    match load_corpus(dir.path()) {
        Err(Error::Format { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn manifest_round_trips_and_resamples() {
    let dir = tempfile::tempdir().unwrap();
    write_wav(&dir.path().join("x.wav"), &clip(4800, 48000), WavFormat::Float32).unwrap();
    let m = load_corpus(dir.path()).unwrap();
    let path = dir.path().join("manifest.tsv");
    m.save(&path).unwrap();
    let back = CorpusManifest::load(&path).unwrap();
    assert_eq!(back, m);
    let clips = back.load_clips(16000).unwrap();
    assert_eq!(clips[0].sample_rate_hz(), 16000);
    assert!((clips[0].len() as i64 - 1600).abs() <= 1);
    assert_eq!(clips[0].id, "x");
    assert!(CorpusManifest::from_tsv("only\ttwo\n").is_err());
}

#[test]
fn synthetic_corpus_on_disk_matches_memory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticCorpusConfig { n_speakers: 2, sentences_per_speaker: 2, sentence_s: 0.2, noise_s: 0.5, ..Default::default() };
    let (speech, noise) = write_synthetic_corpus(dir.path(), &cfg, 4).unwrap();
    let m = load_corpus(&speech).unwrap();
    assert_eq!(m.len(), 4);
    assert_eq!(m.entries[0].speaker, "spk00");
    let mem = prefcomp_core::fixtures::synthetic_corpus(&cfg, 4).unwrap();
    let first = read_wav(&m.entries[0].path).unwrap();
    for (a, b) in mem.speech[0].samples().iter().zip(first.samples()) {
        assert_eq!(*b, *a as f32 as f64);
    }
    assert_eq!(load_corpus(&noise).unwrap().len(), 1);
}

use densecap::corpus::{load_annotations, save_annotations, Corpus, SynthConfig, Synthesizer};
use densecap::Error;
use std::path::PathBuf;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn golden_file_parses_with_tokenized_sentences() {
    let ann = load_annotations(&data("golden_valid.json")).unwrap();
    assert_eq!(ann.len(), 2);
    let a = &ann["v_alpha"];
    assert_eq!(a.duration, 42.5);
    assert_eq!((a.events[0].start, a.events[0].end), (0.0, 12.25));
    assert_eq!(a.events[1].sentence, ["the", "man", "jumps", "over", "a", "fence"]);
    assert_eq!(ann["v_beta"].events[0].sentence, ["a", "woman", "slowly", "paints", "a", "wall"]);
}

#[test]
fn golden_file_without_duration_is_rejected_naming_the_video() {
    let err = load_annotations(&data("golden_missing_duration.json")).unwrap_err();
    match &err {
        Error::Annotation { video_id, message } => {
            assert_eq!(video_id, "v_gamma");
            assert!(message.contains("duration"), "{}", message);
        }
        other => panic!("unexpected error {:?}", other),
    }
}

#[test]
fn saved_golden_file_reloads_identically() {
    let ann = load_annotations(&data("golden_valid.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out.json");
    save_annotations(&p, &ann).unwrap();
    assert_eq!(load_annotations(&p).unwrap(), ann);
}

#[test]
fn corpus_directory_round_trip() {
    let cfg = SynthConfig { n_videos: 6, n_val: 2, seed: 3, ..SynthConfig::default() };
    let vids = Synthesizer::new(cfg.clone()).unwrap().generate();
    let corpus = Corpus {
        meta: densecap::corpus::CorpusMeta { stride: cfg.stride, rgb_dim: cfg.rgb_dim, flow_dim: cfg.flow_dim },
        train: vids[..4].to_vec(),
        val: vids[4..].to_vec(),
    };
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let back = Corpus::load(dir.path()).unwrap();
    assert_eq!(back.train.len(), 4);
    assert_eq!(back.val.len(), 2);
    for (a, b) in corpus.train.iter().chain(&corpus.val).zip(back.train.iter().chain(&back.val)) {
        assert_eq!(a.features, b.features);
        assert_eq!(a.events.len(), b.events.len());
        for (x, y) in a.events.iter().zip(&b.events) {
            assert_eq!(x.sentence, y.sentence);
            assert!((x.start - y.start).abs() < 1e-9 && (x.end - y.end).abs() < 1e-9);
        }
    }
}

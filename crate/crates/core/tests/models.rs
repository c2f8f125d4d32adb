mod common;

use common::*;
use densecap::checkpoint::Checkpoint;
use densecap::corpus::{generate_corpus, SynthConfig, Vocabulary};
use densecap::decoder::{DecoderConfig, DecoderIds, WordState};
use densecap::esgn::{selector_targets, Selector, SelectorConfig};
use densecap::model::{greedy_paragraph, Captioner, CaptionerConfig};
use densecap::params::ParamStore;
use densecap::pipeline::{predict, train_xe_pipeline, ProposalSource};
use densecap::proposals::{CandidateSet, Proposal, Segment};
use densecap::tape::Graph;
use densecap::training::{ensemble_decode, scst_step, train_scst, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn fill(store: &mut ParamStore<f64>, id: densecap::params::ParamId, v: f64) {
    store.get_mut(id).data.iter_mut().for_each(|x| *x = v);
}

/// Hidden state after one sentence step and the logits of the first word.
fn gated_output(store: &ParamStore<f64>, ids: &DecoderIds, z: &[f64], s_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let b = g.bind(store);
    let mut state = ids.initial_state(&mut g);
    state.s = g.vector(s_prev.to_vec());
    let seg = Segment { start: 1.0, end: 3.0 };
    let l = ids.position_embed(&mut g, &b, seg, 10.0);
    let zn = g.vector(z.to_vec());
    let st = ids.sentence_step(&mut g, &b, state, l, zn);
    let f = ids.frames(&mut g, &b, 2, vec![0.5, -0.2, 0.1, 0.9, 0.3, -0.7, 0.2, 0.4]);
    let h = ids.hidden();
    let ws = WordState { h: g.zeros(h), c: g.zeros(h) };
    let (_, logits) = ids.word_step(&mut g, &b, ws, 1, st.h, &f).unwrap();
    (g.value(st.h).to_vec(), g.value(logits).to_vec())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn saturated_gate_isolates_one_pathway() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let ids = DecoderIds::register(&mut store, &DecoderConfig { hidden: 6, ..DecoderConfig::default() }, 4, 7, 10, &mut rng);
    fill(&mut store, ids.gate_w, 0.0);
    let r = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
    let (z1, z2, s1, s2) = (r(&mut rng, 7), r(&mut rng, 7), r(&mut rng, 6), r(&mut rng, 6));

    fill(&mut store, ids.gate_b, 50.0);
    let (h_a, lo_a) = gated_output(&store, &ids, &z1, &s1);
    let (h_b, lo_b) = gated_output(&store, &ids, &z1, &s2);
    assert_eq!(h_a, h_b);
    assert_eq!(lo_a, lo_b);
    let (h_c, _) = gated_output(&store, &ids, &z2, &s1);
    assert!(max_diff(&h_a, &h_c) > 1e-6, "the visual pathway is live");

    fill(&mut store, ids.gate_b, -50.0);
    let (h_a, lo_a) = gated_output(&store, &ids, &z1, &s1);
    let (h_b, lo_b) = gated_output(&store, &ids, &z2, &s1);
    assert!(max_diff(&h_a, &h_b) < 1e-12);
    assert!(max_diff(&lo_a, &lo_b) < 1e-12);
    let (h_c, _) = gated_output(&store, &ids, &z1, &s2);
    assert!(max_diff(&h_a, &h_c) > 1e-6, "the linguistic pathway is live");
}

#[test]
fn first_event_is_purely_visual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let ids = DecoderIds::register(&mut store, &DecoderConfig { hidden: 5, ..DecoderConfig::default() }, 4, 6, 8, &mut rng);
    let z: Vec<f64> = (0..6).map(|k| k as f64 * 0.3 - 0.7).collect();
    let (h_ref, _) = gated_output(&store, &ids, &z, &[0.0; 5]);
    // With s_prev = 0 the linguistic projection contributes nothing.
    fill(&mut store, ids.lin_w, 7.0);
    let (h, _) = gated_output(&store, &ids, &z, &[0.0; 5]);
    assert_eq!(h, h_ref);
}

fn tiny_record(seed: u64) -> densecap::corpus::VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_record(&mut rng, "v", 24, 4, 0)
}

#[test]
fn ablation_switches_are_inert_when_off() {
    let rec = tiny_record(1);
    let base = CaptionerConfig { hidden: 6, d_pos: 4, max_len: 5, ..Default::default() };
    let off = CaptionerConfig { use_tsrm: false, use_sent_rnn: false, ..base.clone() };
    let m = Captioner::<f64>::new(&off, 4, 12, 3).unwrap();
    assert_eq!(m.dec.z_dim, 4);
    let b = Segment { start: 6.0, end: 10.0 };
    let x = greedy_paragraph(&m, &rec, &[Segment { start: 0.0, end: 2.0 }, b]).unwrap();
    let y = greedy_paragraph(&m, &rec, &[Segment { start: 1.0, end: 9.5 }, b]).unwrap();
    assert_eq!(x[1], y[1], "without the sentence RNN each event decodes independently");
    let single = greedy_paragraph(&m, &rec, &[b]).unwrap();
    assert_eq!(single[0], x[1]);

    let no_cmg = Captioner::<f64>::new(&CaptionerConfig { use_cmg: false, ..base.clone() }, 4, 12, 3).unwrap();
    assert!(no_cmg.params.id("cmg.w").is_some());
    let mut s = no_cmg.session(&rec, &[b]).unwrap();
    s.begin_event(0);
    assert!(s.gates.is_empty() && s.state.g.is_none());
    let full = Captioner::<f64>::new(&base, 4, 12, 3).unwrap();
    assert_eq!(full.dec.z_dim, 4 + 6);
}

#[test]
fn ensembles_of_identical_members_match_greedy() {
    let rec = tiny_record(2);
    let cfg = CaptionerConfig { hidden: 8, d_pos: 4, max_len: 7, ..Default::default() };
    let m = Captioner::<f32>::new(&cfg, 4, 15, 9).unwrap();
    let segs = [Segment { start: 0.5, end: 4.0 }, Segment { start: 3.0, end: 11.0 }];
    let greedy = greedy_paragraph(&m, &rec, &segs).unwrap();
    assert_eq!(ensemble_decode(&[&m], &rec, &segs).unwrap(), greedy);
    let twin = m.clone();
    assert_eq!(ensemble_decode(&[&m, &twin, &m], &rec, &segs).unwrap(), greedy);
    let other = Captioner::<f32>::new(&cfg, 4, 16, 9).unwrap();
    assert!(ensemble_decode(&[&m, &other], &rec, &segs).is_err());
    assert!(ensemble_decode::<f32>(&[], &rec, &segs).is_err());
}

fn forced_selector(end_sign: f64) -> Selector<f64> {
    let h = 3;
    let mut s = Selector::<f64>::new(&SelectorConfig { hidden: h, max_events: 4 }, 4, 1).unwrap();
    let ids = s.ids.clone();
    let p = &mut s.params;
    for id in [ids.enc_w, ids.pq] {
        fill(p, id, 0.0);
    }
    p.get_mut(ids.enc_b).data = vec![3.0, 0.0, 0.0];
    p.get_mut(ids.pq_b).data = vec![5.0, 0.0, 0.0];
    p.get_mut(ids.pk).data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    p.get_mut(ids.end).data = vec![end_sign * 5.0, 0.0, 0.0];
    s
}

#[test]
fn forced_selectors_pick_the_candidate_or_stop() {
    let rec = tiny_record(3);
    let cands = CandidateSet { video_id: "v".into(), proposals: vec![Proposal { start: 2.0, end: 6.0, score: 0.7 }] };
    let seq = forced_selector(-1.0).select_greedy(&cands, &rec).unwrap();
    assert_eq!(seq.indices, vec![0]);
    let seq = forced_selector(1.0).select_greedy(&cands, &rec).unwrap();
    assert!(seq.events.is_empty());
}

#[test]
fn identical_candidate_is_the_selector_target() {
    let gt = Segment { start: 2.0, end: 6.0 };
    let cands = [Proposal { start: 2.0, end: 6.0, score: 0.1 }];
    assert_eq!(selector_targets(&cands, &[gt], 10), (vec![Some(0), None], 0));
}

/// Captioner whose every step puts essentially all mass on token 5.
fn deterministic_captioner(vocab: usize) -> Captioner<f64> {
    let cfg = CaptionerConfig { hidden: 6, d_pos: 4, max_len: 3, ..Default::default() };
    let mut m = Captioner::<f64>::new(&cfg, 4, vocab, 2).unwrap();
    let (ow, ob) = (m.dec.out_w, m.dec.out_b);
    fill(&mut m.params, ow, 0.0);
    let bias = &mut m.params.get_mut(ob).data;
    bias.iter_mut().for_each(|x| *x = -60.0);
    bias[5] = 60.0;
    m
}

#[test]
fn zero_advantage_leaves_parameters_untouched() {
    let words: Vec<Vec<String>> = vec![words("a b c d e f g")];
    let vocab = Vocabulary::build(words.iter().map(|w| w.as_slice()), 1, 30);
    let mut m = deterministic_captioner(vocab.len());
    let before = m.params.clone();
    let sel = Selector::<f64>::new(&SelectorConfig { hidden: 5, max_events: 3 }, 4, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let recs: Vec<_> = (0..3).map(|k| random_record(&mut rng, &format!("v{}", k), 30, 4, 2)).collect();
    let data: Vec<(CandidateSet, &densecap::corpus::VideoRecord)> = recs
        .iter()
        .map(|r| {
            let segs = sorted_segments(&mut rng, r.duration, 4);
            (CandidateSet { video_id: r.video_id.clone(), proposals: proposals(&segs) }, r)
        })
        .collect();
    let cfg = TrainConfig { scst_sequences: 5, lr_scst: 0.1, ..Default::default() };
    let out = scst_step(&m, &sel, &vocab, data[0].1, &data[0].0, &cfg, &mut rng).unwrap();
    assert_eq!(out.rewards.len(), 5);
    assert!(out.rewards.iter().all(|r| r.advantage == 0.0));
    assert!(out.grads.is_zero());
    train_scst(&mut m, &sel, &vocab, &data, &cfg, 2, 0, &mut |_| {}).unwrap();
    for ((_, _, a), (_, _, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a.data, b.data);
    }
}

#[test]
fn checkpoint_reproduces_predictions() {
    let vids = generate_corpus(&SynthConfig { n_videos: 10, n_val: 2, seed: 12, ..SynthConfig::default() }).unwrap();
    let (train, val) = vids.split_at(8);
    let cfg = TrainConfig {
        hidden: 10,
        d_pos: 4,
        epochs: 2,
        min_count: 1,
        scorer_hidden: 6,
        scorer_epochs: 1,
        selector_hidden: 6,
        selector_epochs: 1,
        ..Default::default()
    };
    let (ck, hist) = train_xe_pipeline::<f32>(train, &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(ck.step, hist.last_step);
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::<f32>::load(dir.path()).unwrap();
    assert_eq!(back.step, ck.step);
    assert_eq!(back.final_loss, ck.final_loss);
    for src in [ProposalSource::Gt, ProposalSource::Learnt] {
        assert_eq!(predict(&ck, val, src).unwrap(), predict(&back, val, src).unwrap());
    }
}

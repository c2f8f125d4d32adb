mod common;

use common::*;
use densecap::corpus::{EventAnnotation, VideoAnnotation, PAD};
use densecap::decoder::{DecoderConfig, DecoderIds};
use densecap::esgn::{SelectMode, Selector, SelectorConfig};
use densecap::metrics::{bleu4, cider, dense_caption_eval, meteor_lite, Metric, PredictedSpan};
use densecap::model::masked_token_nll;
use densecap::params::{Grads, ParamStore};
use densecap::proposals::{tiou, CandidateSet, Segment};
use densecap::tape::Graph;
use densecap::tsrm::{Tsrm, TsrmConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>(), n in 1usize..=64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = random_record(&mut rng, "v", 40, 6, 0);
        let segs = sorted_segments(&mut rng, rec.duration, n);
        let t = Tsrm::<f64>::new(6, &TsrmConfig::uniform(4, 8), seed).unwrap();
        let (scores, feats) = t.encode_events(&rec, &proposals(&segs)).unwrap();
        for row in &scores.attention {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|a| *a >= 0.0));
        }
        for (i, f) in feats.iter().enumerate() {
            prop_assert_eq!(f.z.len(), f.pooled.len() + f.relational.len());
            for j in 0..n {
                prop_assert_eq!(scores.fused[i][j], scores.temporal[i][j] + scores.semantic[i][j]);
            }
        }
    }

    #[test]
    fn temporal_scores_ignore_shift_and_dyadic_rescale(seed in any::<u64>(), n in 1usize..8, shift in 0u32..1000, k in -3i32..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segs = sorted_segments(&mut rng, 60.0, n);
        let t = Tsrm::<f64>::new(4, &TsrmConfig::uniform(6, 5), seed).unwrap();
        let base = t.temporal_scores(&segs).unwrap();
        let s = 2f64.powi(k);
        let moved: Vec<Segment> = segs
            .iter()
            .map(|x| Segment { start: (x.start + shift as f64) * s, end: (x.end + shift as f64) * s })
            .collect();
        prop_assert_eq!(t.temporal_scores(&moved).unwrap(), base);
    }

    #[test]
    fn gates_and_frame_weights_are_bounded(seed in any::<u64>(), frames in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let h = 6;
        let ids = DecoderIds::register(&mut store, &DecoderConfig { hidden: h, ..DecoderConfig::default() }, 5, 9, 11, &mut rng);
        let mut g = Graph::new();
        let b = g.bind(&store);
        let l = g.vector(normal(&mut rng, h, 2.0));
        let z = g.vector(normal(&mut rng, 9, 2.0));
        let s = g.vector(normal(&mut rng, h, 2.0));
        let hp = g.vector(normal(&mut rng, h, 2.0));
        let gate = ids.cmg_gate(&mut g, &b, l, z, s, hp);
        prop_assert!(g.value(gate).iter().all(|x| *x > 0.0 && *x < 1.0));
        let f = ids.frames(&mut g, &b, frames, normal(&mut rng, frames * 5, 1.0));
        let (_, w) = ids.frame_attention(&mut g, &b, s, &f);
        prop_assert!((g.value(w).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pointer_distributions_sum_to_one_and_never_repeat(seed in any::<u64>(), n in 1usize..15, max_events in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rec = random_record(&mut rng, "v", 30, 4, 0);
        let segs = sorted_segments(&mut rng, rec.duration, n);
        let cands = CandidateSet { video_id: "v".into(), proposals: proposals(&segs) };
        let sel = Selector::<f64>::new(&SelectorConfig { hidden: 7, max_events }, 4, seed).unwrap();
        let r = sel.rollout(&cands, &rec, SelectMode::Sample, Some(&mut rng)).unwrap();
        for d in &r.distributions {
            prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let mut idx = r.sequence.indices.clone();
        prop_assert!(idx.len() <= max_events);
        idx.sort();
        idx.dedup();
        prop_assert_eq!(idx.len(), r.sequence.indices.len());
        let a = sel.select_greedy(&cands, &rec).unwrap();
        prop_assert_eq!(a, sel.select_greedy(&cands, &rec).unwrap());
    }

    #[test]
    fn tiou_is_symmetric_and_bounded(a0 in 0u32..100, la in 1u32..50, b0 in 0u32..100, lb in 1u32..50) {
        let a = Segment { start: a0 as f64, end: (a0 + la) as f64 };
        let b = Segment { start: b0 as f64, end: (b0 + lb) as f64 };
        let v = tiou(a, b).unwrap();
        prop_assert_eq!(v, tiou(b, a).unwrap());
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v == 1.0, a == b);
    }

    #[test]
    fn pad_targets_do_not_affect_the_loss(seed in any::<u64>(), steps in 1usize..10, pads in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = 9;
        let targets: Vec<usize> = (0..steps).map(|_| rng.gen_range(3..v)).chain(std::iter::repeat(PAD).take(pads)).collect();
        let logits: Vec<Vec<f64>> = targets.iter().map(|_| normal(&mut rng, v, 1.0)).collect();
        let loss = |ls: &[Vec<f64>]| {
            let mut g = Graph::<f64>::new();
            let s: Vec<_> = ls.iter().zip(&targets).map(|(l, t)| (g.vector(l.clone()), *t)).collect();
            let (l, n) = masked_token_nll(&mut g, &s).unwrap();
            (g.scalar(l), n)
        };
        let (before, n) = loss(&logits);
        prop_assert_eq!(n, steps);
        let mut perturbed = logits.clone();
        for row in perturbed.iter_mut().skip(steps) {
            *row = normal(&mut rng, v, 10.0);
        }
        prop_assert_eq!(loss(&perturbed).0, before);
    }

    #[test]
    fn clipping_never_increases_the_norm(values in proptest::collection::vec(-100.0f64..100.0, 1..40), cap in 0.01f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", values.len(), 1, densecap::params::Init::Zeros, &mut rng);
        let mut g = Grads::zeros_like(&store);
        g.get_mut(id).copy_from_slice(&values);
        let before = g.norm();
        g.clip_norm(cap);
        prop_assert!(g.norm() <= before * (1.0 + 1e-12));
        prop_assert!(g.norm() <= cap * (1.0 + 1e-12));
    }
}

fn sentence<R: Rng>(rng: &mut R, alphabet: usize, max_len: usize) -> Vec<usize> {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| rng.gen_range(0..alphabet)).collect()
}

fn rename(s: &[usize], perm: &[usize]) -> Vec<String> {
    s.iter().map(|w| format!("t{}", perm[*w])).collect()
}

fn plain(s: &[usize]) -> Vec<String> {
    s.iter().map(|w| format!("w{}", w)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_ignore_bijective_renaming(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alphabet = 6;
        let mut perm: Vec<usize> = (0..alphabet).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let cand = sentence(&mut rng, alphabet, 9);
        let refs: Vec<Vec<usize>> = (0..rng.gen_range(1..4)).map(|_| sentence(&mut rng, alphabet, 9)).collect();
        let a: Vec<Vec<String>> = refs.iter().map(|r| plain(r)).collect();
        let b: Vec<Vec<String>> = refs.iter().map(|r| rename(r, &perm)).collect();
        prop_assert_eq!(bleu4(&plain(&cand), &a).unwrap(), bleu4(&rename(&cand, &perm), &b).unwrap());
        prop_assert_eq!(meteor_lite(&plain(&cand), &a).unwrap(), meteor_lite(&rename(&cand, &perm), &b).unwrap());

        let items = 4;
        let cands: Vec<Vec<usize>> = (0..items).map(|_| sentence(&mut rng, alphabet, 8)).collect();
        let irefs: Vec<Vec<Vec<usize>>> = (0..items).map(|_| (0..2).map(|_| sentence(&mut rng, alphabet, 8)).collect()).collect();
        let build = |f: &dyn Fn(&[usize]) -> Vec<String>| {
            let c: BTreeMap<usize, Vec<String>> = cands.iter().enumerate().map(|(k, s)| (k, f(s))).collect();
            let r: BTreeMap<usize, Vec<Vec<String>>> =
                irefs.iter().enumerate().map(|(k, rs)| (k, rs.iter().map(|s| f(s)).collect())).collect();
            cider(&c, &r).unwrap()
        };
        let x = build(&|s| plain(s));
        let y = build(&|s| rename(s, &perm));
        prop_assert!((x.corpus - y.corpus).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_one_when_candidate_is_a_reference(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cand = sentence(&mut rng, 5, 10);
        while cand.len() < 4 {
            cand.push(rng.gen_range(0..5));
        }
        let mut refs: Vec<Vec<String>> = (0..rng.gen_range(0..3)).map(|_| plain(&sentence(&mut rng, 5, 10))).collect();
        refs.push(plain(&cand));
        prop_assert_eq!(bleu4(&plain(&cand), &refs).unwrap(), 1.0);
    }

    #[test]
    fn adding_an_unreachable_threshold_never_raises_the_dense_score(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut preds: BTreeMap<String, Vec<PredictedSpan>> = BTreeMap::new();
        let mut refs: BTreeMap<String, VideoAnnotation> = BTreeMap::new();
        let mut best: f64 = 0.0;
        for v in 0..3 {
            let id = format!("v{}", v);
            let gt: Vec<EventAnnotation> = (0..rng.gen_range(1..4))
                .map(|_| {
                    let s = random_segment(&mut rng, 30.0);
                    EventAnnotation { start: s.start, end: s.end, sentence: plain(&sentence(&mut rng, 5, 6)) }
                })
                .collect();
            let p: Vec<PredictedSpan> = (0..rng.gen_range(0..4))
                .map(|_| (random_segment(&mut rng, 30.0), plain(&sentence(&mut rng, 5, 6))))
                .collect();
            for (s, _) in &p {
                for e in &gt {
                    best = best.max(tiou(*s, e.segment()).unwrap());
                }
            }
            preds.insert(id.clone(), p);
            refs.insert(id, VideoAnnotation { duration: 30.0, events: gt });
        }
        prop_assume!(best < 1.0);
        let extra = (best + 1.0) / 2.0;
        let ms = [Metric::Bleu4, Metric::Meteor, Metric::Cider];
        let base = dense_caption_eval(&preds, &refs, &[0.3, 0.5, 0.7, 0.9], &ms).unwrap();
        let more = dense_caption_eval(&preds, &refs, &[0.3, 0.5, 0.7, 0.9, extra], &ms).unwrap();
        for m in ms {
            prop_assert!(more.score(m).unwrap() <= base.score(m).unwrap() + 1e-12);
        }
    }
}

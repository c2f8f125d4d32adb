use densecap::corpus::{generate_corpus, SynthConfig};
use densecap::pipeline::{candidates, train_proposal_stage};
use densecap::proposals::{proposal_precision_recall, Segment};
use densecap::training::TrainConfig;

#[test]
fn trained_proposal_stage_recalls_events_and_selects_about_the_right_count() {
    let vids = generate_corpus(&SynthConfig { seed: 21, n_videos: 150, n_val: 50, ..SynthConfig::default() }).unwrap();
    let (train, val) = vids.split_at(100);
    let cfg = TrainConfig { seed: 21, scorer_hidden: 32, selector_hidden: 48, ..TrainConfig::default() };
    let (scorer, selector) = train_proposal_stage::<f32>(train, &cfg, &mut |_| {}).unwrap();

    let sets = candidates(&scorer, val, &cfg).unwrap();
    let (mut hit, mut total) = (0.0, 0usize);
    for (set, rec) in sets.iter().zip(val) {
        assert!(set.len() <= 100);
        let pred: Vec<Segment> = set.proposals.iter().map(|p| p.segment()).collect();
        let pr = proposal_precision_recall(&pred, &rec.gt_segments(), &[0.5]).unwrap();
        hit += pr.recall * rec.events.len() as f64;
        total += rec.events.len();
    }
    let recall = hit / total as f64;
    assert!(recall >= 0.9, "recall at tIoU 0.5: {:.3}", recall);

    let selected: usize = sets.iter().zip(val).map(|(c, r)| selector.select_greedy(c, r).unwrap().events.len()).sum();
    let mean_sel = selected as f64 / val.len() as f64;
    let mean_gt = total as f64 / val.len() as f64;
    assert!((mean_sel - mean_gt).abs() <= 1.0, "selected {:.2} vs GT {:.2}", mean_sel, mean_gt);
}

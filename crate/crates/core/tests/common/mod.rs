#![allow(dead_code)]

use densecap::corpus::{EventAnnotation, FeatureMatrix, VideoRecord};
use densecap::proposals::{Proposal, Segment};
use rand::Rng;
use rand_distr::StandardNormal;

/// Video with standard-normal features and `events` random captioned spans.
pub fn random_record<R: Rng>(rng: &mut R, id: &str, clips: usize, dim: usize, events: usize) -> VideoRecord {
    let stride = 0.5;
    let duration = clips as f64 * stride;
    let data = (0..clips * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let events = (0..events)
        .map(|_| {
            let s = random_segment(rng, duration);
            EventAnnotation { start: s.start, end: s.end, sentence: vec!["a".into(), "word".into()] }
        })
        .collect();
    VideoRecord::new(id, duration, stride, FeatureMatrix { rows: clips, cols: dim, data }, events).unwrap()
}

/// Segment inside `[0, duration]` on a quarter-second grid.
pub fn random_segment<R: Rng>(rng: &mut R, duration: f64) -> Segment {
    let cells = (duration * 4.0) as u32;
    let a = rng.gen_range(0..cells);
    let b = rng.gen_range(a + 1..=cells);
    Segment { start: a as f64 / 4.0, end: b as f64 / 4.0 }
}

pub fn sorted_segments<R: Rng>(rng: &mut R, duration: f64, n: usize) -> Vec<Segment> {
    let mut s: Vec<Segment> = (0..n).map(|_| random_segment(rng, duration)).collect();
    s.sort_by(|a, b| a.start.total_cmp(&b.start));
    s
}

pub fn proposals(segs: &[Segment]) -> Vec<Proposal> {
    segs.iter().map(|s| Proposal { start: s.start, end: s.end, score: 0.5 }).collect()
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

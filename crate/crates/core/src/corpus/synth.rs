//! Synthetic dense-captioning corpus with planted ground truth.
//!
//! Each activity owns a unit latent vector; every clip covered by an event
//! carries the mean of the covering activity vectors plus Gaussian noise, and
//! background clips carry a dedicated background vector. Captions follow
//! `subject verb object [modifier]` where the subject is fixed per video, the
//! verb synonym follows the subject, and the modifier depends on the other
//! events of the video (`again` for a repeated activity, `before <gerund>` naming
//! the next event otherwise). The subject is visible only in the clips of the
//! first event, as a scaled subject vector added on top of the activity.

use super::{clip_count, EventAnnotation, FeatureMatrix, VideoRecord};
use crate::error::{Error, Result};
use crate::proposals::{tiou, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    /// The last `n_val` videos form the validation split.
    pub n_val: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub stride: f64,
    pub mean_events: f64,
    pub max_events: usize,
    pub min_event_frac: f64,
    pub max_event_frac: f64,
    pub max_pair_tiou: f64,
    pub n_activities: usize,
    /// Probability that an event repeats an activity already in the video.
    pub repeat_prob: f64,
    pub rgb_dim: usize,
    pub flow_dim: usize,
    pub noise: f64,
    /// Norm of the subject vector added to the first event's clips.
    pub subject_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 250,
            n_val: 50,
            min_duration: 20.0,
            max_duration: 60.0,
            stride: 0.5,
            mean_events: 3.7,
            max_events: 10,
            min_event_frac: 0.08,
            max_event_frac: 0.35,
            max_pair_tiou: 0.5,
            n_activities: 20,
            repeat_prob: 0.3,
            rgb_dim: 16,
            flow_dim: 16,
            noise: 0.3,
            subject_scale: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn feat_dim(&self) -> usize {
        self.rgb_dim + self.flow_dim
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_videos == 0 {
            return bad("n_videos must be positive");
        }
        if self.n_val > self.n_videos {
            return bad("n_val exceeds n_videos");
        }
        if !(self.min_duration > 0.0) || self.max_duration < self.min_duration {
            return bad("durations must be positive with min_duration <= max_duration");
        }
        if !(self.stride > 0.0) {
            return bad("stride must be positive");
        }
        if self.rgb_dim == 0 || self.flow_dim == 0 {
            return bad("feature dims must be positive");
        }
        if self.n_activities < 2 {
            return bad("at least two activities are required");
        }
        if self.n_activities > ACTIVITIES.len() {
            return Err(Error::Config(format!("at most {} activities are available", ACTIVITIES.len())));
        }
        if !(self.mean_events >= 1.0) || self.max_events == 0 {
            return bad("mean_events must be >= 1 and max_events positive");
        }
        if !(0.0 < self.min_event_frac && self.min_event_frac <= self.max_event_frac && self.max_event_frac <= 1.0) {
            return bad("event fractions must satisfy 0 < min <= max <= 1");
        }
        if !(0.0..=1.0).contains(&self.max_pair_tiou) || !(0.0..=1.0).contains(&self.repeat_prob) {
            return bad("max_pair_tiou and repeat_prob must lie in [0, 1]");
        }
        if !(self.noise >= 0.0) || !(self.subject_scale >= 0.0) {
            return bad("noise and subject_scale must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ActivityTemplate {
    pub verbs: [&'static str; 2],
    pub object: &'static str,
    pub gerund: &'static str,
}

const ACTIVITIES: [ActivityTemplate; 24] = [
    ActivityTemplate { verbs: ["rides", "mounts"], object: "a brown horse", gerund: "riding" },
    ActivityTemplate { verbs: ["plays", "strums"], object: "the guitar", gerund: "singing" },
    ActivityTemplate { verbs: ["throws", "tosses"], object: "a red ball", gerund: "throwing" },
    ActivityTemplate { verbs: ["washes", "scrubs"], object: "the dishes", gerund: "washing" },
    ActivityTemplate { verbs: ["paints", "colors"], object: "a wooden fence", gerund: "painting" },
    ActivityTemplate { verbs: ["lifts", "raises"], object: "heavy weights", gerund: "lifting" },
    ActivityTemplate { verbs: ["kicks", "passes"], object: "a soccer ball", gerund: "kicking" },
    ActivityTemplate { verbs: ["mows", "trims"], object: "the lawn", gerund: "mowing" },
    ActivityTemplate { verbs: ["chops", "slices"], object: "fresh vegetables", gerund: "cooking" },
    ActivityTemplate { verbs: ["climbs", "scales"], object: "a rock wall", gerund: "climbing" },
    ActivityTemplate { verbs: ["brushes", "combs"], object: "her hair", gerund: "brushing" },
    ActivityTemplate { verbs: ["surfs", "rides"], object: "a big wave", gerund: "surfing" },
    ActivityTemplate { verbs: ["bakes", "prepares"], object: "a chocolate cake", gerund: "baking" },
    ActivityTemplate { verbs: ["walks", "leads"], object: "a small dog", gerund: "walking" },
    ActivityTemplate { verbs: ["shovels", "clears"], object: "the snow", gerund: "shoveling" },
    ActivityTemplate { verbs: ["polishes", "waxes"], object: "a black car", gerund: "polishing" },
    ActivityTemplate { verbs: ["reads", "studies"], object: "a thick book", gerund: "reading" },
    ActivityTemplate { verbs: ["swims", "crosses"], object: "the wide pool", gerund: "swimming" },
    ActivityTemplate { verbs: ["fixes", "repairs"], object: "a bicycle tire", gerund: "fixing" },
    ActivityTemplate { verbs: ["feeds", "pets"], object: "a white cat", gerund: "feeding" },
    ActivityTemplate { verbs: ["builds", "stacks"], object: "a sand castle", gerund: "building" },
    ActivityTemplate { verbs: ["juggles", "catches"], object: "three oranges", gerund: "juggling" },
    ActivityTemplate { verbs: ["skates", "glides"], object: "across the ice", gerund: "skating" },
    ActivityTemplate { verbs: ["folds", "irons"], object: "clean laundry", gerund: "folding" },
];

pub const SUBJECTS: [&str; 4] = ["a man", "a woman", "a young boy", "a little girl"];

pub fn activity_templates() -> &'static [ActivityTemplate] {
    &ACTIVITIES
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Holds the latent vectors so tests can inspect the planted structure.
#[derive(Clone, Debug)]
pub struct Synthesizer {
    pub config: SynthConfig,
    /// One unit vector per activity, rounded to `f32`.
    pub activities: Vec<Vec<f32>>,
    pub background: Vec<f32>,
    /// One unit vector per entry of [`SUBJECTS`].
    pub subjects: Vec<Vec<f32>>,
}

/// Per-event ground truth retained alongside the public record.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedEvent {
    pub segment: Segment,
    pub activity: usize,
}

impl Synthesizer {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.feat_dim();
        let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        let activities = (0..config.n_activities).map(|_| to32(unit_gaussian(&mut rng, d))).collect();
        let background = to32(unit_gaussian(&mut rng, d));
        let subjects = (0..SUBJECTS.len()).map(|_| to32(unit_gaussian(&mut rng, d))).collect();
        Ok(Self { config, activities, background, subjects })
    }

    fn video_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index as u64 + 1);
        rng
    }

    fn place_events(&self, rng: &mut ChaCha8Rng, duration: f64) -> Vec<PlantedEvent> {
        let c = &self.config;
        let extra = if c.mean_events > 1.0 {
            Poisson::new(c.mean_events - 1.0).unwrap().sample(rng) as usize
        } else {
            0
        };
        let want = (1 + extra).min(c.max_events);
        let mut placed: Vec<PlantedEvent> = Vec::with_capacity(want);
        let mut attempts = 0;
        while placed.len() < want && attempts < 200 {
            attempts += 1;
            let frac = rng.gen_range(c.min_event_frac..=c.max_event_frac);
            let len = (frac * duration).max(c.stride * 2.0).min(duration);
            let start = rng.gen_range(0.0..=(duration - len));
            let start = (start * 100.0).round() / 100.0;
            let end = ((start + len) * 100.0).round() / 100.0;
            let end = end.min(duration);
            if !(start < end) {
                continue;
            }
            let seg = Segment { start, end };
            if placed.iter().any(|p| tiou(p.segment, seg).unwrap_or(1.0) > c.max_pair_tiou) {
                continue;
            }
            let activity = if !placed.is_empty() && rng.gen_bool(c.repeat_prob) {
                placed[rng.gen_range(0..placed.len())].activity
            } else {
                rng.gen_range(0..c.n_activities)
            };
            placed.push(PlantedEvent { segment: seg, activity });
            if !self.exclusive_majority(&placed, duration) {
                placed.pop();
            }
        }
        placed.sort_by(|a, b| a.segment.start.total_cmp(&b.segment.start));
        placed
    }

    /// Clip membership uses clip centres.
    fn covering(&self, events: &[PlantedEvent], t: usize, duration: f64) -> Vec<usize> {
        let s = self.config.stride;
        let centre = 0.5 * (t as f64 * s + ((t + 1) as f64 * s).min(duration));
        events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.segment.start <= centre && centre < e.segment.end)
            .map(|(i, _)| i)
            .collect()
    }

    /// Every event must own more exclusive clips than shared ones, so that
    /// its rows identify its activity.
    fn exclusive_majority(&self, events: &[PlantedEvent], duration: f64) -> bool {
        let t = clip_count(duration, self.config.stride);
        let mut excl = vec![0usize; events.len()];
        let mut shared = vec![0usize; events.len()];
        for k in 0..t {
            let cov = self.covering(events, k, duration);
            for &i in &cov {
                if cov.len() == 1 {
                    excl[i] += 1;
                } else {
                    shared[i] += 1;
                }
            }
        }
        excl.iter().zip(&shared).all(|(e, s)| *e > *s)
    }

    fn caption(&self, events: &[PlantedEvent], i: usize, subject: usize) -> Vec<String> {
        let tpl = &ACTIVITIES[events[i].activity];
        let mut words = format!("{} {} {}", SUBJECTS[subject], tpl.verbs[subject % 2], tpl.object);
        if events[..i].iter().any(|e| e.activity == events[i].activity) {
            words.push_str(" again");
        } else if let Some(next) = events.get(i + 1) {
            words.push_str(" before ");
            words.push_str(ACTIVITIES[next.activity].gerund);
        }
        words.split_whitespace().map(str::to_string).collect()
    }

    /// Generates video `index`, returning the record and its planted events.
    pub fn video(&self, index: usize) -> (VideoRecord, Vec<PlantedEvent>) {
        let c = &self.config;
        let mut rng = self.video_rng(index);
        let duration = (rng.gen_range(c.min_duration..=c.max_duration) * 100.0).round() / 100.0;
        let events = self.place_events(&mut rng, duration);
        let subject = rng.gen_range(0..SUBJECTS.len());
        let t = clip_count(duration, c.stride);
        let d = c.feat_dim();
        let noise = Normal::new(0.0, c.noise / (d as f64).sqrt()).unwrap();
        let mut data = Vec::with_capacity(t * d);
        for k in 0..t {
            let cov = self.covering(&events, k, duration);
            let mut row = vec![0.0f64; d];
            if cov.is_empty() {
                for (r, b) in row.iter_mut().zip(&self.background) {
                    *r = *b as f64;
                }
            } else {
                for &i in &cov {
                    for (r, a) in row.iter_mut().zip(&self.activities[events[i].activity]) {
                        *r += *a as f64;
                    }
                }
                let n = cov.len() as f64;
                row.iter_mut().for_each(|r| *r /= n);
                if cov.contains(&0) {
                    for (r, v) in row.iter_mut().zip(&self.subjects[subject]) {
                        *r += c.subject_scale * *v as f64;
                    }
                }
            }
            if c.noise > 0.0 {
                row.iter_mut().for_each(|r| *r += noise.sample(&mut rng));
            }
            data.extend(row.into_iter().map(|x| x as f32));
        }
        let anns = (0..events.len())
            .map(|i| EventAnnotation {
                start: events[i].segment.start,
                end: events[i].segment.end,
                sentence: self.caption(&events, i, subject),
            })
            .collect();
        let record = VideoRecord::new(
            format!("v_{:05}", index),
            duration,
            c.stride,
            FeatureMatrix { rows: t, cols: d, data },
            anns,
        )
        .expect("synthesized record is valid");
        (record, events)
    }

    pub fn generate(&self) -> Vec<VideoRecord> {
        (0..self.config.n_videos).into_par_iter().map(|i| self.video(i).0).collect()
    }
}

/// Deterministic for a fixed configuration (including its seed).
pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<VideoRecord>> {
    Ok(Synthesizer::new(config.clone())?.generate())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn rejects_invalid_configs() {
        for cfg in [
            SynthConfig { n_activities: 1, ..Default::default() },
            SynthConfig { rgb_dim: 0, ..Default::default() },
            SynthConfig { min_duration: 0.0, ..Default::default() },
            SynthConfig { n_videos: 0, ..Default::default() },
        ] {
            assert!(generate_corpus(&cfg).is_err());
        }
    }

    #[test]
    fn zero_noise_full_span_event_reproduces_activity_vector() {
        let cfg = SynthConfig {
            n_videos: 1,
            n_val: 0,
            noise: 0.0,
            mean_events: 1.0,
            max_events: 1,
            min_event_frac: 1.0,
            max_event_frac: 1.0,
            subject_scale: 0.0,
            ..Default::default()
        };
        let syn = Synthesizer::new(cfg).unwrap();
        let (rec, planted) = syn.video(0);
        assert_eq!(planted.len(), 1);
        let act = &syn.activities[planted[0].activity];
        for t in 0..rec.num_clips() {
            assert_eq!(rec.row(t), act.as_slice());
        }
    }

    #[test]
    fn subject_vector_marks_only_the_first_event() {
        let cfg = SynthConfig { n_videos: 30, n_val: 0, noise: 0.0, ..Default::default() };
        let syn = Synthesizer::new(cfg).unwrap();
        for i in 0..30 {
            let (rec, planted) = syn.video(i);
            let subject = SUBJECTS.iter().position(|s| rec.events[0].sentence.join(" ").starts_with(s)).unwrap();
            for t in 0..rec.num_clips() {
                let cov = syn.covering(&planted, t, rec.duration);
                if cov.is_empty() {
                    continue;
                }
                let n = cov.len() as f64;
                let expected: Vec<f64> = (0..rec.feat_dim())
                    .map(|j| {
                        let a = cov.iter().map(|&k| syn.activities[planted[k].activity][j] as f64).sum::<f64>() / n;
                        a + if cov.contains(&0) { 0.5 * syn.subjects[subject][j] as f64 } else { 0.0 }
                    })
                    .collect();
                for (x, e) in rec.row(t).iter().zip(&expected) {
                    assert_eq!(*x, *e as f32);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig { n_videos: 12, n_val: 2, ..Default::default() };
        assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate_corpus(&cfg).unwrap(), generate_corpus(&other).unwrap());
    }

    #[test]
    fn mean_event_count_tracks_configuration() {
        let cfg = SynthConfig { n_videos: 500, n_val: 0, ..Default::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        let mean = corpus.iter().map(|r| r.events.len()).sum::<usize>() as f64 / 500.0;
        assert!((3.33..=4.07).contains(&mean), "mean events {}", mean);
    }

    #[test]
    fn event_rows_identify_their_activity() {
        let cfg = SynthConfig { n_videos: 60, n_val: 0, ..Default::default() };
        let syn = Synthesizer::new(cfg).unwrap();
        for i in 0..60 {
            let (rec, planted) = syn.video(i);
            for (k, p) in planted.iter().enumerate() {
                let rows: Vec<usize> = (0..rec.num_clips())
                    .filter(|&t| syn.covering(&planted, t, rec.duration).contains(&k))
                    .collect();
                assert!(!rows.is_empty());
                let mean_cos = |a: usize| {
                    rows.iter().map(|&t| cos(rec.row(t), &syn.activities[a])).sum::<f64>() / rows.len() as f64
                };
                let own = mean_cos(p.activity);
                for a in (0..syn.activities.len()).filter(|&a| a != p.activity) {
                    assert!(own > mean_cos(a), "video {} event {}", i, k);
                }
            }
        }
    }

    #[test]
    fn events_respect_overlap_limit_and_captions_follow_templates() {
        let cfg = SynthConfig { n_videos: 40, n_val: 0, ..Default::default() };
        let syn = Synthesizer::new(cfg).unwrap();
        for i in 0..40 {
            let (rec, planted) = syn.video(i);
            for a in 0..planted.len() {
                for b in a + 1..planted.len() {
                    assert!(tiou(planted[a].segment, planted[b].segment).unwrap() <= 0.5);
                }
                let tpl = &ACTIVITIES[planted[a].activity];
                let sent = rec.events[a].sentence.join(" ");
                assert!(tpl.verbs.iter().any(|v| sent.contains(v)) && sent.contains(tpl.object), "{}", sent);
            }
        }
    }
}

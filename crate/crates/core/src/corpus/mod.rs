//! Video records, the synthetic corpus generator, vocabularies and the
//! on-disk formats (annotation/results JSON, binary feature files).

mod annotations;
mod features;
mod synth;
mod vocab;

pub use annotations::{
    load_annotations, load_results, parse_annotations, parse_results, save_annotations, save_results,
    PredictedEvent, Predictions, VideoAnnotation,
};
pub use features::{read_features, write_features, FeatureMatrix};
pub use synth::{activity_templates, generate_corpus, ActivityTemplate, SynthConfig, Synthesizer, SUBJECTS};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::proposals::Segment;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Number of clips covering `duration` at the given stride.
pub fn clip_count(duration: f64, stride: f64) -> usize {
    ((duration / stride) - 1e-9).ceil().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventAnnotation {
    pub start: f64,
    pub end: f64,
    pub sentence: Vec<String>,
}

impl EventAnnotation {
    pub fn segment(&self) -> Segment {
        Segment { start: self.start, end: self.end }
    }
}

/// Frame-level features plus timed, captioned events for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub duration: f64,
    pub stride: f64,
    pub features: FeatureMatrix,
    pub events: Vec<EventAnnotation>,
}

impl VideoRecord {
    pub fn new(
        video_id: impl Into<String>,
        duration: f64,
        stride: f64,
        features: FeatureMatrix,
        events: Vec<EventAnnotation>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::annotation(&video_id, format!("duration must be positive, got {}", duration)));
        }
        if !(stride > 0.0) {
            return Err(Error::annotation(&video_id, "stride must be positive"));
        }
        let t = clip_count(duration, stride);
        if features.rows != t {
            return Err(Error::annotation(
                &video_id,
                format!("expected {} feature rows for duration {} at stride {}, found {}", t, duration, stride, features.rows),
            ));
        }
        if features.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::annotation(&video_id, "non-finite feature value"));
        }
        for e in &events {
            if !(0.0 <= e.start && e.start < e.end && e.end <= duration + 1e-9) {
                return Err(Error::annotation(&video_id, format!("event [{}, {}] outside [0, {}]", e.start, e.end, duration)));
            }
            if e.sentence.is_empty() {
                return Err(Error::annotation(&video_id, "empty sentence"));
            }
        }
        Ok(Self { video_id, duration, stride, features, events })
    }

    pub fn num_clips(&self) -> usize {
        self.features.rows
    }

    pub fn feat_dim(&self) -> usize {
        self.features.cols
    }

    pub fn row(&self, t: usize) -> &[f32] {
        self.features.row(t)
    }

    /// Clip rows whose interval intersects the segment, after clipping it to
    /// the video. At least one row is always returned.
    pub fn clip_range(&self, seg: Segment) -> Result<std::ops::Range<usize>> {
        let start = seg.start.max(0.0);
        let end = seg.end.min(self.duration);
        if !(seg.start < seg.end) || end <= 0.0 || start >= self.duration {
            return Err(Error::Invalid(format!(
                "segment [{}, {}] lies outside video {} of duration {}",
                seg.start, seg.end, self.video_id, self.duration
            )));
        }
        let t = self.num_clips();
        let first = ((start / self.stride) + 1e-9).floor() as usize;
        // a clip [k·s, (k+1)·s) intersects [start, end) iff k·s < end
        let last = ((end / self.stride) - 1e-9).ceil() as usize;
        let first = first.min(t - 1);
        let last = last.clamp(first + 1, t);
        Ok(first..last)
    }

    /// Mean of the feature rows covered by `seg`.
    pub fn mean_pool<T: Scalar>(&self, seg: Segment) -> Result<Vec<T>> {
        let r = self.clip_range(seg)?;
        let d = self.feat_dim();
        let mut acc = vec![0.0f64; d];
        for t in r.clone() {
            for (a, x) in acc.iter_mut().zip(self.row(t)) {
                *a += *x as f64;
            }
        }
        let n = r.len() as f64;
        Ok(acc.into_iter().map(|a| T::c(a / n)).collect())
    }

    /// Feature rows covered by `seg`, row-major, converted to `T`.
    pub fn frames<T: Scalar>(&self, seg: Segment) -> Result<(usize, Vec<T>)> {
        let r = self.clip_range(seg)?;
        let d = self.feat_dim();
        let data = self.features.data[r.start * d..r.end * d].iter().map(|x| T::c(*x as f64)).collect();
        Ok((r.len(), data))
    }

    pub fn gt_segments(&self) -> Vec<Segment> {
        self.events.iter().map(|e| e.segment()).collect()
    }

    /// Events sorted by start time (stable on ties).
    pub fn events_by_start(&self) -> Vec<EventAnnotation> {
        let mut ev = self.events.clone();
        ev.sort_by(|a, b| a.start.total_cmp(&b.start));
        ev
    }

    pub fn annotation(&self) -> VideoAnnotation {
        VideoAnnotation { duration: self.duration, events: self.events.clone() }
    }
}

/// Metadata describing the feature layout of a corpus directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub stride: f64,
    pub rgb_dim: usize,
    pub flow_dim: usize,
}

/// A corpus split into training and validation videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub meta: CorpusMeta,
    pub train: Vec<VideoRecord>,
    pub val: Vec<VideoRecord>,
}

impl Corpus {
    pub const TRAIN_FILE: &'static str = "train.json";
    pub const VAL_FILE: &'static str = "val.json";
    pub const META_FILE: &'static str = "corpus.json";
    pub const VOCAB_FILE: &'static str = "vocab.json";
    pub const FEATURE_DIR: &'static str = "features";

    /// Writes annotations, one feature file per video, and metadata.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let fdir = dir.join(Self::FEATURE_DIR);
        fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        for (file, split) in [(Self::TRAIN_FILE, &self.train), (Self::VAL_FILE, &self.val)] {
            let ann: BTreeMap<String, VideoAnnotation> =
                split.iter().map(|r| (r.video_id.clone(), r.annotation())).collect();
            save_annotations(&dir.join(file), &ann)?;
            for r in split.iter() {
                write_features(&fdir.join(format!("{}.dvcf", r.video_id)), &r.features)?;
            }
        }
        let meta = serde_json::to_string_pretty(&self.meta)?;
        let p = dir.join(Self::META_FILE);
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(Self::META_FILE);
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let fdir = dir.join(Self::FEATURE_DIR);
        let load_split = |file: &str| -> Result<Vec<VideoRecord>> {
            let ann = load_annotations(&dir.join(file))?;
            ann.into_iter()
                .map(|(vid, a)| {
                    let feats = read_features(&fdir.join(format!("{}.dvcf", vid)))?;
                    if feats.cols != meta.rgb_dim + meta.flow_dim {
                        return Err(Error::annotation(&vid, "feature width differs from rgb_dim + flow_dim"));
                    }
                    VideoRecord::new(vid, a.duration, meta.stride, feats, a.events)
                })
                .collect()
        };
        let train = load_split(Self::TRAIN_FILE)?;
        let val = load_split(Self::VAL_FILE)?;
        Ok(Self { meta, train, val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(rows: Vec<Vec<f32>>, duration: f64) -> VideoRecord {
        let d = rows[0].len();
        let fm = FeatureMatrix { rows: rows.len(), cols: d, data: rows.concat() };
        VideoRecord::new("v", duration, 0.5, fm, vec![]).unwrap()
    }

    #[test]
    fn clip_count_matches_ceiling() {
        assert_eq!(clip_count(10.0, 0.5), 20);
        assert_eq!(clip_count(10.2, 0.5), 21);
        assert_eq!(clip_count(0.1, 0.5), 1);
    }

    #[test]
    fn mean_pool_constant_features() {
        let r = record(vec![vec![2.0, -1.0]; 8], 4.0);
        for (s, e) in [(0.0, 4.0), (0.3, 0.4), (1.0, 2.5), (3.9, 10.0)] {
            let p: Vec<f64> = r.mean_pool(Segment { start: s, end: e }).unwrap();
            assert_eq!(p, vec![2.0, -1.0]);
        }
    }

    #[test]
    fn mean_pool_single_and_pair_of_clips() {
        let r = record(vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![5.0, 5.0]], 1.5);
        let one: Vec<f64> = r.mean_pool(Segment { start: 0.5, end: 1.0 }).unwrap();
        assert_eq!(one, vec![0.0, 3.0]);
        let two: Vec<f64> = r.mean_pool(Segment { start: 0.0, end: 1.0 }).unwrap();
        assert_eq!(two, vec![0.5, 1.5]);
    }

    #[test]
    fn mean_pool_rejects_outside_and_clips_partial() {
        let r = record(vec![vec![1.0], vec![3.0]], 1.0);
        assert!(r.mean_pool::<f64>(Segment { start: 2.0, end: 3.0 }).is_err());
        let p: Vec<f64> = r.mean_pool(Segment { start: -1.0, end: 0.2 }).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn record_validates_row_count() {
        let fm = FeatureMatrix { rows: 3, cols: 1, data: vec![0.0; 3] };
        assert!(VideoRecord::new("x", 10.0, 0.5, fm, vec![]).is_err());
    }
}

//! Captioning metrics and the tIoU-matched dense-captioning evaluation.

mod bleu;
mod cider;
mod meteor;

pub use bleu::bleu4;
pub use cider::{cider, CiderScore};
pub use meteor::{align, meteor_from_alignment, meteor_lite, Alignment};

use crate::corpus::{tokenize, Predictions, VideoAnnotation};
use crate::error::{Error, Result};
use crate::proposals::{tiou, Segment, DEFAULT_THRESHOLDS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu4,
    Meteor,
    Cider,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Bleu4, Metric::Meteor, Metric::Cider];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Bleu4 => "bleu4",
            Metric::Meteor => "meteor",
            Metric::Cider => "cider",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu4" | "bleu" => Ok(Metric::Bleu4),
            "meteor" => Ok(Metric::Meteor),
            "cider" => Ok(Metric::Cider),
            _ => Err(Error::Config(format!("unknown metric `{}`", s))),
        }
    }
}

/// Sentence score against the references; an empty candidate scores 0.
pub fn sentence_score<R: AsRef<[String]>>(metric: Metric, candidate: &[String], references: &[R]) -> Result<f64> {
    if candidate.is_empty() {
        return Ok(0.0);
    }
    match metric {
        Metric::Bleu4 => bleu4(candidate, references),
        Metric::Meteor => meteor_lite(candidate, references),
        Metric::Cider => Err(Error::Invalid("cider is a corpus-level metric".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    pub score: f64,
    pub matched: usize,
    pub unmatched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub score: f64,
    pub per_threshold: Vec<ThresholdScore>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub metrics: BTreeMap<String, MetricScore>,
    pub n_videos: usize,
    pub n_predictions: usize,
}

impl ScoreReport {
    pub fn score(&self, m: Metric) -> Option<f64> {
        self.metrics.get(m.name()).map(|s| s.score)
    }

    /// Averages reports computed against several reference annotation sets.
    pub fn average(reports: &[ScoreReport]) -> Result<ScoreReport> {
        let first = reports.first().ok_or_else(|| Error::Invalid("no reports to average".into()))?;
        let n = reports.len() as f64;
        let mut out = first.clone();
        for (name, ms) in out.metrics.iter_mut() {
            let others: Vec<&MetricScore> = reports
                .iter()
                .map(|r| r.metrics.get(name).ok_or_else(|| Error::Invalid(format!("metric {} missing", name))))
                .collect::<Result<_>>()?;
            ms.score = others.iter().map(|o| o.score).sum::<f64>() / n;
            for (k, t) in ms.per_threshold.iter_mut().enumerate() {
                t.score = others.iter().map(|o| o.per_threshold[k].score).sum::<f64>() / n;
            }
        }
        Ok(out)
    }

    /// Aligned plain-text table; BLEU and METEOR shown ×100.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>8} {}", "metric", "score", "per-threshold");
        for (name, ms) in &self.metrics {
            let scale = if name == "cider" { 1.0 } else { 100.0 };
            let per: Vec<String> =
                ms.per_threshold.iter().map(|t| format!("{:.1}:{:.2}", t.threshold, t.score * scale)).collect();
            let _ = writeln!(s, "{:<8} {:>8.2} {}", name, ms.score * scale, per.join(" "));
        }
        let _ = writeln!(s, "videos {}  predictions {}", self.n_videos, self.n_predictions);
        s
    }
}

/// One predicted event: a span and its tokenized sentence.
pub type PredictedSpan = (Segment, Vec<String>);

pub fn predictions_to_spans(p: &Predictions) -> BTreeMap<String, Vec<PredictedSpan>> {
    p.results
        .iter()
        .map(|(vid, evs)| {
            (
                vid.clone(),
                evs.iter()
                    .map(|e| (Segment { start: e.timestamp[0], end: e.timestamp[1] }, tokenize(&e.sentence)))
                    .collect(),
            )
        })
        .collect()
}

/// tIoU-matched dense captioning score. At each threshold every prediction is
/// scored against the sentences of the GT events it overlaps with tIoU at or
/// above the threshold (0 when there are none); the threshold score is the
/// mean over predictions and the final score the mean over thresholds.
pub fn dense_caption_eval(
    predictions: &BTreeMap<String, Vec<PredictedSpan>>,
    references: &BTreeMap<String, VideoAnnotation>,
    thresholds: &[f64],
    metrics: &[Metric],
) -> Result<ScoreReport> {
    if thresholds.is_empty() {
        return Err(Error::Config("at least one threshold is required".into()));
    }
    for vid in predictions.keys() {
        if !references.contains_key(vid) {
            return Err(Error::annotation(vid, "predicted video has no reference annotation"));
        }
    }
    let preds: Vec<(&str, &PredictedSpan)> =
        predictions.iter().flat_map(|(v, ps)| ps.iter().map(move |p| (v.as_str(), p))).collect();
    let n_predictions = preds.len();
    let mut report = ScoreReport { metrics: BTreeMap::new(), n_videos: predictions.len(), n_predictions };
    for &metric in metrics {
        let mut per_threshold = Vec::with_capacity(thresholds.len());
        for &t in thresholds {
            let mut matched_refs: Vec<Option<Vec<Vec<String>>>> = Vec::with_capacity(preds.len());
            for (vid, (seg, _)) in &preds {
                let refs: Vec<Vec<String>> = references[*vid]
                    .events
                    .iter()
                    .filter(|e| tiou(*seg, e.segment()).map(|v| v >= t).unwrap_or(false))
                    .map(|e| e.sentence.clone())
                    .collect();
                matched_refs.push(if refs.is_empty() { None } else { Some(refs) });
            }
            let matched = matched_refs.iter().filter(|m| m.is_some()).count();
            let total: f64 = match metric {
                Metric::Cider => {
                    let cands: BTreeMap<usize, Vec<String>> = preds
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| matched_refs[*i].is_some())
                        .map(|(i, (_, (_, s)))| (i, s.clone()))
                        .collect();
                    let refs: BTreeMap<usize, Vec<Vec<String>>> = matched_refs
                        .iter()
                        .enumerate()
                        .filter_map(|(i, r)| r.clone().map(|r| (i, r)))
                        .collect();
                    if cands.is_empty() {
                        0.0
                    } else {
                        cider(&cands, &refs)?.per_item.values().sum()
                    }
                }
                _ => preds
                    .iter()
                    .zip(&matched_refs)
                    .map(|((_, (_, sent)), refs)| match refs {
                        Some(r) => sentence_score(metric, sent, r),
                        None => Ok(0.0),
                    })
                    .sum::<Result<f64>>()?,
            };
            let score = if n_predictions == 0 { 0.0 } else { total / n_predictions as f64 };
            per_threshold.push(ThresholdScore { threshold: t, score, matched, unmatched: n_predictions - matched });
        }
        let score = per_threshold.iter().map(|t| t.score).sum::<f64>() / thresholds.len() as f64;
        report.metrics.insert(metric.name().to_string(), MetricScore { score, per_threshold });
    }
    Ok(report)
}

/// Evaluates against several reference sets and averages the reports.
pub fn dense_caption_eval_multi(
    predictions: &BTreeMap<String, Vec<PredictedSpan>>,
    reference_sets: &[BTreeMap<String, VideoAnnotation>],
    thresholds: &[f64],
    metrics: &[Metric],
) -> Result<ScoreReport> {
    let reports = reference_sets
        .iter()
        .map(|r| dense_caption_eval(predictions, r, thresholds, metrics))
        .collect::<Result<Vec<_>>>()?;
    ScoreReport::average(&reports)
}

pub fn default_thresholds() -> Vec<f64> {
    DEFAULT_THRESHOLDS.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EventAnnotation;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn refs() -> BTreeMap<String, VideoAnnotation> {
        BTreeMap::from([(
            "v".to_string(),
            VideoAnnotation {
                duration: 20.0,
                events: vec![EventAnnotation { start: 0.0, end: 10.0, sentence: words("a man rides a horse") }],
            },
        )])
    }

    #[test]
    fn identical_predictions_score_metric_of_identity() {
        let p = BTreeMap::from([("v".to_string(), vec![(Segment { start: 0.0, end: 10.0 }, words("a man rides a horse"))])]);
        let r = dense_caption_eval(&p, &refs(), &default_thresholds(), &[Metric::Meteor, Metric::Bleu4]).unwrap();
        let m = meteor_lite(&words("a man rides a horse"), &[words("a man rides a horse")]).unwrap();
        assert_eq!(r.score(Metric::Meteor).unwrap(), m);
        assert_eq!(r.score(Metric::Bleu4).unwrap(), 1.0);
    }

    #[test]
    fn one_third_overlap_counts_only_at_lowest_threshold() {
        let p = BTreeMap::from([("v".to_string(), vec![(Segment { start: 5.0, end: 15.0 }, words("a man rides a horse"))])]);
        let r = dense_caption_eval(&p, &refs(), &default_thresholds(), &[Metric::Meteor]).unwrap();
        let m = meteor_lite(&words("a man rides a horse"), &[words("a man rides a horse")]).unwrap();
        assert!((r.score(Metric::Meteor).unwrap() - m / 4.0).abs() < 1e-15);
    }

    #[test]
    fn empty_predictions_and_unknown_video() {
        let p = BTreeMap::from([("v".to_string(), vec![])]);
        let r = dense_caption_eval(&p, &refs(), &default_thresholds(), &Metric::ALL).unwrap();
        assert!(r.metrics.values().all(|m| m.score == 0.0));
        let q = BTreeMap::from([("zzz".to_string(), vec![])]);
        let err = dense_caption_eval(&q, &refs(), &default_thresholds(), &[Metric::Meteor]).unwrap_err();
        assert!(err.to_string().contains("zzz"));
    }

    #[test]
    fn averaging_identical_reference_sets_is_identity() {
        let p = BTreeMap::from([("v".to_string(), vec![(Segment { start: 1.0, end: 9.0 }, words("a man rides"))])]);
        let one = dense_caption_eval(&p, &refs(), &default_thresholds(), &Metric::ALL).unwrap();
        let two = dense_caption_eval_multi(&p, &[refs(), refs()], &default_thresholds(), &Metric::ALL).unwrap();
        for m in Metric::ALL {
            assert!((one.score(m).unwrap() - two.score(m).unwrap()).abs() < 1e-15);
        }
        assert!(one.to_table().contains("meteor"));
    }
}

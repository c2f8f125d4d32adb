//! ActivityNet-Captions style annotation and results JSON.

use super::{tokenize, EventAnnotation};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub duration: f64,
    pub events: Vec<EventAnnotation>,
}

#[derive(Serialize)]
struct RawVideoOut<'a> {
    duration: f64,
    timestamps: Vec<[f64; 2]>,
    sentences: Vec<&'a str>,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, vid: &str, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::annotation(vid, format!("missing required field `{}`", name)))
}

fn parse_video(vid: &str, v: &Value) -> Result<VideoAnnotation> {
    let obj = v.as_object().ok_or_else(|| Error::annotation(vid, "entry is not an object"))?;
    let duration = field(obj, vid, "duration")?
        .as_f64()
        .ok_or_else(|| Error::annotation(vid, "`duration` is not a number"))?;
    if !(duration > 0.0) {
        return Err(Error::annotation(vid, format!("non-positive duration {}", duration)));
    }
    let ts = field(obj, vid, "timestamps")?
        .as_array()
        .ok_or_else(|| Error::annotation(vid, "`timestamps` is not an array"))?;
    let sents = field(obj, vid, "sentences")?
        .as_array()
        .ok_or_else(|| Error::annotation(vid, "`sentences` is not an array"))?;
    if ts.len() != sents.len() {
        return Err(Error::annotation(
            vid,
            format!("{} timestamps but {} sentences", ts.len(), sents.len()),
        ));
    }
    let mut events = Vec::with_capacity(ts.len());
    for (k, (t, s)) in ts.iter().zip(sents).enumerate() {
        let pair = t
            .as_array()
            .filter(|a| a.len() == 2)
            .and_then(|a| Some([a[0].as_f64()?, a[1].as_f64()?]))
            .ok_or_else(|| Error::annotation(vid, format!("timestamp {} is not a [start, end] pair", k)))?;
        let [start, end] = pair;
        if !(start < end) {
            return Err(Error::annotation(vid, format!("timestamp {} has start {} >= end {}", k, start, end)));
        }
        // Real annotations occasionally overshoot the duration by a little.
        let start = start.max(0.0);
        let end = end.min(duration);
        if !(start < end) {
            return Err(Error::annotation(vid, format!("timestamp {} lies outside [0, {}]", k, duration)));
        }
        let text = s.as_str().ok_or_else(|| Error::annotation(vid, format!("sentence {} is not a string", k)))?;
        let sentence = tokenize(text);
        if sentence.is_empty() {
            return Err(Error::annotation(vid, format!("sentence {} is empty after tokenization", k)));
        }
        events.push(EventAnnotation { start, end, sentence });
    }
    Ok(VideoAnnotation { duration, events })
}

pub fn parse_annotations(text: &str) -> Result<BTreeMap<String, VideoAnnotation>> {
    let root: Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Invalid("annotation file must be a JSON object keyed by video id".into()))?;
    obj.iter().map(|(vid, v)| Ok((vid.clone(), parse_video(vid, v)?))).collect()
}

pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, VideoAnnotation>> {
    parse_annotations(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_annotations(path: &Path, ann: &BTreeMap<String, VideoAnnotation>) -> Result<()> {
    let joined: Vec<Vec<String>> =
        ann.values().map(|a| a.events.iter().map(|e| e.sentence.join(" ")).collect()).collect();
    let out: BTreeMap<&str, RawVideoOut> = ann
        .iter()
        .zip(&joined)
        .map(|((vid, a), sents)| {
            (
                vid.as_str(),
                RawVideoOut {
                    duration: a.duration,
                    timestamps: a.events.iter().map(|e| [e.start, e.end]).collect(),
                    sentences: sents.iter().map(String::as_str).collect(),
                },
            )
        })
        .collect();
    let s = serde_json::to_string_pretty(&out)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEvent {
    pub sentence: String,
    pub timestamp: [f64; 2],
}

/// Results file: `{version, results: {video_id: [...]}, external_data}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub version: String,
    pub results: BTreeMap<String, Vec<PredictedEvent>>,
    pub external_data: Value,
}

impl Default for Predictions {
    fn default() -> Self {
        Self {
            version: "VERSION 1.0".into(),
            results: BTreeMap::new(),
            external_data: serde_json::json!({"used": false, "details": "synthetic frame-level features"}),
        }
    }
}

pub fn parse_results(text: &str) -> Result<Predictions> {
    let p: Predictions = serde_json::from_str(text)?;
    for (vid, evs) in &p.results {
        for e in evs {
            if !(e.timestamp[0] < e.timestamp[1]) {
                return Err(Error::annotation(vid, format!("predicted timestamp {:?} has start >= end", e.timestamp)));
            }
        }
    }
    Ok(p)
}

pub fn save_results(path: &Path, p: &Predictions) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(p)?).map_err(|e| Error::io(path, e))
}

pub fn load_results(path: &Path) -> Result<Predictions> {
    parse_results(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_event_round_trip() {
        let text = r#"{"v1": {"duration": 12.0, "timestamps": [[0.0, 5.0]], "sentences": ["A person runs."]}}"#;
        let ann = parse_annotations(text).unwrap();
        assert_eq!(ann["v1"].events[0].sentence, vec!["a", "person", "runs"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        save_annotations(&p, &ann).unwrap();
        assert_eq!(load_annotations(&p).unwrap(), ann);
    }

    #[test]
    fn mismatched_lengths_name_the_video() {
        let text = r#"{"vid_9": {"duration": 9.0, "timestamps": [[0,1],[2,3]], "sentences": ["a"]}}"#;
        match parse_annotations(text) {
            Err(Error::Annotation { video_id, .. }) => assert_eq!(video_id, "vid_9"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn missing_duration_is_an_error() {
        let text = r#"{"v": {"timestamps": [[0,1]], "sentences": ["a b"]}}"#;
        let err = parse_annotations(text).unwrap_err();
        assert!(err.to_string().contains("duration"), "{}", err);
        assert!(err.to_string().contains("v"));
    }

    #[test]
    fn reversed_timestamp_and_malformed_json() {
        let text = r#"{"v": {"duration": 5, "timestamps": [[3,1]], "sentences": ["a"]}}"#;
        assert!(matches!(parse_annotations(text), Err(Error::Annotation { .. })));
        assert!(matches!(parse_annotations("{not json"), Err(Error::Json(_))));
    }

    #[test]
    fn results_round_trip() {
        let mut p = Predictions::default();
        p.results.insert(
            "v1".into(),
            vec![PredictedEvent { sentence: "a person runs".into(), timestamp: [0.0, 5.0] }],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        save_results(&path, &p).unwrap();
        let q = load_results(&path).unwrap();
        assert_eq!(p, q);
        let raw: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert!(raw.get("version").is_some() && raw.get("external_data").is_some());
    }
}

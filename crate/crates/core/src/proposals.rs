//! Temporal segments, tIoU, the sliding-window candidate generator and the
//! proposal precision/recall statistic.

use crate::corpus::VideoRecord;
use crate::error::{Error, Result};
use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
}

impl Segment {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let s = Segment { start, end };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.start < self.end && self.start.is_finite() && self.end.is_finite() {
            Ok(())
        } else {
            Err(Error::Segment { start: self.start, end: self.end })
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Temporal intersection over union.
pub fn tiou(a: Segment, b: Segment) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    Ok(inter / (a.len() + b.len() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Proposal {
    pub fn segment(&self) -> Segment {
        Segment { start: self.start, end: self.end }
    }
}

/// Score descending, then wider first, then earlier start.
pub fn candidate_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.segment().len().total_cmp(&a.segment().len()))
        .then(a.start.total_cmp(&b.start))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub video_id: String,
    pub proposals: Vec<Proposal>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// `{video_id: [[start, end, score], ...]}`
pub fn candidates_to_json(sets: &[CandidateSet]) -> serde_json::Value {
    let map: BTreeMap<&str, Vec<[f64; 3]>> = sets
        .iter()
        .map(|c| (c.video_id.as_str(), c.proposals.iter().map(|p| [p.start, p.end, p.score]).collect()))
        .collect();
    serde_json::to_value(map).expect("plain numbers serialize")
}

pub fn candidates_from_json(v: &serde_json::Value) -> Result<Vec<CandidateSet>> {
    let map: BTreeMap<String, Vec<[f64; 3]>> = serde_json::from_value(v.clone())?;
    map.into_iter()
        .map(|(video_id, ps)| {
            let proposals = ps
                .into_iter()
                .map(|[start, end, score]| {
                    Segment::new(start, end)?;
                    Ok(Proposal { start, end, score })
                })
                .collect::<Result<_>>()?;
            Ok(CandidateSet { video_id, proposals })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    /// Window lengths as fractions of the video duration.
    pub scales: Vec<f64>,
    /// Window step as a fraction of the window length.
    pub step_frac: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.05, 0.07, 0.09, 0.11, 0.14, 0.17, 0.21, 0.26, 0.32, 0.4, 0.5, 0.65, 0.8, 1.0],
            step_frac: 0.2,
            nms_threshold: 0.8,
            top_k: 100,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::Config("window scales must lie in (0, 1]".into()));
        }
        if !(self.step_frac > 0.0) || !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::Config("step_frac must be positive and nms_threshold in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Multi-scale sliding windows in clip units: `(first_clip, clip_count)`.
pub fn sliding_windows(num_clips: usize, cfg: &WindowConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &s in &cfg.scales {
        let len = ((s * num_clips as f64).round() as usize).clamp(1, num_clips);
        let step = ((cfg.step_frac * len as f64).round() as usize).max(1);
        let mut start = 0;
        loop {
            out.push((start, len));
            if start + len >= num_clips {
                break;
            }
            start = (start + step).min(num_clips - len);
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn window_segment(record: &VideoRecord, (start, len): (usize, usize)) -> Segment {
    let s = start as f64 * record.stride;
    let e = ((start + len) as f64 * record.stride).min(record.duration);
    Segment { start: s, end: e }
}

/// Greedy tIoU suppression over proposals already in `candidate_order`.
pub fn nms(sorted: &[Proposal], threshold: f64, top_k: usize) -> Vec<Proposal> {
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| tiou(k.segment(), p.segment()).unwrap_or(0.0) <= threshold) {
            kept.push(*p);
        }
    }
    kept
}

/// Two-layer window scorer. Input per window: mean feature, first and last
/// clip inside, and the clips just outside each boundary (clamped).
#[derive(Clone, Debug)]
pub struct ProposalScorer<T> {
    pub feat_dim: usize,
    pub hidden: usize,
    pub params: ParamStore<T>,
    w0: ParamId,
    b0: ParamId,
    w1: ParamId,
    b1: ParamId,
}

impl<T: Scalar> ProposalScorer<T> {
    pub fn new(feat_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w0 = params.add("scorer.w0", hidden, 5 * feat_dim, Init::Glorot, &mut rng);
        let b0 = params.add("scorer.b0", hidden, 1, Init::Zeros, &mut rng);
        let w1 = params.add("scorer.w1", 1, hidden, Init::Glorot, &mut rng);
        let b1 = params.add("scorer.b1", 1, 1, Init::Zeros, &mut rng);
        Self { feat_dim, hidden, params, w0, b0, w1, b1 }
    }

    pub fn from_params(feat_dim: usize, hidden: usize, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(feat_dim, hidden, 0);
        if !fresh.params.same_layout(&params) {
            return Err(Error::Checkpoint("proposal scorer parameter layout mismatch".into()));
        }
        Ok(Self { params, ..fresh })
    }

    /// Sets every weight to zero (all scores become 0.5).
    pub fn zeroed(mut self) -> Self {
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.get_mut(id).data.iter_mut().for_each(|x| *x = T::zero());
        }
        self
    }

    fn inputs(&self, record: &VideoRecord, windows: &[(usize, usize)]) -> Vec<T> {
        let d = record.feat_dim();
        let t = record.num_clips();
        let mut prefix = vec![0.0f64; (t + 1) * d];
        for k in 0..t {
            for j in 0..d {
                prefix[(k + 1) * d + j] = prefix[k * d + j] + record.row(k)[j] as f64;
            }
        }
        let mut out = Vec::with_capacity(windows.len() * 5 * d);
        for &(s, len) in windows {
            let e = s + len;
            for j in 0..d {
                out.push(T::c((prefix[e * d + j] - prefix[s * d + j]) / len as f64));
            }
            for clip in [s, e - 1, s.saturating_sub(1), (e).min(t - 1)] {
                out.extend(record.row(clip).iter().map(|x| T::c(*x as f64)));
            }
        }
        out
    }

    /// Logits for each window; returns the graph node (n×1).
    fn logits(&self, g: &mut Graph<T>, record: &VideoRecord, windows: &[(usize, usize)]) -> crate::tape::NodeId {
        let x = g.constant(windows.len(), 5 * self.feat_dim, self.inputs(record, windows));
        let w0 = g.param(&self.params, self.w0);
        let b0 = g.param(&self.params, self.b0);
        let w1 = g.param(&self.params, self.w1);
        let b1 = g.param(&self.params, self.b1);
        let h = g.matmul_nt(x, w0);
        let h = g.add_row_vec(h, b0);
        let h = g.relu(h);
        let o = g.matmul_nt(h, w1);
        g.add_row_vec(o, b1)
    }

    pub fn score_windows(&self, record: &VideoRecord, windows: &[(usize, usize)]) -> Vec<f64> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, record, windows);
        let s = g.sigmoid(l);
        g.value(s).iter().map(|x| x.f64()).collect()
    }

    /// Binary cross-entropy against soft targets (max tIoU with any GT
    /// event). Returns mean loss and gradients.
    pub fn loss_and_grads(&self, record: &VideoRecord, cfg: &WindowConfig) -> (T, Grads<T>) {
        let windows = sliding_windows(record.num_clips(), cfg);
        let gt = record.gt_segments();
        let targets: Vec<T> = windows
            .iter()
            .map(|&w| {
                let seg = window_segment(record, w);
                T::c(gt.iter().map(|g| tiou(seg, *g).unwrap_or(0.0)).fold(0.0, f64::max))
            })
            .collect();
        let mut g = Graph::new();
        let logits = self.logits(&mut g, record, &windows);
        // softplus(x) - t·x
        let sp = g.softplus(logits);
        let t = g.constant(windows.len(), 1, targets);
        let tx = g.mul(t, logits);
        let l = g.sub(sp, tx);
        let l = g.sum(l);
        let l = g.scale(l, T::one() / T::c(windows.len() as f64));
        g.backward(l);
        let mut grads = Grads::zeros_like(&self.params);
        g.accumulate_param_grads(&mut grads);
        (g.scalar(l), grads)
    }
}

/// Trains the scorer with one Adam step per video; returns the mean loss of
/// each epoch.
pub fn train_scorer<T: Scalar>(
    scorer: &mut ProposalScorer<T>,
    records: &[VideoRecord],
    cfg: &WindowConfig,
    epochs: usize,
    lr: f64,
) -> Vec<f64> {
    let mut opt = crate::params::Adam::new(&scorer.params, lr);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        for r in records {
            let (loss, grads) = scorer.loss_and_grads(r, cfg);
            total += loss.f64();
            opt.step(&mut scorer.params, &grads);
        }
        history.push(total / records.len().max(1) as f64);
    }
    history
}

/// Scores all windows, suppresses overlaps and keeps the top `K`.
pub fn generate_candidates<T: Scalar>(
    record: &VideoRecord,
    scorer: &ProposalScorer<T>,
    cfg: &WindowConfig,
) -> Result<CandidateSet> {
    if cfg.top_k < 1 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if record.num_clips() == 0 {
        return Err(Error::Invalid("video has no clips".into()));
    }
    let windows = sliding_windows(record.num_clips(), cfg);
    let scores = scorer.score_windows(record, &windows);
    let mut props: Vec<Proposal> = windows
        .iter()
        .zip(scores)
        .map(|(&w, score)| {
            let s = window_segment(record, w);
            Proposal { start: s.start, end: s.end, score }
        })
        .collect();
    props.sort_by(candidate_order);
    Ok(CandidateSet { video_id: record.video_id.clone(), proposals: nms(&props, cfg.nms_threshold, cfg.top_k) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub per_threshold: Vec<(f64, f64, f64)>,
    /// Set when there were no predictions.
    pub empty_predictions: bool,
    /// Set when there was no ground truth.
    pub empty_ground_truth: bool,
}

/// Threshold-membership precision/recall averaged over thresholds.
pub fn proposal_precision_recall(pred: &[Segment], gt: &[Segment], thresholds: &[f64]) -> Result<PrecisionRecall> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
        return Err(Error::Config("thresholds must be non-empty and in (0, 1]".into()));
    }
    let mut ious = vec![vec![0.0; gt.len()]; pred.len()];
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            ious[i][j] = tiou(*p, *g)?;
        }
    }
    let mut per = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let p = if pred.is_empty() {
            0.0
        } else {
            ious.iter().filter(|row| row.iter().any(|&v| v >= t)).count() as f64 / pred.len() as f64
        };
        let r = if gt.is_empty() {
            0.0
        } else {
            (0..gt.len()).filter(|&j| ious.iter().any(|row| row[j] >= t)).count() as f64 / gt.len() as f64
        };
        per.push((t, p, r));
    }
    let n = thresholds.len() as f64;
    Ok(PrecisionRecall {
        precision: per.iter().map(|x| x.1).sum::<f64>() / n,
        recall: per.iter().map(|x| x.2).sum::<f64>() / n,
        per_threshold: per,
        empty_predictions: pred.is_empty(),
        empty_ground_truth: gt.is_empty(),
    })
}

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

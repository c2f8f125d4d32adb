//! Recurrent pointer selection of an ordered event sequence from candidates.

use crate::corpus::VideoRecord;
use crate::decoder::LstmIds;
use crate::error::{Error, Result};
use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::proposals::{tiou, CandidateSet, Proposal, Segment};
use crate::scalar::Scalar;
use crate::tape::{Bound, Graph, NodeId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub hidden: usize,
    pub max_events: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { hidden: 512, max_events: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub video_id: String,
    /// Selection order.
    pub events: Vec<Proposal>,
    /// Candidate index of each selected event.
    pub indices: Vec<usize>,
}

impl EventSequence {
    /// Segments sorted by start time, as the decoder consumes them.
    pub fn sorted_segments(&self) -> Vec<Segment> {
        let mut s: Vec<Segment> = self.events.iter().map(|p| p.segment()).collect();
        s.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        s
    }
}

pub fn sequences_to_json(seqs: &[EventSequence]) -> serde_json::Value {
    let m: serde_json::Map<String, serde_json::Value> = seqs
        .iter()
        .map(|s| (s.video_id.clone(), serde_json::json!(s.events.iter().map(|p| [p.start, p.end, p.score]).collect::<Vec<_>>())))
        .collect();
    serde_json::Value::Object(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    Greedy,
    Sample,
}

#[derive(Clone, Debug)]
pub struct SelectorIds {
    pub enc_w: ParamId,
    pub enc_b: ParamId,
    pub cell: LstmIds,
    pub pk: ParamId,
    pub pq: ParamId,
    pub pq_b: ParamId,
    pub end: ParamId,
}

#[derive(Clone, Debug)]
pub struct Selector<T> {
    pub config: SelectorConfig,
    pub feat_dim: usize,
    pub params: ParamStore<T>,
    pub ids: SelectorIds,
}

/// Result of one selector rollout with the pointer distribution of each step
/// (over unselected candidates followed by END).
#[derive(Clone, Debug)]
pub struct Rollout {
    pub sequence: EventSequence,
    pub distributions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SelectorStep<T> {
    pub loss: T,
    pub grads: Grads<T>,
    pub targets: Vec<Option<usize>>,
    /// GT events with no candidate of positive tIoU.
    pub warnings: usize,
}

struct Prepared {
    keys: NodeId,
    enc: NodeId,
    x0: NodeId,
    n: usize,
}

impl<T: Scalar> Selector<T> {
    pub fn new(config: &SelectorConfig, feat_dim: usize, seed: u64) -> Result<Self> {
        if config.hidden == 0 || config.max_events == 0 || feat_dim == 0 {
            return Err(Error::Config("selector dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let h = config.hidden;
        let ids = SelectorIds {
            enc_w: p.add("sel.enc.w", h, feat_dim + 3, Init::Glorot, &mut rng),
            enc_b: p.add("sel.enc.b", h, 1, Init::Zeros, &mut rng),
            cell: LstmIds::register(&mut p, "sel.cell", h, h, &mut rng),
            pk: p.add("sel.key", h, h, Init::Glorot, &mut rng),
            pq: p.add("sel.query.w", h, h, Init::Glorot, &mut rng),
            pq_b: p.add("sel.query.b", h, 1, Init::Zeros, &mut rng),
            end: p.add("sel.end", h, 1, Init::Uniform(0.1), &mut rng),
        };
        Ok(Self { config: config.clone(), feat_dim, params: p, ids })
    }

    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::Checkpoint("selector parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(self)
    }

    fn inputs(&self, record: &VideoRecord, cands: &[Proposal]) -> Result<Vec<T>> {
        let mut x = Vec::with_capacity(cands.len() * (self.feat_dim + 3));
        for p in cands {
            x.extend(record.mean_pool::<T>(p.segment())?);
            x.push(T::c(p.start / record.duration));
            x.push(T::c(p.end / record.duration));
            x.push(T::c(p.score));
        }
        Ok(x)
    }

    fn prepare(&self, g: &mut Graph<T>, b: &Bound, record: &VideoRecord, cands: &[Proposal]) -> Result<Prepared> {
        if cands.is_empty() {
            return Err(Error::Invalid(format!("video {} has no candidates", record.video_id)));
        }
        if record.feat_dim() != self.feat_dim {
            return Err(Error::Invalid("selector feature width mismatch".into()));
        }
        let n = cands.len();
        let h = self.config.hidden;
        let x = g.constant(n, self.feat_dim + 3, self.inputs(record, cands)?);
        let enc = g.matmul_nt(x, b[self.ids.enc_w]);
        let enc = g.add_row_vec(enc, b[self.ids.enc_b]);
        let enc = g.tanh(enc);
        let ck = g.matmul_nt(enc, b[self.ids.pk]);
        let ek = g.matvec(b[self.ids.pk], b[self.ids.end]);
        let keys = g.concat(&[ck, ek]);
        let keys = g.reshape(keys, n + 1, h);
        let uniform = g.vector(vec![T::one() / T::c(n as f64); n]);
        let x0 = g.vecmat(uniform, enc);
        Ok(Prepared { keys, enc, x0, n })
    }

    /// Log pointer distribution over `avail` (candidate indices, END = n last).
    fn pointer(&self, g: &mut Graph<T>, b: &Bound, prep: &Prepared, h: NodeId, avail: &[usize]) -> NodeId {
        let q = g.affine(b[self.ids.pq], b[self.ids.pq_b], h);
        let q = g.tanh(q);
        let logits = g.matvec(prep.keys, q);
        let sub = g.gather(logits, avail);
        g.log_softmax(sub)
    }

    /// Runs the pointer loop until END or `max_events`.
    pub fn rollout<R: Rng>(&self, cands: &CandidateSet, record: &VideoRecord, mode: SelectMode, rng: Option<&mut R>) -> Result<Rollout> {
        let mut rng = rng;
        let mut g = Graph::new();
        let b = g.bind(&self.params);
        let prep = self.prepare(&mut g, &b, record, &cands.proposals)?;
        let hd = self.config.hidden;
        let (mut h, mut c) = (g.zeros(hd), g.zeros(hd));
        let mut x = prep.x0;
        let mut chosen: Vec<usize> = Vec::new();
        let mut dists = Vec::new();
        while chosen.len() < self.config.max_events {
            let (h2, c2) = self.ids.cell.step(&mut g, &b, x, h, c);
            h = h2;
            c = c2;
            let avail: Vec<usize> = (0..=prep.n).filter(|k| !chosen.contains(k)).collect();
            let lp = self.pointer(&mut g, &b, &prep, h, &avail);
            let p: Vec<f64> = g.value(lp).iter().map(|v| v.f64().exp()).collect();
            let pick = match (mode, rng.as_deref_mut()) {
                (SelectMode::Sample, Some(r)) => {
                    let mut u = r.gen::<f64>();
                    let mut k = p.len() - 1;
                    for (j, pj) in p.iter().enumerate() {
                        u -= pj;
                        if u <= 0.0 {
                            k = j;
                            break;
                        }
                    }
                    k
                }
                (SelectMode::Sample, None) => return Err(Error::Invalid("sampling needs a random source".into())),
                (SelectMode::Greedy, _) => {
                    let mut best = 0;
                    for (j, pj) in p.iter().enumerate() {
                        if *pj > p[best] {
                            best = j;
                        }
                    }
                    best
                }
            };
            dists.push(p);
            let idx = avail[pick];
            if idx == prep.n {
                break;
            }
            chosen.push(idx);
            x = g.row(prep.enc, idx);
        }
        let events = chosen.iter().map(|&k| cands.proposals[k]).collect();
        Ok(Rollout { sequence: EventSequence { video_id: cands.video_id.clone(), events, indices: chosen }, distributions: dists })
    }

    pub fn select_sequence<R: Rng>(&self, cands: &CandidateSet, record: &VideoRecord, mode: SelectMode, rng: Option<&mut R>) -> Result<EventSequence> {
        Ok(self.rollout(cands, record, mode, rng)?.sequence)
    }

    pub fn select_greedy(&self, cands: &CandidateSet, record: &VideoRecord) -> Result<EventSequence> {
        self.select_sequence::<ChaCha8Rng>(cands, record, SelectMode::Greedy, None)
    }

    /// Teacher-forced pointer cross-entropy against the GT events of `record`.
    pub fn train_selector_step(&self, cands: &CandidateSet, record: &VideoRecord) -> Result<SelectorStep<T>> {
        let gt = record.events_by_start();
        if gt.is_empty() {
            return Err(Error::annotation(&record.video_id, "selector training needs at least one event"));
        }
        let (targets, warnings) = selector_targets(&cands.proposals, &gt.iter().map(|e| e.segment()).collect::<Vec<_>>(), self.config.max_events);
        let mut g = Graph::new();
        let b = g.bind(&self.params);
        let prep = self.prepare(&mut g, &b, record, &cands.proposals)?;
        let hd = self.config.hidden;
        let (mut h, mut c) = (g.zeros(hd), g.zeros(hd));
        let mut x = prep.x0;
        let mut chosen: Vec<usize> = Vec::new();
        let mut terms = Vec::new();
        for t in &targets {
            let (h2, c2) = self.ids.cell.step(&mut g, &b, x, h, c);
            h = h2;
            c = c2;
            let avail: Vec<usize> = (0..=prep.n).filter(|k| !chosen.contains(k)).collect();
            let lp = self.pointer(&mut g, &b, &prep, h, &avail);
            let want = t.unwrap_or(prep.n);
            let pos = avail.iter().position(|k| *k == want).expect("target is available");
            terms.push(g.pick(lp, pos));
            if let Some(k) = t {
                chosen.push(*k);
                x = g.row(prep.enc, *k);
            }
        }
        let s = g.add_all(&terms);
        let loss = g.scale(s, -T::one() / T::c(terms.len() as f64));
        g.backward(loss);
        let mut grads = Grads::zeros_like(&self.params);
        g.accumulate_param_grads(&mut grads);
        Ok(SelectorStep { loss: g.scalar(loss), grads, targets, warnings })
    }
}

/// Per GT event (sorted by start) the unselected candidate of maximal tIoU,
/// ties to the lower index; `None` marks the final END. Counts GT events
/// without any overlapping candidate.
pub fn selector_targets(cands: &[Proposal], gt_sorted: &[Segment], max_events: usize) -> (Vec<Option<usize>>, usize) {
    let mut out = Vec::new();
    let mut warnings = 0;
    let mut used = vec![false; cands.len()];
    for g in gt_sorted.iter().take(max_events.min(cands.len())) {
        let mut best: Option<(usize, f64)> = None;
        for (k, p) in cands.iter().enumerate() {
            if used[k] {
                continue;
            }
            let v = tiou(p.segment(), *g).unwrap_or(0.0);
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        let (k, v) = best.expect("an unused candidate remains");
        if v <= 0.0 {
            warnings += 1;
        }
        used[k] = true;
        out.push(Some(k));
    }
    if out.len() < max_events {
        out.push(None);
    }
    (out, warnings)
}

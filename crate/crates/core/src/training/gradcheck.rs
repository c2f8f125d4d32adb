//! Central finite-difference verification of the analytic gradients.

use crate::corpus::{EventAnnotation, FeatureMatrix, VideoRecord, EOS};
use crate::decoder::{DecoderConfig, DecoderIds, Frames, WordState};
use crate::error::{Error, Result};
use crate::esgn::{Selector, SelectorConfig};
use crate::model::{masked_token_nll, Captioner, CaptionerConfig};
use crate::params::{Grads, ParamStore, Tensor};
use crate::proposals::{CandidateSet, Proposal, Segment};
use crate::tape::{Bound, Graph, NodeId};
use crate::tsrm::{pooled_matrix, TsrmConfig, TsrmIds};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Tsrm,
    PositionEmbed,
    Cmg,
    SentRnn,
    FrameAttention,
    WordRnn,
    Selector,
    Full,
}

impl Part {
    pub const ALL: [Part; 8] = [
        Part::Tsrm,
        Part::PositionEmbed,
        Part::Cmg,
        Part::SentRnn,
        Part::FrameAttention,
        Part::WordRnn,
        Part::Selector,
        Part::Full,
    ];
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
        f.write_str(&s)
    }
}

impl FromStr for Part {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown model part `{}`", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub events: usize,
    pub d_pos: usize,
}

impl Default for TinyDims {
    fn default() -> Self {
        Self { feat_dim: 8, hidden: 16, vocab: 20, events: 3, d_pos: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Negative control: multiply the analytic gradient of this tensor by 2.
    pub corrupt: Option<String>,
    /// Zero every model tensor (inputs keep their random values).
    pub zero_params: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, floor: 1e-5, seed: 11, corrupt: None, zero_params: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub max_rel_err: f64,
    /// `(index, analytic, numeric)` of the worst entry.
    pub worst_entry: (usize, f64, f64),
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub part: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub tensors: Vec<TensorError>,
    /// Tensors whose error exceeds the tolerance or whose gradient is not finite.
    pub failures: Vec<String>,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar built by `f` with central
/// differences over every entry of every tensor in `store`.
pub fn check_store<F>(part: &str, store: &ParamStore<f64>, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let b = g.bind(store);
    let out = f(&mut g, &b)?;
    g.backward(out);
    let mut grads = Grads::zeros_like(store);
    g.accumulate_param_grads(&mut grads);
    compare(part, store, grads, opts, |s| {
        let mut g = Graph::new();
        let b = g.bind(s);
        let out = f(&mut g, &b)?;
        Ok(g.scalar(out))
    })
}

fn maybe_zero(store: &mut ParamStore<f64>, opts: &GradCheckOptions) {
    if !opts.zero_params {
        return;
    }
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| !n.starts_with("input.")).map(|(id, _, _)| id).collect();
    for id in ids {
        store.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Compares `analytic` with central differences of `eval` around `store`.
pub fn compare<E>(part: &str, store: &ParamStore<f64>, mut analytic: Grads<f64>, opts: &GradCheckOptions, eval: E) -> Result<GradCheckReport>
where
    E: Fn(&ParamStore<f64>) -> Result<f64>,
{
    if let Some(name) = &opts.corrupt {
        let id = store.id(name).ok_or_else(|| Error::Config(format!("no tensor named {}", name)))?;
        analytic.get_mut(id).iter_mut().for_each(|x| *x *= 2.0);
    }
    let mut probe = store.clone();
    let mut tensors = Vec::new();
    let mut checked = 0;
    for (id, name, t) in store.iter() {
        let a = analytic.get(id);
        let finite = a.iter().all(|x| x.is_finite());
        let mut worst: f64 = 0.0;
        let mut worst_entry = (0, 0.0, 0.0);
        for k in 0..t.data.len() {
            let orig = t.data[k];
            probe.get_mut(id).data[k] = orig + opts.step;
            let up = eval(&probe)?;
            probe.get_mut(id).data[k] = orig - opts.step;
            let down = eval(&probe)?;
            probe.get_mut(id).data[k] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let e = relative_error(a[k], numeric, opts.floor);
            let e = if e.is_nan() { f64::INFINITY } else { e };
            if e > worst {
                worst = e;
                worst_entry = (k, a[k], numeric);
            }
            checked += 1;
        }
        tensors.push(TensorError { name: name.to_string(), max_rel_err: worst, worst_entry, finite });
    }
    let failures: Vec<String> = tensors
        .iter()
        .filter(|t| !t.finite || !(t.max_rel_err < opts.tolerance))
        .map(|t| t.name.clone())
        .collect();
    let mut worst = String::new();
    let mut max_rel_err = 0.0f64;
    for t in &tensors {
        if worst.is_empty() || t.max_rel_err > max_rel_err {
            worst = t.name.clone();
            max_rel_err = t.max_rel_err;
        }
    }
    Ok(GradCheckReport { part: part.to_string(), checked, max_rel_err, worst, tensors, passed: failures.is_empty(), failures })
}

/// Teacher-forced summed token NLL of `targets` (used by the full check).
pub fn paragraph_nll(model: &Captioner<f64>, video: &VideoRecord, segs: &[Segment], targets: &[Vec<usize>], grads: Option<&mut Grads<f64>>) -> Result<f64> {
    let mut sess = model.session(video, segs)?;
    let steps = sess.teacher_forced(targets)?;
    let (loss, _) = masked_token_nll(&mut sess.g, &steps).ok_or_else(|| Error::Invalid("no target tokens".into()))?;
    if let Some(gr) = grads {
        sess.g.backward(loss);
        sess.g.accumulate_param_grads(gr);
    }
    Ok(sess.g.scalar(loss))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn insert_input(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, n: usize) -> crate::params::ParamId {
    store.insert(name, Tensor { rows: n, cols: 1, data: random_vec(rng, n) })
}

/// Inner product with a fixed random vector, giving a scalar to differentiate.
fn project(g: &mut Graph<f64>, x: NodeId, rng_seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = g.constant(g.shape(x).0, g.shape(x).1, random_vec(&mut rng, g.size(x)));
    let p = g.mul(w, x);
    g.sum(p)
}

/// A small random video with `n` events and random captions.
pub fn tiny_video(dims: &TinyDims, seed: u64) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration = 6.0;
    let t = 12;
    let data: Vec<f32> = (0..t * dims.feat_dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let events = (0..dims.events)
        .map(|i| {
            let start = i as f64 * 1.5;
            let len = rng.gen_range(1usize..=3);
            let sentence = (0..len).map(|k| format!("w{}", (i * 3 + k) % (dims.vocab - 4))).collect();
            EventAnnotation { start, end: start + 2.5, sentence }
        })
        .collect();
    VideoRecord::new("tiny", duration, 0.5, FeatureMatrix { rows: t, cols: dims.feat_dim, data }, events)
        .expect("tiny video is valid")
}

fn tiny_targets(video: &VideoRecord, vocab: usize) -> Vec<Vec<usize>> {
    video
        .events_by_start()
        .iter()
        .map(|e| {
            let mut t: Vec<usize> = e.sentence.iter().map(|w| 4 + w[1..].parse::<usize>().unwrap() % (vocab - 4)).collect();
            t.push(EOS);
            t
        })
        .collect()
}

fn tiny_decoder(dims: &TinyDims, rng: &mut ChaCha8Rng, z_dim: usize) -> (ParamStore<f64>, DecoderIds) {
    let mut store = ParamStore::new();
    let cfg = DecoderConfig { hidden: dims.hidden, ..DecoderConfig::default() };
    let ids = DecoderIds::register(&mut store, &cfg, dims.feat_dim, z_dim, dims.vocab, rng);
    // random biases so that no unit sits at a symmetric point
    for id in [ids.gate_b, ids.pos_b0, ids.pos_b1, ids.out_b] {
        store.get_mut(id).data.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
    (store, ids)
}

/// Runs the finite-difference check for one model part at tiny dimensions.
pub fn grad_check(part: Part, dims: &TinyDims, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let video = tiny_video(dims, opts.seed);
    let segs: Vec<Segment> = video.events_by_start().iter().map(|e| e.segment()).collect();
    let h = dims.hidden;
    let name = part.to_string();
    match part {
        Part::Tsrm => {
            let mut store = ParamStore::new();
            let ids = TsrmIds::register(&mut store, "tsrm", dims.feat_dim, &TsrmConfig::uniform(dims.d_pos, h), &mut rng);
            for id in [ids.b0, ids.b1] {
                store.get_mut(id).data.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
            }
            maybe_zero(&mut store, opts);
            check_store(&name, &store, opts, |g, b| {
                let pooled = pooled_matrix(g, &video, &segs)?;
                let out = ids.encode(g, b, pooled, &segs)?;
                let r = project(g, out.relational, 1);
                let t = project(g, out.temporal, 2);
                Ok(g.add(r, t))
            })
        }
        Part::PositionEmbed => {
            let (mut store, ids) = tiny_decoder(dims, &mut rng, dims.feat_dim);
            maybe_zero(&mut store, opts);
            check_store(&name, &store, opts, |g, b| {
                let l = ids.position_embed(g, b, segs[1], video.duration);
                Ok(project(g, l, 3))
            })
        }
        Part::Cmg => {
            let z_dim = dims.feat_dim + h;
            let (mut store, ids) = tiny_decoder(dims, &mut rng, z_dim);
            let inputs = [
                insert_input(&mut store, &mut rng, "input.l", h),
                insert_input(&mut store, &mut rng, "input.z", z_dim),
                insert_input(&mut store, &mut rng, "input.s_prev", h),
                insert_input(&mut store, &mut rng, "input.h_prev", h),
            ];
            maybe_zero(&mut store, opts);
            check_store(&name, &store, opts, |g, b| {
                let gate = ids.cmg_gate(g, b, b[inputs[0]], b[inputs[1]], b[inputs[2]], b[inputs[3]]);
                Ok(project(g, gate, 4))
            })
        }
        Part::SentRnn => {
            let z_dim = dims.feat_dim + h;
            let (mut store, ids) = tiny_decoder(dims, &mut rng, z_dim);
            let inputs = [
                insert_input(&mut store, &mut rng, "input.z", z_dim),
                insert_input(&mut store, &mut rng, "input.s_prev", h),
                insert_input(&mut store, &mut rng, "input.h_prev", h),
                insert_input(&mut store, &mut rng, "input.c_prev", h),
            ];
            maybe_zero(&mut store, opts);
            check_store(&name, &store, opts, |g, b| {
                let mut state = ids.initial_state(g);
                state.s = b[inputs[1]];
                state.h = b[inputs[2]];
                state.c = b[inputs[3]];
                let l = ids.position_embed(g, b, segs[0], video.duration);
                let next = ids.sentence_step(g, b, state, l, b[inputs[0]]);
                let a = project(g, next.h, 5);
                let c = project(g, next.c, 6);
                Ok(g.add(a, c))
            })
        }
        Part::FrameAttention => {
            let (mut store, ids) = tiny_decoder(dims, &mut rng, dims.feat_dim);
            let wh = insert_input(&mut store, &mut rng, "input.word_h", h);
            let (n, rows) = video.frames::<f64>(segs[0])?;
            maybe_zero(&mut store, opts);
            check_store(&name, &store, opts, |g, b| {
                let f = ids.frames(g, b, n, rows.clone());
                let (ctx, w) = ids.frame_attention(g, b, b[wh], &f);
                let a = project(g, ctx, 7);
                let c = project(g, w, 8);
                Ok(g.add(a, c))
            })
        }
        Part::WordRnn => {
            let (mut store, ids) = tiny_decoder(dims, &mut rng, dims.feat_dim);
            let wh = insert_input(&mut store, &mut rng, "input.word_h", h);
            let wc = insert_input(&mut store, &mut rng, "input.word_c", h);
            let sh = insert_input(&mut store, &mut rng, "input.sentence_h", h);
            let (n, rows) = video.frames::<f64>(segs[0])?;
            maybe_zero(&mut store, opts);
            check_store(&name, &store, opts, |g, b| {
                let f: Frames = ids.frames(g, b, n, rows.clone());
                let (s1, l1) = ids.word_step(g, b, WordState { h: b[wh], c: b[wc] }, 5, b[sh], &f)?;
                let (_, l2) = ids.word_step(g, b, s1, 7, b[sh], &f)?;
                let a = project(g, l1, 9);
                let c = project(g, l2, 10);
                Ok(g.add(a, c))
            })
        }
        Part::Selector => {
            let sel = Selector::<f64>::new(&SelectorConfig { hidden: h, max_events: 10 }, dims.feat_dim, opts.seed)?;
            let mut store = sel.params.clone();
            let enc_b = sel.ids.enc_b;
            store.get_mut(enc_b).data.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
            maybe_zero(&mut store, opts);
            let cands = CandidateSet {
                video_id: video.video_id.clone(),
                proposals: (0..6)
                    .map(|k| Proposal { start: 0.5 * k as f64, end: 0.5 * k as f64 + 2.0 + 0.25 * (k % 3) as f64, score: 1.0 / (k + 2) as f64 })
                    .collect(),
            };
            let sel = sel.with_params(store.clone())?;
            let step = sel.train_selector_step(&cands, &video)?;
            compare(&name, &store, step.grads, opts, |s| {
                let probe = sel.clone().with_params(s.clone())?;
                Ok(probe.train_selector_step(&cands, &video)?.loss)
            })
        }
        Part::Full => {
            let cfg = CaptionerConfig { hidden: h, d_pos: dims.d_pos, ..CaptionerConfig::default() };
            let mut model = Captioner::<f64>::new(&cfg, dims.feat_dim, dims.vocab, opts.seed)?;
            for id in [model.dec.gate_b, model.dec.pos_b0, model.dec.out_b] {
                model.params.get_mut(id).data.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
            }
            let targets = tiny_targets(&video, dims.vocab);
            maybe_zero(&mut model.params, opts);
            let mut grads = Grads::zeros_like(&model.params);
            paragraph_nll(&model, &video, &segs, &targets, Some(&mut grads))?;
            let store = model.params.clone();
            compare(&name, &store, grads, opts, |s| {
                let probe = model.clone().with_params(s.clone())?;
                paragraph_nll(&probe, &video, &segs, &targets, None)
            })
        }
    }
}

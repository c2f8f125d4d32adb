//! The captioning model: relation encoder plus gated hierarchical decoder.

use crate::corpus::{VideoRecord, BOS, EOS, PAD};
use crate::decoder::{DecoderConfig, DecoderIds, DecoderState, Frames, GateKind, WordState};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::proposals::Segment;
use crate::scalar::Scalar;
use crate::tape::{Bound, Graph, NodeId};
use crate::tsrm::{pooled_matrix, TsrmConfig, TsrmIds};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub hidden: usize,
    pub d_pos: usize,
    pub gate: GateKind,
    pub use_tsrm: bool,
    pub use_cmg: bool,
    pub use_sent_rnn: bool,
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self { hidden: 512, d_pos: 16, gate: GateKind::Vector, use_tsrm: true, use_cmg: true, use_sent_rnn: true, max_len: 30 }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.use_tsrm {
            self.tsrm().validate()?;
        }
        Ok(())
    }

    pub fn tsrm(&self) -> TsrmConfig {
        TsrmConfig::uniform(self.d_pos, self.hidden)
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            hidden: self.hidden,
            gate: self.gate,
            use_cmg: self.use_cmg,
            use_sent_rnn: self.use_sent_rnn,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Captioner<T> {
    pub config: CaptionerConfig,
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub params: ParamStore<T>,
    pub tsrm: Option<TsrmIds>,
    pub dec: DecoderIds,
}

impl<T: Scalar> Captioner<T> {
    pub fn new(config: &CaptionerConfig, feat_dim: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if feat_dim == 0 || vocab_size <= EOS {
            return Err(Error::Config("feature and vocabulary sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let tsrm = config
            .use_tsrm
            .then(|| TsrmIds::register(&mut params, "tsrm", feat_dim, &config.tsrm(), &mut rng));
        let z_dim = feat_dim + if config.use_tsrm { config.hidden } else { 0 };
        let dec = DecoderIds::register(&mut params, &config.decoder(), feat_dim, z_dim, vocab_size, &mut rng);
        Ok(Self { config: config.clone(), feat_dim, vocab_size, params, tsrm, dec })
    }

    /// Replaces the parameters after checking names and shapes.
    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::Checkpoint("captioner parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(self)
    }

    /// Starts a decoding session over `segs`, which must be sorted by start.
    pub fn session(&self, record: &VideoRecord, segs: &[Segment]) -> Result<Session<'_, T>> {
        Session::new(self, record, segs)
    }
}

/// One paragraph's worth of graph: event features, decoder state and the
/// per-event word loop.
pub struct Session<'m, T: Scalar> {
    pub model: &'m Captioner<T>,
    pub g: Graph<T>,
    pub b: Bound,
    segs: Vec<Segment>,
    duration: f64,
    frame_data: Vec<(usize, Vec<T>)>,
    pub z: Vec<NodeId>,
    pub state: DecoderState,
    /// Gate node of every event started so far (CMG on).
    pub gates: Vec<NodeId>,
    frames: Option<Frames>,
    word: Option<WordState>,
}

impl<'m, T: Scalar> Session<'m, T> {
    fn new(model: &'m Captioner<T>, record: &VideoRecord, segs: &[Segment]) -> Result<Self> {
        if record.feat_dim() != model.feat_dim {
            return Err(Error::Invalid(format!(
                "video {} has feature width {}, model expects {}",
                record.video_id,
                record.feat_dim(),
                model.feat_dim
            )));
        }
        if segs.windows(2).any(|w| w[0].start > w[1].start) {
            return Err(Error::Invalid("events must be sorted by start time".into()));
        }
        let mut g = Graph::new();
        let b = g.bind(&model.params);
        let mut z = Vec::with_capacity(segs.len());
        let mut frame_data = Vec::with_capacity(segs.len());
        for s in segs {
            frame_data.push(record.frames::<T>(*s)?);
        }
        if !segs.is_empty() {
            let pooled = pooled_matrix(&mut g, record, segs)?;
            let rel = match &model.tsrm {
                Some(t) => Some(t.encode(&mut g, &b, pooled, segs)?.relational),
                None => None,
            };
            for i in 0..segs.len() {
                let p = g.row(pooled, i);
                z.push(match rel {
                    Some(r) => {
                        let r = g.row(r, i);
                        g.concat(&[p, r])
                    }
                    None => p,
                });
            }
        }
        let state = model.dec.initial_state(&mut g);
        Ok(Self {
            model,
            g,
            b,
            segs: segs.to_vec(),
            duration: record.duration,
            frame_data,
            z,
            state,
            gates: Vec::new(),
            frames: None,
            word: None,
        })
    }

    pub fn num_events(&self) -> usize {
        self.segs.len()
    }

    /// Runs the sentence step for event `i` and resets the word state.
    pub fn begin_event(&mut self, i: usize) {
        let dec = &self.model.dec;
        let g = &mut self.g;
        if !dec.config.use_sent_rnn {
            self.state = dec.initial_state(g);
        }
        let l = dec.position_embed(g, &self.b, self.segs[i], self.duration);
        self.state = dec.sentence_step(g, &self.b, self.state, l, self.z[i]);
        if let Some(gate) = self.state.g {
            self.gates.push(gate);
        }
        let (n, rows) = self.frame_data[i].clone();
        self.frames = Some(dec.frames(g, &self.b, n, rows));
        let h = dec.hidden();
        self.word = Some(WordState { h: g.zeros(h), c: g.zeros(h) });
    }

    /// Feeds `prev_token` and returns the logits node of the next token.
    pub fn step(&mut self, prev_token: usize) -> Result<NodeId> {
        let (word, frames) = match (self.word, self.frames.as_ref()) {
            (Some(w), Some(f)) => (w, *f),
            _ => return Err(Error::Invalid("step called before begin_event".into())),
        };
        let (w, logits) = self.model.dec.word_step(&mut self.g, &self.b, word, prev_token, self.state.h, &frames)?;
        self.word = Some(w);
        Ok(logits)
    }

    /// The last word hidden becomes `s_prev` for the next event.
    pub fn end_event(&mut self) {
        if let Some(w) = self.word.take() {
            self.state.s = w.h;
        }
        self.frames = None;
    }

    /// Softmax of a logits node, computed off the tape.
    pub fn probs(&self, logits: NodeId) -> Vec<f64> {
        softmax(self.g.value(logits))
    }

    /// Teacher-forced pass: `targets[i]` are the tokens to predict for event
    /// `i` (payload then EOS). Returns `(logits, target)` per step.
    pub fn teacher_forced(&mut self, targets: &[Vec<usize>]) -> Result<Vec<(NodeId, usize)>> {
        if targets.len() != self.segs.len() {
            return Err(Error::Invalid(format!("{} target sentences for {} events", targets.len(), self.segs.len())));
        }
        let mut out = Vec::new();
        for (i, tgt) in targets.iter().enumerate() {
            self.begin_event(i);
            let mut prev = BOS;
            for &t in tgt {
                let logits = self.step(prev)?;
                out.push((logits, t));
                prev = t;
            }
            self.end_event();
        }
        Ok(out)
    }
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let m = logits.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x.f64() - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the largest probability among emittable tokens (PAD and BOS are
/// never emitted); ties go to the lower id.
pub fn argmax_token(probs: &[f64]) -> usize {
    let mut best = EOS;
    for (k, p) in probs.iter().enumerate().skip(EOS + 1) {
        if *p > probs[best] {
            best = k;
        }
    }
    best
}

pub fn sample_token<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let mass: f64 = probs.iter().skip(EOS).sum();
    let mut u = rng.gen::<f64>() * mass;
    for (k, p) in probs.iter().enumerate().skip(EOS) {
        u -= p;
        if u <= 0.0 {
            return k;
        }
    }
    (EOS..probs.len()).rev().find(|k| probs[*k] > 0.0).unwrap_or(EOS)
}

pub enum Decoding<'a, R> {
    Greedy,
    Sample(&'a mut R),
}

/// Emitted tokens of one sentence; `ended` tells whether EOS was produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub ended: bool,
}

impl Sentence {
    /// The step targets that reproduce this sentence under teacher forcing.
    pub fn targets(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.ended {
            t.push(EOS);
        }
        t
    }
}

/// Decodes one sentence per event, in temporal order.
pub fn generate_paragraph<T: Scalar, R: Rng>(
    model: &Captioner<T>,
    record: &VideoRecord,
    segs: &[Segment],
    mut mode: Decoding<'_, R>,
) -> Result<Vec<Sentence>> {
    let mut sess = model.session(record, segs)?;
    let mut out = Vec::with_capacity(segs.len());
    for i in 0..segs.len() {
        sess.begin_event(i);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut ended = false;
        while tokens.len() < model.config.max_len {
            let logits = sess.step(prev)?;
            let p = sess.probs(logits);
            let tok = match &mut mode {
                Decoding::Greedy => argmax_token(&p),
                Decoding::Sample(rng) => sample_token(&p, *rng),
            };
            if tok == EOS {
                ended = true;
                break;
            }
            tokens.push(tok);
            prev = tok;
        }
        sess.end_event();
        out.push(Sentence { tokens, ended });
    }
    Ok(out)
}

pub fn greedy_paragraph<T: Scalar>(model: &Captioner<T>, record: &VideoRecord, segs: &[Segment]) -> Result<Vec<Sentence>> {
    generate_paragraph::<T, ChaCha8Rng>(model, record, segs, Decoding::Greedy)
}

/// Sum of `-log softmax(logits)[target]` over steps whose target is not PAD,
/// with the number of counted steps.
pub fn masked_token_nll<T: Scalar>(g: &mut Graph<T>, steps: &[(NodeId, usize)]) -> Option<(NodeId, usize)> {
    let mut terms = Vec::with_capacity(steps.len());
    for &(logits, t) in steps {
        if t == PAD {
            continue;
        }
        let lp = g.log_softmax(logits);
        terms.push(g.pick(lp, t));
    }
    if terms.is_empty() {
        return None;
    }
    let n = terms.len();
    let s = g.add_all(&terms);
    Some((g.scale(s, -T::one()), n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureMatrix;

    fn record() -> VideoRecord {
        let data: Vec<f32> = (0..40).map(|k| ((k * 7 % 11) as f32 - 5.0) / 5.0).collect();
        VideoRecord::new("v", 5.0, 0.5, FeatureMatrix { rows: 10, cols: 4, data }, vec![]).unwrap()
    }

    #[test]
    fn never_ending_model_truncates_at_max_len() {
        let cfg = CaptionerConfig { hidden: 4, d_pos: 4, max_len: 30, ..Default::default() };
        let mut m = Captioner::<f64>::new(&cfg, 4, 8, 1).unwrap();
        let ob = m.dec.out_b;
        let ow = m.dec.out_w;
        m.params.get_mut(ow).data.iter_mut().for_each(|x| *x = 0.0);
        m.params.get_mut(ob).data = vec![0.0, 0.0, -50.0, 0.0, 0.0, 9.0, 0.0, 0.0];
        let segs = [Segment { start: 0.0, end: 2.0 }, Segment { start: 1.0, end: 5.0 }];
        let out = greedy_paragraph(&m, &record(), &segs).unwrap();
        for s in out {
            assert_eq!(s.tokens, vec![5; 30]);
            assert!(!s.ended);
        }
    }

    #[test]
    fn unsorted_events_rejected() {
        let cfg = CaptionerConfig { hidden: 4, d_pos: 4, ..Default::default() };
        let m = Captioner::<f64>::new(&cfg, 4, 8, 1).unwrap();
        let segs = [Segment { start: 2.0, end: 3.0 }, Segment { start: 1.0, end: 5.0 }];
        assert!(m.session(&record(), &segs).is_err());
        assert!(greedy_paragraph(&m, &record(), &[]).unwrap().is_empty());
    }

    #[test]
    fn argmax_skips_pad_and_bos() {
        assert_eq!(argmax_token(&[0.5, 0.3, 0.1, 0.1]), 2);
        assert_eq!(argmax_token(&[0.1, 0.1, 0.2, 0.3, 0.3]), 3);
    }
}

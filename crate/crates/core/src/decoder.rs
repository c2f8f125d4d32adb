//! Gated hierarchical recurrent decoder.
//!
//! A sentence-level LSTM runs once per event. Its input mixes the event
//! feature `z_i` and the last word-level hidden state of the previous sentence
//! `s_{i-1}` through a sigmoid gate `g`, and appends the span embedding `l_i`
//! ungated. A word-level LSTM with additive attention over the event's frames
//! then emits the sentence.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::proposals::Segment;
use crate::scalar::Scalar;
use crate::tape::{Bound, Graph, NodeId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// LSTM cell parameters; gate blocks are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmIds {
    pub input: usize,
    pub hidden: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl LstmIds {
    /// Forget-gate bias starts at 1.
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w = store.add(&format!("{}.w", prefix), 4 * hidden, input + hidden, Init::Glorot, rng);
        let b = store.add(&format!("{}.b", prefix), 4 * hidden, 1, Init::Zeros, rng);
        store.get_mut(b).data[hidden..2 * hidden].iter_mut().for_each(|x| *x = T::one());
        Self { input, hidden, w, b }
    }

    /// One step; returns `(h', c')`.
    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let hd = self.hidden;
        let xh = g.concat(&[x, h]);
        let pre = g.affine(b[self.w], b[self.b], xh);
        let i = g.slice(pre, 0, hd);
        let f = g.slice(pre, hd, hd);
        let u = g.slice(pre, 2 * hd, hd);
        let o = g.slice(pre, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let u = g.tanh(u);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let iu = g.mul(i, u);
        let c2 = g.add(fc, iu);
        let tc = g.tanh(c2);
        (g.mul(o, tc), c2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Vector,
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// LSTM and fully connected width.
    pub hidden: usize,
    pub gate: GateKind,
    pub use_cmg: bool,
    pub use_sent_rnn: bool,
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: 512, gate: GateKind::Vector, use_cmg: true, use_sent_rnn: true, max_len: 30 }
    }
}

/// Decoder parameter handles and dimensions.
#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub config: DecoderConfig,
    pub feat_dim: usize,
    pub z_dim: usize,
    pub vocab: usize,
    pub pos_w0: ParamId,
    pub pos_b0: ParamId,
    pub pos_w1: ParamId,
    pub pos_b1: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub vis_w: ParamId,
    pub lin_w: ParamId,
    pub sent: LstmIds,
    pub embed: ParamId,
    pub word: LstmIds,
    pub att_wh: ParamId,
    pub att_wf: ParamId,
    pub att_v: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// Sentence-level context carried across events.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: NodeId,
    pub c: NodeId,
    /// Last word-level hidden of the previous sentence.
    pub s: NodeId,
    pub g: Option<NodeId>,
    pub l: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct WordState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Frames of one event and their attention projection.
#[derive(Clone, Copy, Debug)]
pub struct Frames {
    pub n: usize,
    /// n×D
    pub rows: NodeId,
    /// n×A
    pub proj: NodeId,
}

impl DecoderIds {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        config: &DecoderConfig,
        feat_dim: usize,
        z_dim: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        let h = config.hidden;
        let gw = match config.gate {
            GateKind::Vector => h,
            GateKind::Scalar => 1,
        };
        Self {
            config: config.clone(),
            feat_dim,
            z_dim,
            vocab,
            pos_w0: store.add("pos.w0", h, 2, Init::Glorot, rng),
            pos_b0: store.add("pos.b0", h, 1, Init::Zeros, rng),
            pos_w1: store.add("pos.w1", h, h, Init::Glorot, rng),
            pos_b1: store.add("pos.b1", h, 1, Init::Zeros, rng),
            gate_w: store.add("cmg.w", gw, h + z_dim + 2 * h, Init::Glorot, rng),
            gate_b: store.add("cmg.b", gw, 1, Init::Zeros, rng),
            vis_w: store.add("cmg.vis", h, z_dim, Init::Glorot, rng),
            lin_w: store.add("cmg.lin", h, h, Init::Glorot, rng),
            sent: LstmIds::register(store, "sent", 3 * h, h, rng),
            embed: store.add("word.embed", vocab, h, Init::Uniform(0.1), rng),
            word: LstmIds::register(store, "word.lstm", h + feat_dim + h, h, rng),
            att_wh: store.add("att.wh", h, h, Init::Glorot, rng),
            att_wf: store.add("att.wf", h, feat_dim, Init::Glorot, rng),
            att_v: store.add("att.v", h, 1, Init::Glorot, rng),
            out_w: store.add("out.w", vocab, h, Init::Glorot, rng),
            out_b: store.add("out.b", vocab, 1, Init::Zeros, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn initial_state<T: Scalar>(&self, g: &mut Graph<T>) -> DecoderState {
        let h = self.hidden();
        DecoderState { h: g.zeros(h), c: g.zeros(h), s: g.zeros(h), g: None, l: None }
    }

    /// `l = affine(ReLU(affine([start/duration, end/duration])))`
    pub fn position_embed<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, seg: Segment, duration: f64) -> NodeId {
        let x = g.vector(vec![T::c(seg.start / duration), T::c(seg.end / duration)]);
        let a = g.affine(b[self.pos_w0], b[self.pos_b0], x);
        let a = g.relu(a);
        g.affine(b[self.pos_w1], b[self.pos_b1], a)
    }

    /// `sigmoid(W [l ⊕ z ⊕ s_prev ⊕ h_prev] + b)`
    pub fn cmg_gate<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, l: NodeId, z: NodeId, s_prev: NodeId, h_prev: NodeId) -> NodeId {
        let x = g.concat(&[l, z, s_prev, h_prev]);
        let a = g.affine(b[self.gate_w], b[self.gate_b], x);
        g.sigmoid(a)
    }

    /// Runs the sentence-level cell for one event.
    pub fn sentence_step<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, state: DecoderState, l: NodeId, z: NodeId) -> DecoderState {
        let vis = g.matvec(b[self.vis_w], z);
        let lin = g.matvec(b[self.lin_w], state.s);
        let (x, gate) = if self.config.use_cmg {
            let gate = self.cmg_gate(g, b, l, z, state.s, state.h);
            let wide = match self.config.gate {
                GateKind::Vector => gate,
                GateKind::Scalar => g.gather(gate, &vec![0; self.hidden()]),
            };
            let gv = g.mul(wide, vis);
            let inv = g.one_minus(wide);
            let gl = g.mul(inv, lin);
            (g.concat(&[gv, gl, l]), Some(gate))
        } else {
            (g.concat(&[vis, lin, l]), None)
        };
        let (h, c) = self.sent.step(g, b, x, state.h, state.c);
        DecoderState { h, c, s: state.s, g: gate, l: Some(l) }
    }

    /// Frame rows (n×D, row-major) as a constant with their attention projection.
    pub fn frames<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, n: usize, rows: Vec<T>) -> Frames {
        let rows = g.constant(n, self.feat_dim, rows);
        let proj = g.matmul_nt(rows, b[self.att_wf]);
        Frames { n, rows, proj }
    }

    /// Additive attention; returns `(context, weights)`.
    pub fn frame_attention<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, word_h: NodeId, frames: &Frames) -> (NodeId, NodeId) {
        let q = g.matvec(b[self.att_wh], word_h);
        let e = g.add_row_vec(frames.proj, q);
        let e = g.tanh(e);
        let e = g.matvec(e, b[self.att_v]);
        let w = g.softmax(e);
        (g.vecmat(w, frames.rows), w)
    }

    /// One word step; returns the new state and the vocabulary logits.
    pub fn word_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        state: WordState,
        prev_token: usize,
        sentence_h: NodeId,
        frames: &Frames,
    ) -> Result<(WordState, NodeId)> {
        if prev_token >= self.vocab {
            return Err(Error::TokenOutOfRange { id: prev_token, size: self.vocab });
        }
        let emb = g.row(b[self.embed], prev_token);
        let (ctx, _) = self.frame_attention(g, b, state.h, frames);
        let x = g.concat(&[emb, ctx, sentence_h]);
        let (h, c) = self.word.step(g, b, x, state.h, state.c);
        let logits = g.affine(b[self.out_w], b[self.out_b], h);
        Ok((WordState { h, c }, logits))
    }
}

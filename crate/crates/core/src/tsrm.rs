//! Temporal-semantic relation encoder.
//!
//! For events `p_1..p_N` of one video the temporal branch scores each ordered
//! pair from its relative geometry, the semantic branch with a scaled dot
//! product of projected pooled features. The two score matrices are added,
//! normalized row-wise with softmax and used to aggregate value-projected
//! pooled features. The event feature is `z_i = pooled_i ⊕ relational_i`.

use crate::corpus::VideoRecord;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::proposals::{Proposal, Segment};
use crate::scalar::Scalar;
use crate::tape::{Bound, Graph, NodeId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsrmConfig {
    /// Sinusoidal width per geometric scalar (even).
    pub d_pos: usize,
    pub temporal_hidden: usize,
    pub dk: usize,
    pub dv: usize,
}

impl TsrmConfig {
    pub fn uniform(d_pos: usize, width: usize) -> Self {
        Self { d_pos, temporal_hidden: width, dk: width, dv: width }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_pos < 2 || self.d_pos % 2 != 0 {
            return Err(Error::Config(format!("d_pos must be even and at least 2, got {}", self.d_pos)));
        }
        if self.temporal_hidden == 0 || self.dk == 0 || self.dv == 0 {
            return Err(Error::Config("relation encoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal expansion of a real scalar: `d_pos / 2` (sin, cos) pairs with
/// angular frequencies `100 / 10000^(2k / d_pos)`.
pub fn sinusoid(x: f64, d_pos: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d_pos);
    for k in 0..d_pos / 2 {
        let freq = 100.0 / 10000f64.powf(2.0 * k as f64 / d_pos as f64);
        let a = x * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPositionCode {
    /// `ln(len_j / len_i)`
    pub rel_len: f64,
    /// `(center_j - center_i) / len_i`
    pub rel_dist: f64,
    /// `sinusoid(rel_len) ⊕ sinusoid(rel_dist)`
    pub code: Vec<f64>,
}

pub fn pair_position_code(p_i: Segment, p_j: Segment, d_pos: usize) -> Result<PairPositionCode> {
    p_i.validate()?;
    p_j.validate()?;
    let rel_len = (p_j.len() / p_i.len()).ln();
    let rel_dist = (p_j.center() - p_i.center()) / p_i.len();
    let mut code = sinusoid(rel_len, d_pos);
    code.extend(sinusoid(rel_dist, d_pos));
    Ok(PairPositionCode { rel_len, rel_dist, code })
}

/// Parameter handles of the encoder inside some [`ParamStore`].
#[derive(Clone, Debug)]
pub struct TsrmIds {
    pub config: TsrmConfig,
    pub feat_dim: usize,
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl TsrmIds {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        feat_dim: usize,
        config: &TsrmConfig,
        rng: &mut R,
    ) -> Self {
        let c = config;
        let n = |s: &str| format!("{}.{}", prefix, s);
        Self {
            config: c.clone(),
            feat_dim,
            w0: store.add(&n("temporal.w0"), c.temporal_hidden, 2 * c.d_pos, Init::Glorot, rng),
            b0: store.add(&n("temporal.b0"), c.temporal_hidden, 1, Init::Zeros, rng),
            w1: store.add(&n("temporal.w1"), 1, c.temporal_hidden, Init::Glorot, rng),
            b1: store.add(&n("temporal.b1"), 1, 1, Init::Zeros, rng),
            wq: store.add(&n("semantic.wq"), c.dk, feat_dim, Init::Glorot, rng),
            wk: store.add(&n("semantic.wk"), c.dk, feat_dim, Init::Glorot, rng),
            wv: store.add(&n("value.wv"), c.dv, feat_dim, Init::Glorot, rng),
        }
    }

    /// N×N temporal scores.
    pub fn temporal_scores<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, segs: &[Segment]) -> Result<NodeId> {
        let n = segs.len();
        let d2 = 2 * self.config.d_pos;
        let mut codes = Vec::with_capacity(n * n * d2);
        for &si in segs {
            for &sj in segs {
                codes.extend(pair_position_code(si, sj, self.config.d_pos)?.code.into_iter().map(T::c));
            }
        }
        let c = g.constant(n * n, d2, codes);
        let h = g.matmul_nt(c, b[self.w0]);
        let h = g.add_row_vec(h, b[self.b0]);
        let h = g.relu(h);
        let s = g.matmul_nt(h, b[self.w1]);
        let s = g.add_row_vec(s, b[self.b1]);
        Ok(g.reshape(s, n, n))
    }

    /// N×N scaled dot-product scores of the pooled rows (N×D).
    pub fn semantic_scores<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, pooled: NodeId) -> NodeId {
        let q = g.matmul_nt(pooled, b[self.wq]);
        let k = g.matmul_nt(pooled, b[self.wk]);
        let s = g.matmul_nt(q, k);
        g.scale(s, T::one() / T::c(self.config.dk as f64).sqrt())
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, pooled: NodeId, segs: &[Segment]) -> Result<TsrmNodes> {
        if segs.is_empty() {
            return Err(Error::Invalid("relation encoder needs at least one event".into()));
        }
        let temporal = self.temporal_scores(g, b, segs)?;
        let semantic = self.semantic_scores(g, b, pooled);
        let fused = g.add(temporal, semantic);
        let attention = g.softmax_rows(fused);
        let values = g.matmul_nt(pooled, b[self.wv]);
        let relational = g.matmul(attention, values);
        Ok(TsrmNodes { pooled, temporal, semantic, fused, attention, relational })
    }
}

/// Graph nodes produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct TsrmNodes {
    pub pooled: NodeId,
    pub temporal: NodeId,
    pub semantic: NodeId,
    pub fused: NodeId,
    pub attention: NodeId,
    /// N×dv
    pub relational: NodeId,
}

/// Stacks the pooled features of each segment into an N×D constant.
pub fn pooled_matrix<T: Scalar>(g: &mut Graph<T>, record: &VideoRecord, segs: &[Segment]) -> Result<NodeId> {
    let mut data = Vec::with_capacity(segs.len() * record.feat_dim());
    for s in segs {
        data.extend(record.mean_pool::<T>(*s)?);
    }
    Ok(g.constant(segs.len(), record.feat_dim(), data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub temporal: Vec<Vec<f64>>,
    pub semantic: Vec<Vec<f64>>,
    pub fused: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventFeature {
    pub pooled: Vec<f64>,
    pub relational: Vec<f64>,
    pub z: Vec<f64>,
}

fn rows<T: Scalar>(v: &[T], n: usize) -> Vec<Vec<f64>> {
    v.chunks(v.len() / n).map(|r| r.iter().map(|x| x.f64()).collect()).collect()
}

/// A standalone encoder with its own parameters.
#[derive(Clone, Debug)]
pub struct Tsrm<T> {
    pub params: ParamStore<T>,
    pub ids: TsrmIds,
}

impl<T: Scalar> Tsrm<T> {
    pub fn new(feat_dim: usize, config: &TsrmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let ids = TsrmIds::register(&mut params, "tsrm", feat_dim, config, &mut rng);
        Ok(Self { params, ids })
    }

    pub fn temporal_scores(&self, segs: &[Segment]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let b = g.bind(&self.params);
        let s = self.ids.temporal_scores(&mut g, &b, segs)?;
        Ok(rows(g.value(s), segs.len()))
    }

    pub fn semantic_scores(&self, pooled: &[Vec<T>]) -> Result<Vec<Vec<f64>>> {
        let d = self.ids.feat_dim;
        if pooled.iter().any(|p| p.len() != d) {
            return Err(Error::Invalid(format!("pooled features must have dimension {}", d)));
        }
        let mut g = Graph::new();
        let b = g.bind(&self.params);
        let p = g.constant(pooled.len(), d, pooled.concat());
        let s = self.ids.semantic_scores(&mut g, &b, p);
        Ok(rows(g.value(s), pooled.len()))
    }

    pub fn encode_events(&self, record: &VideoRecord, proposals: &[Proposal]) -> Result<(RelationScores, Vec<EventFeature>)> {
        let segs: Vec<Segment> = proposals.iter().map(|p| p.segment()).collect();
        let n = segs.len();
        let mut g = Graph::new();
        let b = g.bind(&self.params);
        let pooled = pooled_matrix(&mut g, record, &segs)?;
        let out = self.ids.encode(&mut g, &b, pooled, &segs)?;
        let scores = RelationScores {
            temporal: rows(g.value(out.temporal), n),
            semantic: rows(g.value(out.semantic), n),
            fused: rows(g.value(out.fused), n),
            attention: rows(g.value(out.attention), n),
        };
        let p = rows(g.value(out.pooled), n);
        let r = rows(g.value(out.relational), n);
        let feats = p
            .into_iter()
            .zip(r)
            .map(|(pooled, relational)| {
                let z = pooled.iter().chain(&relational).copied().collect();
                EventFeature { pooled, relational, z }
            })
            .collect();
        Ok((scores, feats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_pair_codes_alternate() {
        let s = Segment { start: 3.0, end: 7.0 };
        let c = pair_position_code(s, s, 8).unwrap();
        assert_eq!((c.rel_len, c.rel_dist), (0.0, 0.0));
        let want: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        assert_eq!(c.code, want);
    }

    #[test]
    fn doubled_length_same_centre() {
        let c = pair_position_code(Segment { start: 4.0, end: 6.0 }, Segment { start: 3.0, end: 7.0 }, 4).unwrap();
        assert!((c.rel_len - 2f64.ln()).abs() < 1e-15);
        assert_eq!(c.rel_dist, 0.0);
    }

    #[test]
    fn shift_by_hundred_seconds() {
        let a = Segment { start: 1.0, end: 3.0 };
        let b = Segment { start: 2.5, end: 8.0 };
        let s = |x: Segment| Segment { start: x.start + 100.0, end: x.end + 100.0 };
        assert_eq!(pair_position_code(a, b, 8).unwrap(), pair_position_code(s(a), s(b), 8).unwrap());
    }

    #[test]
    fn degenerate_segment_rejected() {
        assert!(pair_position_code(Segment { start: 1.0, end: 1.0 }, Segment { start: 0.0, end: 1.0 }, 4).is_err());
    }

    #[test]
    fn semantic_identity_projection_example() {
        let mut t = Tsrm::<f64>::new(4, &TsrmConfig::uniform(4, 4), 1).unwrap();
        for id in [t.ids.wq, t.ids.wk] {
            let w = t.params.get_mut(id);
            w.data.iter_mut().enumerate().for_each(|(k, x)| *x = if k / 4 == k % 4 { 1.0 } else { 0.0 });
        }
        let e1 = vec![1.0, 0.0, 0.0, 0.0];
        let e2 = vec![0.0, 1.0, 0.0, 0.0];
        let s = t.semantic_scores(&[e1.clone(), e1.clone()]).unwrap();
        assert_eq!(s[0][1], 0.5);
        let s = t.semantic_scores(&[e1, e2]).unwrap();
        assert_eq!(s[0][1], 0.0);
        assert_eq!(s[1][0], 0.0);
    }

    #[test]
    fn zero_params_give_zero_scores() {
        let mut t = Tsrm::<f64>::new(3, &TsrmConfig::uniform(4, 5), 2).unwrap();
        for id in t.params.ids().collect::<Vec<_>>() {
            t.params.get_mut(id).data.iter_mut().for_each(|x| *x = 0.0);
        }
        let segs = [Segment { start: 0.0, end: 1.0 }, Segment { start: 0.5, end: 4.0 }];
        assert!(t.temporal_scores(&segs).unwrap().iter().flatten().all(|x| *x == 0.0));
        assert_eq!(t.temporal_scores(&segs[..1]).unwrap().len(), 1);
    }
}

use crate::corpus::{VideoRecord, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{argmax_token, Captioner, Sentence};
use crate::proposals::Segment;
use crate::scalar::Scalar;

/// Greedy decoding from the mean of the members' word distributions. Every
/// member advances its own state with the jointly chosen token.
pub fn ensemble_decode<T: Scalar>(members: &[&Captioner<T>], record: &VideoRecord, segs: &[Segment]) -> Result<Vec<Sentence>> {
    let first = members.first().ok_or_else(|| Error::Invalid("ensemble needs at least one member".into()))?;
    for m in members {
        if m.vocab_size != first.vocab_size || m.feat_dim != first.feat_dim {
            return Err(Error::Invalid("ensemble members disagree on vocabulary or feature width".into()));
        }
    }
    let max_len = members.iter().map(|m| m.config.max_len).min().unwrap_or(0);
    let mut sessions = members.iter().map(|m| m.session(record, segs)).collect::<Result<Vec<_>>>()?;
    let k = members.len() as f64;
    let mut out = Vec::with_capacity(segs.len());
    for i in 0..segs.len() {
        sessions.iter_mut().for_each(|s| s.begin_event(i));
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut ended = false;
        while tokens.len() < max_len {
            let mut avg = vec![0.0f64; first.vocab_size];
            for s in sessions.iter_mut() {
                let logits = s.step(prev)?;
                for (a, p) in avg.iter_mut().zip(s.probs(logits)) {
                    *a += p;
                }
            }
            avg.iter_mut().for_each(|a| *a /= k);
            let tok = argmax_token(&avg);
            if tok == EOS {
                ended = true;
                break;
            }
            tokens.push(tok);
            prev = tok;
        }
        sessions.iter_mut().for_each(|s| s.end_event());
        out.push(Sentence { tokens, ended });
    }
    Ok(out)
}

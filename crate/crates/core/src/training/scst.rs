//! Self-critical fine-tuning over sampled event sequences.

use super::{Logger, TrainConfig};
use crate::corpus::{EventAnnotation, VideoRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::esgn::{SelectMode, Selector};
use crate::metrics::meteor_lite;
use crate::model::{generate_paragraph, greedy_paragraph, masked_token_nll, Captioner, Decoding, Sentence};
use crate::params::{Adam, Grads};
use crate::proposals::{tiou, CandidateSet, Segment};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    /// Mean per-sentence METEOR-lite against the max-tIoU GT sentence.
    Sentence,
    /// METEOR-lite of the joined paragraph against the joined GT paragraph.
    Paragraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub video_id: String,
    pub r_sample: f64,
    pub r_greedy: f64,
    pub advantage: f64,
}

/// Reward of a predicted paragraph (`(span, words)` per event) against the
/// GT events of the video.
pub fn paragraph_reward(pred: &[(Segment, Vec<String>)], gt: &[EventAnnotation], kind: RewardKind) -> f64 {
    if pred.is_empty() || gt.is_empty() {
        return 0.0;
    }
    match kind {
        RewardKind::Sentence => {
            let total: f64 = pred
                .iter()
                .map(|(seg, words)| {
                    let mut best: Option<(f64, &EventAnnotation)> = None;
                    for e in gt {
                        let v = tiou(*seg, e.segment()).unwrap_or(0.0);
                        if best.map_or(true, |(b, _)| v > b) {
                            best = Some((v, e));
                        }
                    }
                    match best {
                        Some((v, e)) if v > 0.0 && !words.is_empty() => meteor_lite(words, &[&e.sentence]).unwrap_or(0.0),
                        _ => 0.0,
                    }
                })
                .sum();
            total / pred.len() as f64
        }
        RewardKind::Paragraph => {
            let cand: Vec<String> = pred.iter().flat_map(|(_, w)| w.iter().cloned()).collect();
            let mut sorted = gt.to_vec();
            sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
            let reference: Vec<String> = sorted.iter().flat_map(|e| e.sentence.iter().cloned()).collect();
            if cand.is_empty() {
                0.0
            } else {
                meteor_lite(&cand, &[reference]).unwrap_or(0.0)
            }
        }
    }
}

fn words(vocab: &Vocabulary, sents: &[Sentence], segs: &[Segment]) -> Result<Vec<(Segment, Vec<String>)>> {
    segs.iter().zip(sents).map(|(s, t)| Ok((*s, vocab.decode(&t.tokens)?))).collect()
}

#[derive(Clone, Debug)]
pub struct ScstOutcome<T> {
    /// `mean_k advantage_k · NLL(sample_k)`; its gradient is the policy gradient.
    pub loss: f64,
    pub grads: Grads<T>,
    pub rewards: Vec<RewardRecord>,
    pub skipped: bool,
}

/// One self-critical update for a video: sample event sequences from the
/// selector, caption each by sampling and greedily, and weight the sampled
/// caption's log-likelihood by the reward difference.
pub fn scst_step<T: Scalar>(
    model: &Captioner<T>,
    selector: &Selector<T>,
    vocab: &Vocabulary,
    record: &VideoRecord,
    cands: &CandidateSet,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ScstOutcome<T>> {
    let mut grads = Grads::zeros_like(&model.params);
    if record.events.is_empty() || cands.is_empty() {
        return Ok(ScstOutcome { loss: 0.0, grads, rewards: Vec::new(), skipped: true });
    }
    let n = cfg.scst_sequences;
    let mut loss = 0.0;
    let mut rewards = Vec::with_capacity(n);
    for _ in 0..n {
        let seq = selector.select_sequence(cands, record, SelectMode::Sample, Some(&mut *rng))?;
        let segs = seq.sorted_segments();
        let sampled = generate_paragraph(model, record, &segs, Decoding::Sample(&mut *rng))?;
        let greedy = greedy_paragraph(model, record, &segs)?;
        let r_sample = paragraph_reward(&words(vocab, &sampled, &segs)?, &record.events, cfg.reward);
        let r_greedy = paragraph_reward(&words(vocab, &greedy, &segs)?, &record.events, cfg.reward);
        let advantage = r_sample - r_greedy;
        rewards.push(RewardRecord { video_id: record.video_id.clone(), r_sample, r_greedy, advantage });
        if advantage == 0.0 || segs.is_empty() {
            continue;
        }
        let mut sess = model.session(record, &segs)?;
        let targets: Vec<Vec<usize>> = sampled.iter().map(|s| s.targets()).collect();
        let steps = sess.teacher_forced(&targets)?;
        if let Some((nll, _)) = masked_token_nll(&mut sess.g, &steps) {
            let w = T::c(advantage / n as f64);
            let obj = sess.g.scale(nll, w);
            sess.g.backward(obj);
            sess.g.accumulate_param_grads(&mut grads);
            loss += sess.g.scalar(obj).f64();
        }
    }
    Ok(ScstOutcome { loss, grads, rewards, skipped: false })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScstHistory {
    pub epoch_reward: Vec<f64>,
    pub skipped_videos: usize,
    pub last_step: usize,
}

/// Self-critical epochs over `data`; the selector is frozen. Steps whose
/// advantages are all zero leave the parameters untouched.
pub fn train_scst<T: Scalar>(
    model: &mut Captioner<T>,
    selector: &Selector<T>,
    vocab: &Vocabulary,
    data: &[(CandidateSet, &VideoRecord)],
    cfg: &TrainConfig,
    epochs: usize,
    start_step: usize,
    log: Logger<'_>,
) -> Result<ScstHistory> {
    if data.is_empty() {
        return Err(Error::Invalid("no videos for self-critical training".into()));
    }
    let mut opt = Adam::new(&model.params, cfg.lr_scst);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5c57 + start_step as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut hist = ScstHistory { last_step: start_step, ..Default::default() };
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut reward_sum = 0.0;
        let mut reward_n = 0;
        for &i in &order {
            let (c, r) = &data[i];
            let mut out = scst_step(model, selector, vocab, r, c, cfg, &mut rng)?;
            if out.skipped {
                hist.skipped_videos += 1;
                continue;
            }
            reward_sum += out.rewards.iter().map(|x| x.r_greedy).sum::<f64>();
            reward_n += out.rewards.len();
            hist.last_step += 1;
            if !out.grads.is_zero() {
                out.grads.clip_norm(T::c(cfg.grad_clip));
                opt.step(&mut model.params, &out.grads);
            }
            if cfg.log_every > 0 && hist.last_step % cfg.log_every == 0 {
                let mean_adv = out.rewards.iter().map(|x| x.advantage).sum::<f64>() / out.rewards.len() as f64;
                log(json!({"event": "scst_step", "step": hist.last_step, "loss": out.loss, "mean_advantage": mean_adv}));
            }
        }
        let mean = if reward_n == 0 { 0.0 } else { reward_sum / reward_n as f64 };
        hist.epoch_reward.push(mean);
        log(json!({"event": "scst_epoch", "epoch": epoch + 1, "step": hist.last_step, "greedy_reward": mean, "skipped": hist.skipped_videos}));
    }
    Ok(hist)
}

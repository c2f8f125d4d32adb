//! Cross-entropy and self-critical training, gradient checking and ensembles.

mod ensemble;
pub mod gradcheck;
mod scst;

pub use ensemble::ensemble_decode;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Part, TinyDims};
pub use scst::{paragraph_reward, scst_step, train_scst, RewardKind, RewardRecord, ScstHistory, ScstOutcome};

use crate::corpus::{VideoRecord, Vocabulary};
use crate::decoder::GateKind;
use crate::error::{Error, Result};
use crate::esgn::{Selector, SelectorConfig};
use crate::model::{masked_token_nll, Captioner, CaptionerConfig};
use crate::params::{Adam, Grads};
use crate::proposals::{CandidateSet, Segment, WindowConfig};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Xe,
    Scst,
}

/// Every knob of the training pipeline. Loaded from a flat TOML file; absent
/// keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: Mode,
    pub hidden: usize,
    pub d_pos: usize,
    pub gate: GateKind,
    pub use_tsrm: bool,
    pub use_cmg: bool,
    pub use_sent_rnn: bool,
    pub max_len: usize,
    pub min_count: usize,
    pub lr_xe: f64,
    pub lr_scst: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scst_epochs: usize,
    pub scst_sequences: usize,
    pub reward: RewardKind,
    pub grad_clip: f64,
    pub scorer_hidden: usize,
    pub scorer_epochs: usize,
    pub scorer_lr: f64,
    pub window_scales: Vec<f64>,
    pub window_step: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
    pub selector_hidden: usize,
    pub selector_epochs: usize,
    pub selector_lr: f64,
    pub max_events: usize,
    /// Log every n-th optimizer step (0 disables step records).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = WindowConfig::default();
        Self {
            seed: 1,
            mode: Mode::Xe,
            hidden: 512,
            d_pos: 16,
            gate: GateKind::Vector,
            use_tsrm: true,
            use_cmg: true,
            use_sent_rnn: true,
            max_len: 30,
            min_count: 5,
            lr_xe: 1e-3,
            lr_scst: 1e-5,
            batch_size: 8,
            epochs: 30,
            scst_epochs: 20,
            scst_sequences: 24,
            reward: RewardKind::Sentence,
            grad_clip: 5.0,
            scorer_hidden: 64,
            scorer_epochs: 30,
            scorer_lr: 3e-3,
            window_scales: w.scales,
            window_step: w.step_frac,
            nms_threshold: w.nms_threshold,
            top_k: w.top_k,
            selector_hidden: 512,
            selector_epochs: 30,
            selector_lr: 1e-3,
            max_events: 10,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.captioner().validate()?;
        self.windows().validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.scst_sequences == 0 {
            return bad("scst_sequences must be positive".into());
        }
        for (name, lr) in [("lr_xe", self.lr_xe), ("lr_scst", self.lr_scst), ("scorer_lr", self.scorer_lr), ("selector_lr", self.selector_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{} must be positive", name));
            }
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if self.scorer_hidden == 0 || self.selector_hidden == 0 || self.max_events == 0 {
            return bad("proposal and selector sizes must be positive".into());
        }
        Ok(())
    }

    pub fn captioner(&self) -> CaptionerConfig {
        CaptionerConfig {
            hidden: self.hidden,
            d_pos: self.d_pos,
            gate: self.gate,
            use_tsrm: self.use_tsrm,
            use_cmg: self.use_cmg,
            use_sent_rnn: self.use_sent_rnn,
            max_len: self.max_len,
        }
    }

    pub fn selector(&self) -> SelectorConfig {
        SelectorConfig { hidden: self.selector_hidden, max_events: self.max_events }
    }

    pub fn windows(&self) -> WindowConfig {
        WindowConfig {
            scales: self.window_scales.clone(),
            step_frac: self.window_step,
            nms_threshold: self.nms_threshold,
            top_k: self.top_k,
        }
    }

    /// Hash of everything that determines parameter shapes.
    pub fn model_hash(&self) -> u64 {
        let v = json!({
            "captioner": self.captioner(),
            "selector": self.selector(),
            "scorer_hidden": self.scorer_hidden,
        });
        crate::fnv1a(v.to_string().as_bytes())
    }
}

/// Receives line-structured training events.
pub type Logger<'a> = &'a mut dyn FnMut(serde_json::Value);

/// One captioning example: a video, its GT spans sorted by start and the
/// per-step targets (payload then EOS) of each span.
#[derive(Clone, Debug)]
pub struct XeItem<'a> {
    pub record: &'a VideoRecord,
    pub segs: Vec<Segment>,
    pub targets: Vec<Vec<usize>>,
}

impl<'a> XeItem<'a> {
    pub fn from_record(record: &'a VideoRecord, vocab: &Vocabulary) -> Self {
        let ev = record.events_by_start();
        Self {
            record,
            segs: ev.iter().map(|e| e.segment()).collect(),
            targets: ev.iter().map(|e| vocab.encode(&e.sentence)[1..].to_vec()).collect(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.targets.iter().map(|t| t.len()).sum()
    }
}

/// Summed token NLL of one item and its gradient.
pub fn item_nll<T: Scalar>(model: &Captioner<T>, item: &XeItem<'_>) -> Result<(f64, usize, Grads<T>)> {
    let mut grads = Grads::zeros_like(&model.params);
    if item.segs.is_empty() {
        return Ok((0.0, 0, grads));
    }
    let mut sess = model.session(item.record, &item.segs)?;
    let steps = sess.teacher_forced(&item.targets)?;
    match masked_token_nll(&mut sess.g, &steps) {
        None => Ok((0.0, 0, grads)),
        Some((loss, n)) => {
            sess.g.backward(loss);
            sess.g.accumulate_param_grads(&mut grads);
            Ok((sess.g.scalar(loss).f64(), n, grads))
        }
    }
}

/// Mean NLL per non-PAD token over the batch, with its gradient. Items are
/// evaluated in parallel and reduced in batch order.
pub fn xe_loss<T: Scalar>(model: &Captioner<T>, batch: &[XeItem<'_>]) -> Result<(f64, Grads<T>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let parts: Vec<(f64, usize, Grads<T>)> = batch.par_iter().map(|it| item_nll(model, it)).collect::<Result<_>>()?;
    let mut grads = Grads::zeros_like(&model.params);
    let mut total = 0.0;
    let mut count = 0;
    for (l, n, g) in &parts {
        total += l;
        count += n;
        grads.add_assign(g);
    }
    if count == 0 {
        return Err(Error::Invalid("batch has no target tokens".into()));
    }
    grads.scale(T::c(1.0 / count as f64));
    Ok((total / count as f64, grads))
}

/// Mean token NLL over `items` without gradients.
pub fn xe_eval<T: Scalar>(model: &Captioner<T>, items: &[XeItem<'_>]) -> Result<f64> {
    let (l, _) = xe_loss(model, items)?;
    Ok(l)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Mean step loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub last_step: usize,
}

/// Trains with Adam and norm clipping. Batches are reshuffled every epoch
/// from a stream seeded by `cfg.seed`. Stops early once `stop_below` is
/// reached by an epoch mean, if given.
pub fn train_xe<T: Scalar>(
    model: &mut Captioner<T>,
    items: &[XeItem<'_>],
    cfg: &TrainConfig,
    epochs: usize,
    start_step: usize,
    stop_below: Option<f64>,
    log: Logger<'_>,
) -> Result<History> {
    if items.is_empty() {
        return Err(Error::Invalid("no training videos".into()));
    }
    let mut opt = Adam::new(&model.params, cfg.lr_xe);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(start_step as u64 + 1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut hist = History { last_step: start_step, ..Default::default() };
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut nb = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<XeItem<'_>> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, mut grads) = xe_loss(model, &batch)?;
            if !grads.all_finite() {
                return Err(Error::Invalid(format!("non-finite gradient at step {}", hist.last_step + 1)));
            }
            let norm = grads.clip_norm(T::c(cfg.grad_clip));
            opt.step(&mut model.params, &grads);
            hist.last_step += 1;
            hist.step_losses.push(loss);
            sum += loss;
            nb += 1;
            if cfg.log_every > 0 && hist.last_step % cfg.log_every == 0 {
                log(json!({"event": "xe_step", "step": hist.last_step, "loss": loss, "grad_norm": norm.f64()}));
            }
        }
        let mean = sum / nb as f64;
        hist.epoch_losses.push(mean);
        log(json!({"event": "xe_epoch", "epoch": epoch + 1, "step": hist.last_step, "loss": mean}));
        if stop_below.is_some_and(|t| mean < t) {
            break;
        }
    }
    Ok(hist)
}

/// Teacher-forced pointer training of the selector on `(candidates, video)`
/// pairs; returns the mean loss of each epoch and the total warning count.
pub fn train_selector<T: Scalar>(
    selector: &mut Selector<T>,
    data: &[(CandidateSet, &VideoRecord)],
    epochs: usize,
    lr: f64,
    clip: f64,
    seed: u64,
    log: Logger<'_>,
) -> Result<(Vec<f64>, usize)> {
    let usable: Vec<&(CandidateSet, &VideoRecord)> = data.iter().filter(|(c, r)| !c.is_empty() && !r.events.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Invalid("no videos with both candidates and events".into()));
    }
    let mut opt = Adam::new(&selector.params, lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut warnings = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &i in &order {
            let (c, r) = usable[i];
            let mut step = selector.train_selector_step(c, r)?;
            warnings += step.warnings;
            step.grads.clip_norm(T::c(clip));
            opt.step(&mut selector.params, &step.grads);
            sum += step.loss.f64();
        }
        let mean = sum / usable.len() as f64;
        history.push(mean);
        log(json!({"event": "selector_epoch", "epoch": epoch + 1, "loss": mean}));
    }
    Ok((history, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Graph;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::<f64>::new();
        let steps: Vec<_> = (0..3).map(|k| (g.zeros(20), 4 + k)).collect();
        let (l, n) = masked_token_nll(&mut g, &steps).unwrap();
        assert!((g.scalar(l) / n as f64 - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_give_near_zero_loss() {
        let mut g = Graph::<f64>::new();
        let mut v = vec![0.0; 20];
        v[7] = 30.0;
        let x = g.vector(v);
        let (l, _) = masked_token_nll(&mut g, &[(x, 7)]).unwrap();
        assert!(g.scalar(l) < 1e-9);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig { hidden: 24, use_tsrm: false, ..Default::default() };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("hidden = 0").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }
}

//! Corpus-level orchestration: training every stage, decoding, evaluation,
//! the ablation grid and seed ensembles.

use crate::checkpoint::Checkpoint;
use crate::corpus::{Predictions, PredictedEvent, VideoAnnotation, VideoRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::esgn::Selector;
use crate::metrics::{default_thresholds, dense_caption_eval, Metric, PredictedSpan, ScoreReport};
use crate::model::{greedy_paragraph, Captioner, Sentence};
use crate::proposals::{generate_candidates, train_scorer, CandidateSet, ProposalScorer, Segment};
use crate::scalar::Scalar;
use crate::training::{ensemble_decode, train_scst, train_selector, train_xe, xe_eval, History, Logger, ScstHistory, TrainConfig, XeItem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalSource {
    Gt,
    Learnt,
}

impl FromStr for ProposalSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(Self::Gt),
            "learnt" => Ok(Self::Learnt),
            _ => Err(Error::Config(format!("unknown proposal source {:?} (expected gt or learnt)", s))),
        }
    }
}

impl fmt::Display for ProposalSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gt => "gt",
            Self::Learnt => "learnt",
        })
    }
}

/// Seed of a named sub-stream derived from the run seed.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    crate::fnv1a(format!("{}:{}", seed, tag).as_bytes())
}

/// Vocabulary over the GT sentences of `train`.
pub fn build_vocab(train: &[VideoRecord], cfg: &TrainConfig) -> Vocabulary {
    Vocabulary::build(train.iter().flat_map(|r| r.events.iter().map(|e| e.sentence.as_slice())), cfg.min_count, cfg.max_len)
}

/// GT-proposal training items; videos without events are dropped.
pub fn xe_items<'a>(records: &'a [VideoRecord], vocab: &Vocabulary) -> Vec<XeItem<'a>> {
    records.iter().filter(|r| !r.events.is_empty()).map(|r| XeItem::from_record(r, vocab)).collect()
}

pub fn references(records: &[VideoRecord]) -> BTreeMap<String, VideoAnnotation> {
    records.iter().map(|r| (r.video_id.clone(), r.annotation())).collect()
}

fn feat_dim(records: &[VideoRecord]) -> Result<usize> {
    records.first().map(|r| r.feat_dim()).ok_or_else(|| Error::Invalid("corpus split is empty".into()))
}

pub fn candidates<T: Scalar>(scorer: &ProposalScorer<T>, records: &[VideoRecord], cfg: &TrainConfig) -> Result<Vec<CandidateSet>> {
    let w = cfg.windows();
    records.par_iter().map(|r| generate_candidates(r, scorer, &w)).collect()
}

/// Trains the window scorer, then the selector on the scorer's candidates.
pub fn train_proposal_stage<T: Scalar>(train: &[VideoRecord], cfg: &TrainConfig, log: Logger<'_>) -> Result<(ProposalScorer<T>, Selector<T>)> {
    let d = feat_dim(train)?;
    let mut scorer = ProposalScorer::new(d, cfg.scorer_hidden, sub_seed(cfg.seed, "scorer"));
    let losses = train_scorer(&mut scorer, train, &cfg.windows(), cfg.scorer_epochs, cfg.scorer_lr);
    log(json!({"event": "scorer", "epochs": losses.len(), "loss": losses.last()}));
    let cands = candidates(&scorer, train, cfg)?;
    let data: Vec<(CandidateSet, &VideoRecord)> = cands.into_iter().zip(train).collect();
    let mut selector = Selector::new(&cfg.selector(), d, sub_seed(cfg.seed, "selector"))?;
    let (_, warnings) = train_selector(&mut selector, &data, cfg.selector_epochs, cfg.selector_lr, cfg.grad_clip, sub_seed(cfg.seed, "selector-order"), log)?;
    if warnings > 0 {
        log(json!({"event": "selector_warnings", "events_without_overlap": warnings}));
    }
    Ok((scorer, selector))
}

/// Fresh captioner trained with cross-entropy on GT proposals.
pub fn train_captioner<T: Scalar>(train: &[VideoRecord], vocab: &Vocabulary, cfg: &TrainConfig, log: Logger<'_>) -> Result<(Captioner<T>, History)> {
    let mut model = Captioner::new(&cfg.captioner(), feat_dim(train)?, vocab.len(), sub_seed(cfg.seed, "captioner"))?;
    let items = xe_items(train, vocab);
    let hist = train_xe(&mut model, &items, cfg, cfg.epochs, 0, None, log)?;
    Ok((model, hist))
}

fn check_compatible<T: Scalar>(ck: &Checkpoint<T>, train: &[VideoRecord], cfg: &TrainConfig) -> Result<()> {
    if ck.config.model_hash() != cfg.model_hash() {
        return Err(Error::Checkpoint("config hash differs from the checkpoint's".into()));
    }
    ck.check_vocab(&build_vocab(train, cfg))?;
    if feat_dim(train)? != ck.feat_dim() {
        return Err(Error::Checkpoint("feature width differs from the checkpoint's".into()));
    }
    Ok(())
}

fn finish<T: Scalar>(ck: &mut Checkpoint<T>, train: &[VideoRecord], log: Logger<'_>) -> Result<()> {
    let loss = xe_eval(&ck.captioner, &xe_items(train, &ck.vocab))?;
    ck.final_loss = Some(loss);
    log(json!({"event": "final", "step": ck.step, "loss": loss}));
    Ok(())
}

/// Cross-entropy stage. Without `init` every stage is trained from scratch;
/// with it, captioner training resumes and step numbering continues.
pub fn train_xe_pipeline<T: Scalar>(train: &[VideoRecord], cfg: &TrainConfig, init: Option<Checkpoint<T>>, log: Logger<'_>) -> Result<(Checkpoint<T>, History)> {
    let mut ck = match init {
        Some(mut ck) => {
            check_compatible(&ck, train, cfg)?;
            ck.config = cfg.clone();
            ck
        }
        None => {
            let vocab = build_vocab(train, cfg);
            let (scorer, selector) = train_proposal_stage(train, cfg, log)?;
            let captioner = Captioner::new(&cfg.captioner(), feat_dim(train)?, vocab.len(), sub_seed(cfg.seed, "captioner"))?;
            Checkpoint { config: cfg.clone(), vocab, step: 0, final_loss: None, captioner, scorer: Some(scorer), selector: Some(selector) }
        }
    };
    let items = xe_items(train, &ck.vocab);
    let hist = train_xe(&mut ck.captioner, &items, cfg, cfg.epochs, ck.step, None, log)?;
    ck.step = hist.last_step;
    finish(&mut ck, train, log)?;
    Ok((ck, hist))
}

/// Self-critical stage on top of an xe checkpoint, over learnt candidates.
pub fn train_scst_pipeline<T: Scalar>(mut ck: Checkpoint<T>, train: &[VideoRecord], cfg: &TrainConfig, log: Logger<'_>) -> Result<(Checkpoint<T>, ScstHistory)> {
    check_compatible(&ck, train, cfg)?;
    let (scorer, selector) = match (&ck.scorer, &ck.selector) {
        (Some(a), Some(b)) => (a, b.clone()),
        _ => return Err(Error::Checkpoint("self-critical training needs the proposal scorer and selector".into())),
    };
    let cands = candidates(scorer, train, cfg)?;
    let data: Vec<(CandidateSet, &VideoRecord)> = cands.into_iter().zip(train).collect();
    let vocab = ck.vocab.clone();
    let hist = train_scst(&mut ck.captioner, &selector, &vocab, &data, cfg, cfg.scst_epochs, ck.step, log)?;
    ck.step = hist.last_step;
    ck.config = cfg.clone();
    finish(&mut ck, train, log)?;
    Ok((ck, hist))
}

fn spans(vocab: &Vocabulary, segs: &[Segment], sents: &[Sentence]) -> Result<Vec<PredictedSpan>> {
    segs.iter().zip(sents).map(|(s, t)| Ok((*s, vocab.decode(&t.tokens)?))).collect()
}

fn gt_spans(record: &VideoRecord) -> Vec<Segment> {
    record.events_by_start().iter().map(|e| e.segment()).collect()
}

/// Event spans for one video from the chosen proposal source.
pub fn event_spans<T: Scalar>(ck: &Checkpoint<T>, record: &VideoRecord, source: ProposalSource) -> Result<Vec<Segment>> {
    match source {
        ProposalSource::Gt => Ok(gt_spans(record)),
        ProposalSource::Learnt => {
            let (scorer, selector) = match (&ck.scorer, &ck.selector) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Checkpoint("learnt proposals need the proposal scorer and selector".into())),
            };
            let cands = generate_candidates(record, scorer, &ck.config.windows())?;
            Ok(selector.select_greedy(&cands, record)?.sorted_segments())
        }
    }
}

pub fn predict<T: Scalar>(ck: &Checkpoint<T>, records: &[VideoRecord], source: ProposalSource) -> Result<BTreeMap<String, Vec<PredictedSpan>>> {
    records
        .par_iter()
        .map(|r| {
            let segs = event_spans(ck, r, source)?;
            let sents = greedy_paragraph(&ck.captioner, r, &segs)?;
            Ok((r.video_id.clone(), spans(&ck.vocab, &segs, &sents)?))
        })
        .collect()
}

/// Greedy captions of the GT spans.
pub fn predict_gt<T: Scalar>(model: &Captioner<T>, vocab: &Vocabulary, records: &[VideoRecord]) -> Result<BTreeMap<String, Vec<PredictedSpan>>> {
    records
        .par_iter()
        .map(|r| {
            let segs = gt_spans(r);
            let sents = greedy_paragraph(model, r, &segs)?;
            Ok((r.video_id.clone(), spans(vocab, &segs, &sents)?))
        })
        .collect()
}

/// Captions of the GT spans decoded by a seed ensemble.
pub fn predict_ensemble<T: Scalar>(members: &[&Captioner<T>], vocab: &Vocabulary, records: &[VideoRecord]) -> Result<BTreeMap<String, Vec<PredictedSpan>>> {
    records
        .par_iter()
        .map(|r| {
            let segs = gt_spans(r);
            let sents = ensemble_decode(members, r, &segs)?;
            Ok((r.video_id.clone(), spans(vocab, &segs, &sents)?))
        })
        .collect()
}

pub fn to_predictions(spans: &BTreeMap<String, Vec<PredictedSpan>>) -> Predictions {
    let mut p = Predictions::default();
    for (vid, evs) in spans {
        let list = evs
            .iter()
            .map(|(s, w)| PredictedEvent { sentence: w.join(" "), timestamp: [s.start, s.end] })
            .collect();
        p.results.insert(vid.clone(), list);
    }
    p
}

/// Dense evaluation at the default thresholds.
pub fn score(spans: &BTreeMap<String, Vec<PredictedSpan>>, records: &[VideoRecord], metrics: &[Metric]) -> Result<ScoreReport> {
    dense_caption_eval(spans, &references(records), &default_thresholds(), metrics)
}

pub fn evaluate<T: Scalar>(
    ck: &Checkpoint<T>,
    records: &[VideoRecord],
    source: ProposalSource,
    metrics: &[Metric],
) -> Result<(BTreeMap<String, Vec<PredictedSpan>>, ScoreReport)> {
    if records.is_empty() {
        return Err(Error::Invalid("no videos to evaluate".into()));
    }
    let spans = predict(ck, records, source)?;
    let report = score(&spans, records, metrics)?;
    Ok((spans, report))
}

/// `(label, tsrm, cmg, sent_rnn)` of each ablation row.
pub const ABLATION_ROWS: [(&str, bool, bool, bool); 5] = [
    ("baseline", false, false, false),
    ("tsrm", true, false, false),
    ("sent_rnn", false, false, true),
    ("cmg+sent_rnn", false, true, true),
    ("full", true, true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub use_tsrm: bool,
    pub use_cmg: bool,
    pub use_sent_rnn: bool,
    pub train_loss: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// BLEU@4 and METEOR ×100, CIDEr as is.
    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        let mut s = String::new();
        let _ = writeln!(s, "{:<13} {:>4} {:>4} {:>4} {:>8} {:>8} {:>8}", "row", "tsrm", "cmg", "sent", "BLEU@4", "METEOR", "CIDEr");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<13} {:>4} {:>4} {:>4} {:>8.2} {:>8.2} {:>8.2}",
                r.label,
                mark(r.use_tsrm),
                mark(r.use_cmg),
                mark(r.use_sent_rnn),
                r.bleu4 * 100.0,
                r.meteor * 100.0,
                r.cider
            );
        }
        s
    }
}

/// Trains each ablation row with the shared seed on `train` and scores GT
/// proposal captions on `val`.
pub fn ablate<T: Scalar>(train: &[VideoRecord], val: &[VideoRecord], base: &TrainConfig, log: Logger<'_>) -> Result<AblationTable> {
    if val.is_empty() {
        return Err(Error::Invalid("ablation needs validation videos".into()));
    }
    let vocab = build_vocab(train, base);
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, tsrm, cmg, sent) in ABLATION_ROWS {
        let cfg = TrainConfig { use_tsrm: tsrm, use_cmg: cmg, use_sent_rnn: sent, ..base.clone() };
        log(json!({"event": "ablation_row", "row": label}));
        let (model, hist) = train_captioner::<T>(train, &vocab, &cfg, log)?;
        let report = score(&predict_gt(&model, &vocab, val)?, val, &Metric::ALL)?;
        let get = |m| report.score(m).unwrap_or(0.0);
        let row = AblationRow {
            label: label.to_string(),
            use_tsrm: tsrm,
            use_cmg: cmg,
            use_sent_rnn: sent,
            train_loss: hist.epoch_losses.last().copied().unwrap_or(f64::NAN),
            bleu4: get(Metric::Bleu4),
            meteor: get(Metric::Meteor),
            cider: get(Metric::Cider),
        };
        log(json!({"event": "ablation_result", "row": label, "bleu4": row.bleu4, "meteor": row.meteor, "cider": row.cider}));
        rows.push(row);
    }
    Ok(AblationTable { rows })
}

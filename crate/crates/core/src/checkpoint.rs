//! Checkpoint directories: `manifest.json`, `vocab.json` and one DVCF matrix
//! file per parameter tensor under `tensors/`.
//!
//! Tensors are stored as `f32`; an `f64` model round-trips through that
//! precision.

use crate::corpus::{FeatureMatrix, Vocabulary};
use crate::error::{Error, Result};
use crate::esgn::Selector;
use crate::model::Captioner;
use crate::params::{ParamStore, Tensor};
use crate::proposals::ProposalScorer;
use crate::scalar::Scalar;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const FORMAT: &str = "densecap-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
const TENSOR_DIR: &str = "tensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: TrainConfig,
    /// [`TrainConfig::model_hash`] as 16 hex digits.
    pub config_hash: String,
    /// [`Vocabulary::fingerprint`] as 16 hex digits.
    pub vocab_fingerprint: String,
    pub feat_dim: usize,
    pub step: usize,
    pub final_loss: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

pub fn hex(h: u64) -> String {
    format!("{:016x}", h)
}

/// Everything a trained pipeline needs at inference time.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub step: usize,
    pub final_loss: Option<f64>,
    pub captioner: Captioner<T>,
    pub scorer: Option<ProposalScorer<T>>,
    pub selector: Option<Selector<T>>,
}

fn groups<T: Scalar>(ck: &Checkpoint<T>) -> Vec<(&'static str, &ParamStore<T>)> {
    let mut out = vec![("captioner", &ck.captioner.params)];
    if let Some(s) = &ck.scorer {
        out.push(("scorer", &s.params));
    }
    if let Some(s) = &ck.selector {
        out.push(("selector", &s.params));
    }
    out
}

impl<T: Scalar> Checkpoint<T> {
    pub fn feat_dim(&self) -> usize {
        self.captioner.feat_dim
    }

    pub fn manifest(&self) -> Manifest {
        let tensors = groups(self)
            .into_iter()
            .flat_map(|(group, store)| {
                store.iter().map(move |(_, name, t)| TensorEntry {
                    group: group.to_string(),
                    name: name.to_string(),
                    rows: t.rows,
                    cols: t.cols,
                    file: format!("{}/{}.{}.dvcf", TENSOR_DIR, group, name),
                })
            })
            .collect();
        Manifest {
            format: FORMAT.into(),
            config: self.config.clone(),
            config_hash: hex(self.config.model_hash()),
            vocab_fingerprint: hex(self.vocab.fingerprint()),
            feat_dim: self.feat_dim(),
            step: self.step,
            final_loss: self.final_loss,
            tensors,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join(TENSOR_DIR);
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let manifest = self.manifest();
        let mut entries = manifest.tensors.iter();
        for (_, store) in groups(self) {
            for (_, _, t) in store.iter() {
                let entry = entries.next().expect("manifest lists every tensor");
                let m = FeatureMatrix { rows: t.rows, cols: t.cols, data: t.data.iter().map(|x| x.f64() as f32).collect() };
                let p = dir.join(&entry.file);
                fs::write(&p, m.to_bytes()).map_err(|e| Error::io(&p, e))?;
            }
        }
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        let config = manifest.config.clone();
        config.validate()?;
        if hex(config.model_hash()) != manifest.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored configuration".into()));
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if hex(vocab.fingerprint()) != manifest.vocab_fingerprint {
            return Err(Error::Checkpoint("vocabulary fingerprint mismatch".into()));
        }
        let mut stores: [ParamStore<T>; 3] = Default::default();
        for e in &manifest.tensors {
            let slot = match e.group.as_str() {
                "captioner" => 0,
                "scorer" => 1,
                "selector" => 2,
                g => return Err(Error::Checkpoint(format!("unknown tensor group {:?}", g))),
            };
            let p = dir.join(&e.file);
            let m = crate::corpus::read_features(&p)?;
            if (m.rows, m.cols) != (e.rows, e.cols) {
                return Err(Error::Checkpoint(format!("{}: shape {}x{} differs from manifest {}x{}", e.name, m.rows, m.cols, e.rows, e.cols)));
            }
            let data = m.data.iter().map(|x| T::c(*x as f64)).collect();
            stores[slot].insert(&e.name, Tensor { rows: m.rows, cols: m.cols, data });
        }
        let [cap, sco, sel] = stores;
        let d = manifest.feat_dim;
        let captioner = Captioner::new(&config.captioner(), d, vocab.len(), 0)?.with_params(cap)?;
        let scorer = if sco.is_empty() { None } else { Some(ProposalScorer::from_params(d, config.scorer_hidden, sco)?) };
        let selector = if sel.is_empty() { None } else { Some(Selector::new(&config.selector(), d, 0)?.with_params(sel)?) };
        Ok(Self { config, vocab, step: manifest.step, final_loss: manifest.final_loss, captioner, scorer, selector })
    }

    /// Fails unless `vocab` is the vocabulary this checkpoint was trained with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.fingerprint() != self.vocab.fingerprint() {
            return Err(Error::Checkpoint("vocabulary of the corpus differs from the checkpoint's".into()));
        }
        Ok(())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint<f32> {
        let config = TrainConfig { hidden: 8, d_pos: 4, selector_hidden: 6, scorer_hidden: 5, ..Default::default() };
        let words = vec!["a".to_string(), "b".to_string()];
        let vocab = Vocabulary::build([words.as_slice()], 1, 30);
        Checkpoint {
            captioner: Captioner::new(&config.captioner(), 6, vocab.len(), 3).unwrap(),
            scorer: Some(ProposalScorer::new(6, 5, 4)),
            selector: Some(Selector::new(&config.selector(), 6, 5).unwrap()),
            config,
            vocab,
            step: 17,
            final_loss: Some(1.25),
        }
    }

    #[test]
    fn save_load_round_trip_is_exact_in_f32() {
        let dir = tempfile::tempdir().unwrap();
        let ck = tiny();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::<f32>::load(dir.path()).unwrap();
        assert_eq!(back.captioner.params.iter().count(), ck.captioner.params.len());
        for ((_, na, a), (_, nb, b)) in ck.captioner.params.iter().zip(back.captioner.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        assert!(back.selector.unwrap().params.same_layout(&ck.selector.unwrap().params));
        assert_eq!(back.step, 17);
        assert_eq!(back.final_loss, Some(1.25));
    }

    #[test]
    fn tampered_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.config.hidden = 10;
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let err = Checkpoint::<f32>::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("hash"), "{}", err);
    }
}

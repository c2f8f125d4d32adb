//! CIDEr in its base form (no "-D" length penalty or count clipping).

use super::bleu::ngram_counts;
use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScore<K> {
    pub corpus: f64,
    pub per_item: BTreeMap<K, f64>,
}

// Ordered maps keep the floating-point sums independent of hash seeds.
fn weighted<'a, W: Eq + Hash + Ord>(counts: &HashMap<&'a [W], usize>, idf: &HashMap<&'a [W], f64>, n_docs: f64) -> BTreeMap<&'a [W], f64> {
    counts
        .iter()
        .map(|(g, c)| (*g, *c as f64 * idf.get(g).copied().unwrap_or(n_docs.ln())))
        .collect()
}

fn as_f64<'a, W: Eq + Hash + Ord>(m: &HashMap<&'a [W], usize>) -> BTreeMap<&'a [W], f64> {
    m.iter().map(|(g, c)| (*g, *c as f64)).collect()
}

fn cosine<W: Ord>(a: &BTreeMap<&[W], f64>, b: &BTreeMap<&[W], f64>) -> Option<f64> {
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    Some(dot / (na * nb))
}

/// Corpus CIDEr. `idf = ln(N / df)` with `df` the number of items whose
/// references contain the n-gram (clamped to at least 1). When both weighted
/// vectors vanish (every n-gram occurs in every item) the cosine falls back
/// to the raw count vectors; when only one vanishes the similarity is 0.
pub fn cider<K, W>(candidates: &BTreeMap<K, Vec<W>>, references: &BTreeMap<K, Vec<Vec<W>>>) -> Result<CiderScore<K>>
where
    K: Ord + Clone,
    W: Eq + Hash + Ord + Clone,
{
    if candidates.is_empty() {
        return Err(Error::Invalid("cider needs at least one item".into()));
    }
    if candidates.len() != references.len() || candidates.keys().any(|k| !references.contains_key(k)) {
        return Err(Error::Invalid("cider candidate and reference keys differ".into()));
    }
    let n_docs = candidates.len() as f64;
    let mut per_item: BTreeMap<K, f64> = candidates.keys().map(|k| (k.clone(), 0.0)).collect();
    for n in 1..=4 {
        let mut df: HashMap<&[W], usize> = HashMap::new();
        for refs in references.values() {
            let seen: HashSet<&[W]> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf: HashMap<&[W], f64> = df.iter().map(|(g, d)| (*g, (n_docs / (*d).max(1) as f64).ln())).collect();
        for (k, cand) in candidates {
            let refs = &references[k];
            if refs.is_empty() {
                continue;
            }
            let cc = ngram_counts(cand, n);
            let cw = weighted(&cc, &idf, n_docs);
            let mut total = 0.0;
            for r in refs {
                let rc = ngram_counts(r, n);
                let rw = weighted(&rc, &idf, n_docs);
                let cw_zero = cw.values().all(|x| *x == 0.0);
                let rw_zero = rw.values().all(|x| *x == 0.0);
                let sim = if cw_zero && rw_zero {
                    cosine(&as_f64(&cc), &as_f64(&rc)).unwrap_or(0.0)
                } else {
                    cosine(&cw, &rw).unwrap_or(0.0)
                };
                total += sim;
            }
            *per_item.get_mut(k).unwrap() += 10.0 * total / refs.len() as f64 / 4.0;
        }
    }
    let corpus = per_item.values().sum::<f64>() / n_docs;
    Ok(CiderScore { corpus, per_item })
}

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::hash::Hash;

pub(crate) fn ngram_counts<W: Eq + Hash + Clone>(tokens: &[W], n: usize) -> HashMap<&[W], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU@4 without smoothing: geometric mean of clipped n-gram
/// precisions (n = 1..4) times the brevity penalty against the closest
/// reference length.
pub fn bleu4<W, R>(candidate: &[W], references: &[R]) -> Result<f64>
where
    W: Eq + Hash + Clone,
    R: AsRef<[W]>,
{
    if references.is_empty() {
        return Err(Error::Invalid("bleu4 needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Err(Error::Invalid("bleu4 candidate is empty".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let total: usize = cand.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r.as_ref(), n)).collect();
        let clipped: usize = cand
            .iter()
            .map(|(g, c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                (*c).min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / 4.0).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_is_one() {
        assert_eq!(bleu4(&t("a b c d e"), &[t("a b c d e")]).unwrap(), 1.0);
    }

    #[test]
    fn brevity_penalty_example() {
        let v = bleu4(&t("a b c d"), &[t("a b c d e")]).unwrap();
        assert!((v - (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-12);
        assert!((v - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn disjoint_and_short() {
        assert_eq!(bleu4(&t("w x y z"), &[t("a b c d")]).unwrap(), 0.0);
        assert_eq!(bleu4(&t("a b c"), &[t("a b c")]).unwrap(), 0.0);
        assert!(bleu4::<&str, Vec<&str>>(&t("a"), &[]).is_err());
    }

    #[test]
    fn candidate_among_references_scores_one() {
        let c = t("the cat sat on a mat");
        assert_eq!(bleu4(&c, &[t("dogs run"), c.clone(), t("the cat was there")]).unwrap(), 1.0);
    }
}

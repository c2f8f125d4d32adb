//! METEOR restricted to exact unigram matches.
//!
//! The alignment maximizes the number of matched unigrams and, among maximal
//! alignments, minimizes the number of chunks (runs that are contiguous and in
//! the same order in both sentences). The search is exact: a memoized DFS
//! over candidate positions keyed by (position, used reference positions,
//! previous match).

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::hash::Hash;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Score from match and chunk counts.
pub fn meteor_from_alignment(a: Alignment, cand_len: usize, ref_len: usize) -> f64 {
    if a.matches == 0 {
        return 0.0;
    }
    let m = a.matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (a.chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

struct Search<'a> {
    /// For each candidate position, reference positions holding the same token.
    options: Vec<Vec<usize>>,
    /// Token class of each candidate position.
    class: Vec<usize>,
    /// Matches still required per class once the class's candidates are exhausted.
    need: Vec<usize>,
    /// Remaining candidate occurrences of each class from position i onward.
    remaining: Vec<Vec<usize>>,
    class_of_ref: &'a [Option<usize>],
    memo: HashMap<(usize, Vec<u64>, usize), usize>,
}

impl Search<'_> {
    fn used_in_class(&self, used: &[u64], class: usize) -> usize {
        self.class_of_ref
            .iter()
            .enumerate()
            .filter(|(j, c)| **c == Some(class) && used[j / 64] >> (j % 64) & 1 == 1)
            .count()
    }

    /// Maximum number of adjacent continuations from position `i`, or `None`
    /// if the required match count can no longer be met.
    fn best(&mut self, i: usize, used: &mut Vec<u64>, prev: usize) -> Option<usize> {
        if i == self.class.len() {
            return Some(0);
        }
        let key = (i, used.clone(), prev);
        if let Some(&v) = self.memo.get(&key) {
            return if v == usize::MAX { None } else { Some(v) };
        }
        let class = self.class[i];
        let mut best: Option<usize> = None;
        if class != usize::MAX {
            let done = self.used_in_class(used, class);
            let still = self.need[class] - done;
            if still > 0 {
                for &j in &self.options[i].clone() {
                    if used[j / 64] >> (j % 64) & 1 == 1 {
                        continue;
                    }
                    used[j / 64] |= 1 << (j % 64);
                    let cont = usize::from(prev != usize::MAX && prev + 1 == j);
                    if let Some(rest) = self.best(i + 1, used, j) {
                        best = Some(best.map_or(cont + rest, |b: usize| b.max(cont + rest)));
                    }
                    used[j / 64] &= !(1 << (j % 64));
                }
            }
            // skipping is allowed only if later occurrences can still cover `still`
            if self.remaining[i + 1][class] >= still {
                if let Some(rest) = self.best(i + 1, used, usize::MAX) {
                    best = Some(best.map_or(rest, |b| b.max(rest)));
                }
            }
        } else if let Some(rest) = self.best(i + 1, used, usize::MAX) {
            best = Some(rest);
        }
        self.memo.insert(key, best.unwrap_or(usize::MAX));
        best
    }
}

/// Exact maximum-match, minimum-chunk alignment.
pub fn align<W: Eq + Hash + Clone>(candidate: &[W], reference: &[W]) -> Alignment {
    let mut classes: HashMap<&W, usize> = HashMap::new();
    for w in candidate {
        let n = classes.len();
        classes.entry(w).or_insert(n);
    }
    let nc = classes.len();
    let class: Vec<usize> = candidate
        .iter()
        .map(|w| {
            let c = classes[w];
            if reference.contains(w) {
                c
            } else {
                usize::MAX
            }
        })
        .collect();
    let class_of_ref: Vec<Option<usize>> = reference.iter().map(|w| classes.get(w).copied()).collect();
    let mut need = vec![0usize; nc];
    let mut cand_count = vec![0usize; nc];
    let mut ref_count = vec![0usize; nc];
    for &c in class.iter().filter(|c| **c != usize::MAX) {
        cand_count[c] += 1;
    }
    for c in class_of_ref.iter().flatten() {
        ref_count[*c] += 1;
    }
    for c in 0..nc {
        need[c] = cand_count[c].min(ref_count[c]);
    }
    let matches: usize = need.iter().sum();
    if matches == 0 {
        return Alignment { matches: 0, chunks: 0 };
    }
    let mut remaining = vec![vec![0usize; nc]; candidate.len() + 1];
    for i in (0..candidate.len()).rev() {
        remaining[i] = remaining[i + 1].clone();
        if class[i] != usize::MAX {
            remaining[i][class[i]] += 1;
        }
    }
    let options = candidate
        .iter()
        .map(|w| reference.iter().enumerate().filter(|(_, r)| *r == w).map(|(j, _)| j).collect())
        .collect();
    let mut s = Search { options, class, need, remaining, class_of_ref: &class_of_ref, memo: HashMap::new() };
    let mut used = vec![0u64; reference.len().div_ceil(64).max(1)];
    let cont = s.best(0, &mut used, usize::MAX).expect("a maximal alignment always exists");
    Alignment { matches, chunks: matches - cont }
}

/// METEOR-lite of one candidate against the best of several references.
pub fn meteor_lite<W, R>(candidate: &[W], references: &[R]) -> Result<f64>
where
    W: Eq + Hash + Clone,
    R: AsRef<[W]>,
{
    if references.is_empty() {
        return Err(Error::Invalid("meteor_lite needs at least one reference".into()));
    }
    if candidate.is_empty() {
        return Err(Error::Invalid("meteor_lite candidate is empty".into()));
    }
    Ok(references
        .iter()
        .map(|r| {
            let r = r.as_ref();
            if r.is_empty() {
                0.0
            } else {
                meteor_from_alignment(align(candidate, r), candidate.len(), r.len())
            }
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_computed_examples() {
        assert_eq!(meteor_lite(&t("a b c d"), &[t("a b c d")]).unwrap(), 0.9921875);
        assert_eq!(meteor_lite(&t("a"), &[t("a")]).unwrap(), 0.5);
        assert_eq!(meteor_lite(&t("a b"), &[t("c d")]).unwrap(), 0.0);
    }

    #[test]
    fn chunk_minimization_prefers_contiguous_alignment() {
        // "the" twice: aligning the second "the cat" contiguously gives 2 chunks
        let a = align(&t("the cat the dog"), &t("the dog the cat"));
        assert_eq!(a, Alignment { matches: 4, chunks: 2 });
        let b = align(&t("a a a a a a a a a a a a"), &t("a a a a a a a a a a a a"));
        assert_eq!(b, Alignment { matches: 12, chunks: 1 });
    }

    #[test]
    fn long_repetitive_inputs_terminate() {
        let c: Vec<&str> = std::iter::repeat("a").take(30).collect();
        let r = t("a man rides a horse a b a");
        let a = align(&c, &r);
        assert_eq!(a.matches, 4);
        assert_eq!(a.chunks, 4);
    }

    #[test]
    fn max_over_references() {
        let s = meteor_lite(&t("x y z"), &[t("q"), t("x y z")]).unwrap();
        assert_eq!(s, meteor_lite(&t("x y z"), &[t("x y z")]).unwrap());
    }
}

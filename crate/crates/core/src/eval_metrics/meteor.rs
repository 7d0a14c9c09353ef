use std::collections::HashMap;

use crate::error::MetricError;
use crate::text::tokens;

pub const ALPHA: f64 = 0.9;
pub const BETA: f64 = 3.0;
pub const GAMMA: f64 = 0.5;

/// Reference positions that some hypothesis token could match, renumbered
/// densely so a `u128` can record which are used.
const MAX_CANDIDATES: usize = 128;

struct Search<'a> {
    hyp: &'a [usize],
    /// Dense candidate ids per word, in reference order.
    slots: Vec<Vec<(usize, usize)>>,
    target: Vec<usize>,
    /// Later occurrences of `hyp[i]` in `hyp[i + 1..]`.
    suffix_after: Vec<usize>,
    memo: HashMap<(usize, usize, u128), usize>,
}

impl Search<'_> {
    fn used(&self, mask: u128, w: usize) -> usize {
        self.slots[w].iter().filter(|(c, _)| mask >> c & 1 == 1).count()
    }

    /// Minimum chunks for `hyp[i..]` given the previous matched reference
    /// position (`usize::MAX` if hyp `i-1` is unmatched).
    fn best(&mut self, i: usize, prev: usize, mask: u128) -> usize {
        if i == self.hyp.len() {
            return 0;
        }
        if let Some(&v) = self.memo.get(&(i, prev, mask)) {
            return v;
        }
        let mut best = usize::MAX;
        for opt in self.options(i, mask) {
            let v = match opt {
                Some((c, j)) => {
                    let cost = usize::from(prev == usize::MAX || j != prev + 1);
                    self.best(i + 1, j, mask | 1 << c).saturating_add(cost)
                }
                None => self.best(i + 1, usize::MAX, mask),
            };
            best = best.min(v);
        }
        self.memo.insert((i, prev, mask), best);
        best
    }

    /// Matches by ascending reference position, then skipping.
    fn options(&self, i: usize, mask: u128) -> Vec<Option<(usize, usize)>> {
        let w = self.hyp[i];
        if w == usize::MAX {
            return vec![None];
        }
        let used = self.used(mask, w);
        let mut out = Vec::new();
        if used < self.target[w] {
            for &(c, j) in &self.slots[w] {
                if mask >> c & 1 == 0 {
                    out.push(Some((c, j)));
                }
            }
        }
        if used + self.suffix_after[i] >= self.target[w] {
            out.push(None);
        }
        out
    }
}

/// Exact unigram alignment with the most matches and, among those, the
/// fewest chunks. Ties go to the alignment that picks the leftmost
/// reference position earliest. Returns `(hyp_index, ref_index)` pairs.
///
/// When more than 128 reference positions are matchable the search is
/// replaced by a greedy left-to-right alignment that prefers chunk
/// continuation.
pub fn meteor_alignment(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut vocab: HashMap<&str, usize> = HashMap::new();
    for t in hyp {
        let n = vocab.len();
        vocab.entry(t.as_str()).or_insert(n);
    }
    let nw = vocab.len();
    let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nw];
    let mut n_cand = 0;
    for (j, t) in reference.iter().enumerate() {
        if let Some(&w) = vocab.get(t.as_str()) {
            slots[w].push((n_cand, j));
            n_cand += 1;
        }
    }
    let hyp_ids: Vec<usize> = hyp
        .iter()
        .map(|t| {
            let w = vocab[t.as_str()];
            if slots[w].is_empty() {
                usize::MAX
            } else {
                w
            }
        })
        .collect();
    let mut hyp_count = vec![0usize; nw];
    for &w in &hyp_ids {
        if w != usize::MAX {
            hyp_count[w] += 1;
        }
    }
    let target: Vec<usize> = (0..nw).map(|w| hyp_count[w].min(slots[w].len())).collect();
    let mut suffix_after = vec![0usize; hyp.len()];
    let mut seen = vec![0usize; nw];
    for i in (0..hyp.len()).rev() {
        let w = hyp_ids[i];
        if w != usize::MAX {
            suffix_after[i] = seen[w];
            seen[w] += 1;
        }
    }
    if n_cand > MAX_CANDIDATES {
        return greedy_alignment(&hyp_ids, &slots, &target);
    }
    let mut s = Search {
        hyp: &hyp_ids,
        slots,
        target,
        suffix_after,
        memo: HashMap::new(),
    };
    let total = s.best(0, usize::MAX, 0);
    let mut out = Vec::new();
    let (mut prev, mut mask, mut remaining) = (usize::MAX, 0u128, total);
    for i in 0..hyp.len() {
        for opt in s.options(i, mask) {
            let (np, nm, cost) = match opt {
                Some((c, j)) => (j, mask | 1 << c, usize::from(prev == usize::MAX || j != prev + 1)),
                None => (usize::MAX, mask, 0),
            };
            if s.best(i + 1, np, nm).saturating_add(cost) == remaining {
                if let Some((_, j)) = opt {
                    out.push((i, j));
                }
                prev = np;
                mask = nm;
                remaining -= cost;
                break;
            }
        }
    }
    out
}

fn greedy_alignment(hyp: &[usize], slots: &[Vec<(usize, usize)>], target: &[usize]) -> Vec<(usize, usize)> {
    let mut used_ref = std::collections::HashSet::new();
    let mut used = vec![0usize; slots.len()];
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for (i, &w) in hyp.iter().enumerate() {
        if w == usize::MAX || used[w] >= target[w] {
            prev = usize::MAX;
            continue;
        }
        let free: Vec<usize> = slots[w].iter().map(|&(_, j)| j).filter(|j| !used_ref.contains(j)).collect();
        let j = free
            .iter()
            .copied()
            .find(|&j| prev != usize::MAX && j == prev + 1)
            .unwrap_or(free[0]);
        used_ref.insert(j);
        used[w] += 1;
        out.push((i, j));
        prev = j;
    }
    out
}

/// Number of maximal runs in an alignment sorted by hypothesis index.
pub(crate) fn chunks(alignment: &[(usize, usize)]) -> usize {
    let mut n = 0;
    for (k, &(i, j)) in alignment.iter().enumerate() {
        if k == 0 || alignment[k - 1].0 + 1 != i || alignment[k - 1].1 + 1 != j {
            n += 1;
        }
    }
    n
}

pub(crate) fn score_from(matches: usize, chunks: usize, hyp_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let (p, r) = (m / hyp_len as f64, m / ref_len as f64);
    let f_mean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let penalty = GAMMA * (chunks as f64 / m).powf(BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor(hyp: &str, reference: &str) -> f64 {
    let (h, r) = (tokens(hyp), tokens(reference));
    let a = meteor_alignment(&h, &r);
    score_from(a.len(), chunks(&a), h.len(), r.len())
}

/// Mean sentence-level METEOR.
pub fn meteor_corpus(hypotheses: &[String], references: &[String]) -> Result<f64, MetricError> {
    if hypotheses.len() != references.len() {
        return Err(MetricError::LengthMismatch(hypotheses.len(), references.len()));
    }
    if hypotheses.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let sum: f64 = hypotheses.iter().zip(references).map(|(h, r)| meteor(h, r)).sum();
    Ok(sum / hypotheses.len() as f64)
}

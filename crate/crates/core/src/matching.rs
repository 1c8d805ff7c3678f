//! Resolving label switching between an estimated and a reference regime
//! labelling.

use crate::error::{Error, Result};
use crate::model::RegimeSequence;

pub const MAX_MATCH_REGIMES: usize = 8;

/// Advances `perm` to the next permutation in lexicographic order. Returns
/// false after the last one.
pub(crate) fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// Visits all permutations of `0..m` in lexicographic order.
pub(crate) fn for_each_permutation(m: usize, mut f: impl FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..m).collect();
    loop {
        f(&perm);
        if !next_permutation(&mut perm) {
            break;
        }
    }
}

/// Finds the relabelling `sigma` of estimated regimes that maximizes the
/// number of times `sigma(s_hat[t]) == s_true[t]`, returning it together
/// with the classification rate. Ties go to the lexicographically smallest
/// permutation.
pub fn match_regimes_by_classification(
    s_hat: &RegimeSequence,
    s_true: &RegimeSequence,
    m: usize,
) -> Result<(Vec<usize>, f64)> {
    if m > MAX_MATCH_REGIMES {
        return Err(Error::TooManyRegimes(m));
    }
    if s_hat.len() != s_true.len() {
        return Err(Error::InvalidInput(format!(
            "regime sequences differ in length ({} vs {})",
            s_hat.len(),
            s_true.len()
        )));
    }
    if s_hat.labels.iter().chain(&s_true.labels).any(|l| *l >= m) {
        return Err(Error::InvalidInput(format!("regime label outside 1..{m}")));
    }
    // confusion[i][k] = #{t : s_hat = i, s_true = k}
    let mut confusion = vec![vec![0usize; m]; m];
    for (a, b) in s_hat.labels.iter().zip(&s_true.labels) {
        confusion[*a][*b] += 1;
    }
    let mut best: Option<(Vec<usize>, usize)> = None;
    for_each_permutation(m, |perm| {
        let hits: usize = (0..m).map(|i| confusion[i][perm[i]]).sum();
        if best.as_ref().is_none_or(|(_, h)| hits > *h) {
            best = Some((perm.to_vec(), hits));
        }
    });
    let (perm, hits) = best.expect("at least one permutation");
    let t = s_hat.len().max(1) as f64;
    Ok((perm, hits as f64 / t))
}

/// Applies a relabelling to a regime sequence.
pub fn relabel(s: &RegimeSequence, sigma: &[usize]) -> RegimeSequence {
    RegimeSequence {
        labels: s.labels.iter().map(|l| sigma[*l]).collect(),
    }
}

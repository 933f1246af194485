//! Independent oracles for the acceptance suite. These deliberately avoid the
//! library's algorithms: the LCS is found by enumerating subsequences, and the
//! overlap count comes from sorted two-pointer intersection.

use std::cmp::Ordering;

fn is_subsequence(needle: &[u8], haystack: &[u8]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|c| it.any(|h| h == c))
}

/// Longest common subsequence length by exhaustive enumeration of all
/// subsequences of `a`. Only viable for short sequences.
pub fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    assert!(a.len() <= 16, "exhaustive LCS is exponential in the first sequence");
    let mut best = 0usize;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = a
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, &c)| c)
            .collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

/// ROUGE-L F-measure (equal weighting) computed from the brute-force LCS.
pub fn rouge_l_oracle(cand: &[u8], refr: &[u8]) -> f64 {
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let lcs = lcs_brute(cand, refr) as f64;
    let p = lcs / cand.len() as f64;
    let r = lcs / refr.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unigram F1 against one reference, with the multiset overlap counted by
/// sorting both sides and walking them with two pointers.
pub fn f1_oracle(cand: &[String], refr: &[String]) -> f64 {
    if cand.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let mut c = cand.to_vec();
    let mut r = refr.to_vec();
    c.sort();
    r.sort();
    let (mut i, mut j, mut overlap) = (0usize, 0usize, 0usize);
    while i < c.len() && j < r.len() {
        match c[i].cmp(&r[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                overlap += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand.len() as f64;
    let rec = overlap as f64 / refr.len() as f64;
    2.0 * p * rec / (p + rec)
}

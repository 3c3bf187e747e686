//! PIN candidate ranking from per-keypress digit distributions.
//!
//! Two attempt-generation strategies are provided:
//!
//! * [`rank_pins`]: exact k-best PINs by joint probability (product of the
//!   per-position probabilities), found by best-first expansion without
//!   enumerating all `10^N` candidates.
//! * [`swap_heuristic_guesses`]: per-position argmax first, then flip the
//!   position whose top-two gap is smallest, then the next smallest, ...
//!
//! Ties are deterministic: equal joint probabilities rank the
//! lexicographically smaller PIN first, and equal gaps swap the lowest
//! position first.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::DigitDistribution;

/// Probabilities below this are clamped before taking logs.
pub const LOG_EPSILON: f64 = 1e-12;

/// Largest N for which exhaustive enumeration is allowed as a fallback.
pub const EXHAUSTIVE_MAX_LEN: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("PIN has {pin} digits but {dists} distributions were given")]
    LengthMismatch { pin: usize, dists: usize },
    #[error("invalid digit {0} (expected 0..=9)")]
    InvalidDigit(u8),
    #[error("exhaustive ranking supports at most {max} digits, got {got}")]
    TooLongForExhaustive { max: usize, got: usize },
}

/// Attempt-generation strategy used when scoring PIN accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Joint-probability ranking.
    #[default]
    Product,
    /// Smallest-gap swap heuristic.
    Swap,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Product => f.write_str("product"),
            Strategy::Swap => f.write_str("swap"),
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "product" => Ok(Strategy::Product),
            "swap" => Ok(Strategy::Swap),
            other => Err(format!("unknown strategy '{other}' (expected product|swap)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinCandidate {
    pub digits: Vec<u8>,
    pub log_prob: f64,
    pub rank: usize,
}

impl PinCandidate {
    pub fn prob(&self) -> f64 {
        self.log_prob.exp()
    }

    pub fn pin_string(&self) -> String {
        pin_to_string(&self.digits)
    }
}

pub fn pin_to_string(digits: &[u8]) -> String {
    digits.iter().map(|d| char::from(b'0' + d)).collect()
}

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_EPSILON).ln()
}

/// Joint log-probability, summed in position order so that equal terms give
/// bit-identical sums regardless of which candidate is being scored.
fn joint_log_prob(dists: &[DigitDistribution], pin: &[u8]) -> f64 {
    dists
        .iter()
        .zip(pin)
        .map(|(d, &digit)| clamped_ln(d.p(digit)))
        .sum()
}

/// Probability of `pin` as the product of its per-position probabilities.
pub fn pin_probability(dists: &[DigitDistribution], pin: &[u8]) -> Result<f64, RankError> {
    if pin.len() != dists.len() {
        return Err(RankError::LengthMismatch {
            pin: pin.len(),
            dists: dists.len(),
        });
    }
    if let Some(&bad) = pin.iter().find(|&&d| d > 9) {
        return Err(RankError::InvalidDigit(bad));
    }
    Ok(dists.iter().zip(pin).map(|(d, &digit)| d.p(digit)).product())
}

/// Digits of one distribution ordered by probability descending, ties by
/// digit ascending.
pub fn sorted_choices(dist: &DigitDistribution) -> [u8; 10] {
    let mut order: [u8; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
    order.sort_by(|&a, &b| {
        dist.p(b)
            .partial_cmp(&dist.p(a))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Ordering used everywhere for candidates: higher log-prob first, then
/// lexicographically smaller digits first.
fn candidate_order(a_lp: f64, a_digits: &[u8], b_lp: f64, b_digits: &[u8]) -> Ordering {
    b_lp.partial_cmp(&a_lp)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_digits.cmp(b_digits))
}

struct Frontier {
    log_prob: f64,
    digits: Vec<u8>,
    indices: Vec<u8>,
    /// Lowest position that may still be advanced (canonical-path dedup).
    pivot: usize,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Frontier {}
impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Frontier {
    // BinaryHeap is a max-heap: "greater" = better candidate.
    fn cmp(&self, other: &Self) -> Ordering {
        candidate_order(other.log_prob, &other.digits, self.log_prob, &self.digits)
    }
}

/// The `k` most probable PINs, best first.
///
/// Each distribution's digits are pre-sorted; a state is a vector of indices
/// into those sorted lists. Successors advance one index at a position
/// `>= pivot`, which reaches every state along exactly one path. Because a
/// successor never beats its parent under the (log-prob, lexicographic)
/// order, popping the heap yields candidates in exact rank order.
///
/// `k` is capped at `10^N`.
pub fn rank_pins(dists: &[DigitDistribution], k: usize) -> Vec<PinCandidate> {
    let n = dists.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let total = 10usize.checked_pow(n as u32).unwrap_or(usize::MAX);
    let k = k.min(total);
    let choices: Vec<[u8; 10]> = dists.iter().map(sorted_choices).collect();

    let make = |indices: Vec<u8>, pivot: usize| {
        let digits: Vec<u8> = indices
            .iter()
            .zip(&choices)
            .map(|(&i, c)| c[i as usize])
            .collect();
        Frontier {
            log_prob: joint_log_prob(dists, &digits),
            digits,
            indices,
            pivot,
        }
    };

    let mut heap = BinaryHeap::new();
    heap.push(make(vec![0; n], 0));
    let mut out = Vec::with_capacity(k);
    while let Some(best) = heap.pop() {
        for pos in best.pivot..n {
            if best.indices[pos] < 9 {
                let mut next = best.indices.clone();
                next[pos] += 1;
                heap.push(make(next, pos));
            }
        }
        out.push(PinCandidate {
            digits: best.digits,
            log_prob: best.log_prob,
            rank: out.len() + 1,
        });
        if out.len() == k {
            break;
        }
    }
    out
}

/// Exhaustive ranking over all `10^N` PINs. Only for `N <= 5`.
pub fn rank_pins_exhaustive(
    dists: &[DigitDistribution],
    k: usize,
) -> Result<Vec<PinCandidate>, RankError> {
    let n = dists.len();
    if n > EXHAUSTIVE_MAX_LEN {
        return Err(RankError::TooLongForExhaustive {
            max: EXHAUSTIVE_MAX_LEN,
            got: n,
        });
    }
    let total = 10usize.pow(n as u32);
    let mut all: Vec<(f64, Vec<u8>)> = (0..total)
        .map(|mut code| {
            let mut digits = vec![0u8; n];
            for slot in digits.iter_mut().rev() {
                *slot = (code % 10) as u8;
                code /= 10;
            }
            (joint_log_prob(dists, &digits), digits)
        })
        .collect();
    all.sort_by(|a, b| candidate_order(a.0, &a.1, b.0, &b.1));
    Ok(all
        .into_iter()
        .take(k.min(total))
        .enumerate()
        .map(|(i, (log_prob, digits))| PinCandidate {
            digits,
            log_prob,
            rank: i + 1,
        })
        .collect())
}

/// Guesses built by the smallest-gap swap rule.
///
/// Guess 1 is the per-position argmax. Guess `j + 1` is guess 1 with the
/// position of the `j`-th smallest top1-top2 gap replaced by its second-best
/// digit. `attempts` is clamped to `[1, N + 1]`.
pub fn swap_heuristic_guesses(dists: &[DigitDistribution], attempts: usize) -> Vec<Vec<u8>> {
    let n = dists.len();
    if n == 0 {
        return Vec::new();
    }
    let attempts = attempts.clamp(1, n + 1);
    let choices: Vec<[u8; 10]> = dists.iter().map(sorted_choices).collect();
    let first: Vec<u8> = choices.iter().map(|c| c[0]).collect();

    let mut by_gap: Vec<(f64, usize)> = dists
        .iter()
        .zip(&choices)
        .enumerate()
        .map(|(pos, (d, c))| (d.p(c[0]) - d.p(c[1]), pos))
        .collect();
    by_gap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));

    let mut guesses = vec![first.clone()];
    for &(_, pos) in by_gap.iter().take(attempts - 1) {
        let mut g = first.clone();
        g[pos] = choices[pos][1];
        guesses.push(g);
    }
    guesses
}

/// Drops the final distribution (5-digit predictions scored as 4-digit PINs).
pub fn truncate_for_4digit(dists: &[DigitDistribution]) -> Vec<DigitDistribution> {
    match dists.split_last() {
        Some((_, head)) => head.to_vec(),
        None => Vec::new(),
    }
}

/// Ranked guesses for one PIN under the chosen strategy, as digit vectors.
pub fn guesses(dists: &[DigitDistribution], n: usize, strategy: Strategy) -> Vec<Vec<u8>> {
    match strategy {
        Strategy::Product => rank_pins(dists, n).into_iter().map(|c| c.digits).collect(),
        Strategy::Swap => swap_heuristic_guesses(dists, n),
    }
}

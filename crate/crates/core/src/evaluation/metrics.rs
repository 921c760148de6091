// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use crate::task_vectors::normalize_mention;

/// Highest character n-gram order used by [`chr_f`].
pub const CHRF_ORDER: usize = 6;
/// Recall weight of [`chr_f`].
pub const CHRF_BETA: f64 = 3.0;

/// Case-sensitive equality after trimming and collapsing whitespace.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_mention(pred) == normalize_mention(gold)
}

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level chrF in `[0, 1]`.
///
/// Whitespace is removed before extracting character n-grams of orders
/// 1..=6. Precision and recall are averaged over the orders where both
/// strings have n-grams and combined into F-β with β = 3.
pub fn chr_f(pred: &str, gold: &str) -> f64 {
    let hyp: Vec<char> = pred.chars().filter(|c| !c.is_whitespace()).collect();
    let refr: Vec<char> = gold.chars().filter(|c| !c.is_whitespace()).collect();
    let (mut avg_p, mut avg_r, mut effective) = (0f64, 0f64, 0usize);
    for n in 1..=CHRF_ORDER {
        let h = char_ngrams(&hyp, n);
        let r = char_ngrams(&refr, n);
        let n_hyp: usize = h.values().sum();
        let n_ref: usize = r.values().sum();
        if n_hyp == 0 || n_ref == 0 {
            continue;
        }
        let matched: usize = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        avg_p += matched as f64 / n_hyp as f64;
        avg_r += matched as f64 / n_ref as f64;
        effective += 1;
    }
    if effective == 0 {
        return 0.0;
    }
    avg_p /= effective as f64;
    avg_r /= effective as f64;
    if avg_p + avg_r == 0.0 {
        return 0.0;
    }
    let f = CHRF_BETA * CHRF_BETA;
    (1.0 + f) * avg_p * avg_r / (f * avg_p + avg_r)
}

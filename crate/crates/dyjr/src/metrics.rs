//! Diagnostics: top-k approximate entropy, rank-k average probabilities,
//! pass@k, mean@N, and an exact distinct-correct-solutions count.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::task::{self, Query};

/// Entropy of the renormalized top-k distribution, in nats.
pub fn approx_entropy(topk_logprobs: &[f64]) -> f64 {
    debug_assert!(!topk_logprobs.is_empty());
    let max = topk_logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = topk_logprobs
        .iter()
        .map(|&l| (l - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    let mut h = 0.0;
    for &l in topk_logprobs {
        let p = (l - log_z).exp();
        if p > 0.0 {
            h -= p * (l - log_z);
        }
    }
    h
}

/// Mean over tokens of the raw (un-renormalized) probability at `rank`
/// (1-indexed) of each token's sorted top-k vector.
pub fn rank_k_avg_prob(per_token_topk: &[Vec<f64>], rank: usize) -> Result<f64> {
    if rank < 1 {
        return Err(Error::Input("rank is 1-indexed".into()));
    }
    if per_token_topk.is_empty() {
        return Err(Error::Input("no tokens to average over".into()));
    }
    let mut sum = 0.0;
    for (i, topk) in per_token_topk.iter().enumerate() {
        if rank > topk.len() {
            return Err(Error::Input(format!(
                "rank {rank} exceeds top-k length {} at token {i}",
                topk.len()
            )));
        }
        sum += topk[rank - 1].exp();
    }
    Ok(sum / per_token_topk.len() as f64)
}

fn binom_u128(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = acc.checked_mul((n - k + i) as u128)?;
        acc /= i as u128; // exact: C(n-k+i, i) is an integer
    }
    Some(acc)
}

/// Unbiased pass@k estimator `1 - C(n-c, k) / C(n, k)`. Exact integer
/// arithmetic when the binomials fit; log-space product otherwise.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n || k < 1 || k > n {
        return Err(Error::Input(format!(
            "pass@k requires 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )));
    }
    if n - c < k {
        return Ok(1.0); // every size-k subset contains a correct sample
    }
    if let (Some(miss), Some(total)) = (binom_u128(n - c, k), binom_u128(n, k)) {
        return Ok(1.0 - miss as f64 / total as f64);
    }
    let mut log_miss = 0.0;
    for i in 0..k {
        log_miss += ((n - c - i) as f64).ln() - ((n - i) as f64).ln();
    }
    Ok(1.0 - log_miss.exp())
}

/// Naive plug-in estimator `1 - (1 - c/n)^k`, exposed for cross-checking the
/// unbiased one.
pub fn pass_at_k_naive(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n || k < 1 {
        return Err(Error::Input(format!(
            "naive pass@k requires 0 <= c <= n and k >= 1, got n={n} c={c} k={k}"
        )));
    }
    Ok(1.0 - (1.0 - c as f64 / n as f64).powi(k as i32))
}

/// Arithmetic mean of binary rewards.
pub fn mean_at_n(rewards: &[u8]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Input("mean over an empty reward vector".into()));
    }
    Ok(rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / rewards.len() as f64)
}

/// Number of distinct reward-1 responses among `responses`.
pub fn distinct_correct(q: &Query, responses: &[Vec<u32>], vocab_size: u32) -> Result<usize> {
    let mut seen: HashSet<&[u32]> = HashSet::new();
    for tokens in responses {
        if task::verify(q, tokens, vocab_size)? == 1 {
            seen.insert(tokens.as_slice());
        }
    }
    Ok(seen.len())
}

/// Aggregate of per-token top-k statistics over one collection pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRankStats {
    pub approx_entropy_mean: f64,
    /// Mean raw probability per rank, index 0 = rank 1; non-increasing.
    pub rank_prob_mean: Vec<f64>,
    pub token_count: usize,
}

/// Streaming collector: feed one sorted top-k log-probability vector per
/// generated token.
#[derive(Debug, Clone)]
pub struct RankStatsCollector {
    k: usize,
    entropy_sum: f64,
    prob_sums: Vec<f64>,
    count: usize,
}

impl RankStatsCollector {
    pub fn new(k: usize) -> Self {
        RankStatsCollector {
            k,
            entropy_sum: 0.0,
            prob_sums: vec![0.0; k],
            count: 0,
        }
    }

    pub fn add_token(&mut self, sorted_topk_logprobs: &[f64]) {
        debug_assert_eq!(sorted_topk_logprobs.len(), self.k);
        self.entropy_sum += approx_entropy(sorted_topk_logprobs);
        for (sum, &lp) in self.prob_sums.iter_mut().zip(sorted_topk_logprobs) {
            *sum += lp.exp();
        }
        self.count += 1;
    }

    pub fn finish(self) -> TokenRankStats {
        let n = self.count.max(1) as f64;
        TokenRankStats {
            approx_entropy_mean: self.entropy_sum / n,
            rank_prob_mean: self.prob_sums.iter().map(|s| s / n).collect(),
            token_count: self.count,
        }
    }
}

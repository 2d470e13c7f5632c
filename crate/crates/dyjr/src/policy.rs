//! Context-conditioned autoregressive softmax policy.
//!
//! The policy is a flat logits table over perfectly-indexed contexts, which
//! makes log-probabilities, sampling, and the gradient of any token-weighted
//! log-likelihood exact — no autodiff, every loss checkable against finite
//! differences.
//!
//! A context is the tuple (modulus, target, position, previous token or BOS,
//! running sum mod m). The running sum is the sufficient statistic of the
//! modsum task, so a tabular policy can reach reward 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{self, Query, TaskSpec};

/// Perfect (collision-free) flat indexing of context feature tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextLayout {
    pub modulus_lo: u32,
    pub modulus_hi: u32,
    pub seq_len: usize,
    pub vocab_size: u32,
}

/// Index into the policy table; produced only by `ContextLayout::context_of`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Context(pub usize);

impl ContextLayout {
    pub fn from_task(spec: &TaskSpec) -> Self {
        ContextLayout {
            modulus_lo: spec.modulus_range[0],
            modulus_hi: spec.modulus_range[1],
            seq_len: spec.seq_len,
            vocab_size: spec.vocab_size,
        }
    }

    pub fn n_contexts(&self) -> usize {
        let n_moduli = (self.modulus_hi - self.modulus_lo + 1) as usize;
        let hi = self.modulus_hi as usize;
        let n_prev = self.vocab_size as usize + 1; // tokens plus BOS
        n_moduli * hi * self.seq_len * n_prev * hi
    }

    /// Flat multi-index over the feature ranges. `prev_token` is `None` at the
    /// first position (BOS).
    pub fn context_of(
        &self,
        q: &Query,
        position: usize,
        prev_token: Option<u32>,
        running_sum_mod: u32,
    ) -> Result<Context> {
        if q.modulus < self.modulus_lo || q.modulus > self.modulus_hi {
            return Err(Error::Input(format!(
                "modulus {} outside layout range [{}, {}]",
                q.modulus, self.modulus_lo, self.modulus_hi
            )));
        }
        if q.target >= q.modulus {
            return Err(Error::Input(format!(
                "target {} >= modulus {}",
                q.target, q.modulus
            )));
        }
        if position >= self.seq_len {
            return Err(Error::Input(format!(
                "position {position} >= seq_len {}",
                self.seq_len
            )));
        }
        if running_sum_mod >= q.modulus {
            return Err(Error::Input(format!(
                "running sum {running_sum_mod} >= modulus {}",
                q.modulus
            )));
        }
        let prev_idx = match prev_token {
            None => 0usize,
            Some(t) => {
                if t >= self.vocab_size {
                    return Err(Error::Input(format!(
                        "prev token {t} out of range for vocab {}",
                        self.vocab_size
                    )));
                }
                t as usize + 1
            }
        };
        let hi = self.modulus_hi as usize;
        let n_prev = self.vocab_size as usize + 1;
        let mut idx = (q.modulus - self.modulus_lo) as usize;
        idx = idx * hi + q.target as usize;
        idx = idx * self.seq_len + position;
        idx = idx * n_prev + prev_idx;
        idx = idx * hi + running_sum_mod as usize;
        Ok(Context(idx))
    }
}

/// Flat logits table of shape `[n_contexts, vocab_size]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    table: Vec<f64>,
    pub vocab_size: u32,
    pub n_contexts: usize,
}

impl PolicyParams {
    /// All-zero logits: the uniform policy, maximal entropy.
    pub fn zeros(layout: &ContextLayout) -> Self {
        let n_contexts = layout.n_contexts();
        PolicyParams {
            table: vec![0.0; n_contexts * layout.vocab_size as usize],
            vocab_size: layout.vocab_size,
            n_contexts,
        }
    }

    pub fn from_table(table: Vec<f64>, n_contexts: usize, vocab_size: u32) -> Result<Self> {
        if table.len() != n_contexts * vocab_size as usize {
            return Err(Error::Config(format!(
                "table length {} does not match {} contexts x vocab {}",
                table.len(),
                n_contexts,
                vocab_size
            )));
        }
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("table contains non-finite logits".into()));
        }
        Ok(PolicyParams {
            table,
            vocab_size,
            n_contexts,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Raw mutable access, for experiment setup and tests. Callers are
    /// responsible for keeping every entry finite.
    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn row(&self, ctx: Context) -> &[f64] {
        let v = self.vocab_size as usize;
        &self.table[ctx.0 * v..(ctx.0 + 1) * v]
    }

    pub fn row_mut(&mut self, ctx: Context) -> &mut [f64] {
        let v = self.vocab_size as usize;
        &mut self.table[ctx.0 * v..(ctx.0 + 1) * v]
    }

    /// Log-softmax of `row / temperature`, max-subtracted for stability.
    pub fn token_logprobs(&self, ctx: Context, temperature: f64) -> Vec<f64> {
        debug_assert!(temperature > 0.0);
        let row = self.row(ctx);
        let mut scaled: Vec<f64> = row.iter().map(|&x| x / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = scaled.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        for x in &mut scaled {
            *x -= log_z;
        }
        scaled
    }

    /// The `k` largest log-probabilities in descending order; ties broken by
    /// smaller token id first.
    pub fn top_k_logprobs(&self, ctx: Context, k: usize, temperature: f64) -> Result<Vec<(u32, f64)>> {
        if k < 1 || k > self.vocab_size as usize {
            return Err(Error::Input(format!(
                "k = {k} out of range [1, {}]",
                self.vocab_size
            )));
        }
        let lps = self.token_logprobs(ctx, temperature);
        let mut pairs: Vec<(u32, f64)> = lps
            .into_iter()
            .enumerate()
            .map(|(i, lp)| (i as u32, lp))
            .collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        pairs.truncate(k);
        Ok(pairs)
    }

    /// One plain gradient-descent step; rejects the update if any parameter
    /// leaves the finite range.
    pub fn apply_gradient(&mut self, grad: &[f64], learning_rate: f64) -> Result<()> {
        if grad.len() != self.table.len() {
            return Err(Error::Input(format!(
                "gradient length {} != parameter count {}",
                grad.len(),
                self.table.len()
            )));
        }
        for (p, &g) in self.table.iter_mut().zip(grad) {
            if g != 0.0 {
                *p -= learning_rate * g;
            }
        }
        if self.table.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "policy table left the finite range after an update".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled response with its generation-time per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: Query,
    pub tokens: Vec<u32>,
    pub logprobs_old: Vec<f64>,
    pub reward: u8,
    pub birth_step: u64,
}

fn sample_categorical<R: Rng>(logprobs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logprobs.len() - 1
}

/// Autoregressive ancestral sampling from the policy at `temperature`.
/// Records the log-probability of each chosen token and the verified reward.
pub fn sample_trajectory<R: Rng>(
    params: &PolicyParams,
    layout: &ContextLayout,
    q: &Query,
    temperature: f64,
    step: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut tokens = Vec::with_capacity(q.seq_len);
    let mut logprobs_old = Vec::with_capacity(q.seq_len);
    let mut prev = None;
    let mut sum_mod = 0u32;
    for position in 0..q.seq_len {
        let ctx = layout.context_of(q, position, prev, sum_mod)?;
        let lps = params.token_logprobs(ctx, temperature);
        let token = sample_categorical(&lps, rng);
        tokens.push(token as u32);
        logprobs_old.push(lps[token]);
        prev = Some(token as u32);
        sum_mod = (sum_mod + token as u32) % q.modulus;
    }
    let reward = task::verify(q, &tokens, params.vocab_size)?;
    Ok(Trajectory {
        query: q.clone(),
        tokens,
        logprobs_old,
        reward,
        birth_step: step,
    })
}

/// Greedy (argmax) decoding; ties resolve to the smaller token id.
pub fn greedy_trajectory(
    params: &PolicyParams,
    layout: &ContextLayout,
    q: &Query,
    temperature: f64,
    step: u64,
) -> Result<Trajectory> {
    let mut tokens = Vec::with_capacity(q.seq_len);
    let mut logprobs_old = Vec::with_capacity(q.seq_len);
    let mut prev = None;
    let mut sum_mod = 0u32;
    for position in 0..q.seq_len {
        let ctx = layout.context_of(q, position, prev, sum_mod)?;
        let lps = params.token_logprobs(ctx, temperature);
        let mut best = 0usize;
        for (i, &lp) in lps.iter().enumerate() {
            if lp > lps[best] {
                best = i;
            }
        }
        tokens.push(best as u32);
        logprobs_old.push(lps[best]);
        prev = Some(best as u32);
        sum_mod = (sum_mod + best as u32) % q.modulus;
    }
    let reward = task::verify(q, &tokens, params.vocab_size)?;
    Ok(Trajectory {
        query: q.clone(),
        tokens,
        logprobs_old,
        reward,
        birth_step: step,
    })
}

/// Per-token log-probabilities of a given response under `params`.
pub fn sequence_logprobs(
    params: &PolicyParams,
    layout: &ContextLayout,
    q: &Query,
    tokens: &[u32],
    temperature: f64,
) -> Result<Vec<f64>> {
    if tokens.len() != q.seq_len {
        return Err(Error::Input(format!(
            "token count {} != seq_len {}",
            tokens.len(),
            q.seq_len
        )));
    }
    let mut out = Vec::with_capacity(tokens.len());
    let mut prev = None;
    let mut sum_mod = 0u32;
    for (position, &token) in tokens.iter().enumerate() {
        if token >= params.vocab_size {
            return Err(Error::Input(format!(
                "token {token} out of range for vocab {}",
                params.vocab_size
            )));
        }
        let ctx = layout.context_of(q, position, prev, sum_mod)?;
        let lps = params.token_logprobs(ctx, temperature);
        out.push(lps[token as usize]);
        prev = Some(token);
        sum_mod = (sum_mod + token) % q.modulus;
    }
    Ok(out)
}

/// Contexts visited while scoring `tokens` for `q`, in position order.
pub fn walk_contexts(
    layout: &ContextLayout,
    q: &Query,
    tokens: &[u32],
) -> Result<Vec<Context>> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut prev = None;
    let mut sum_mod = 0u32;
    for (position, &token) in tokens.iter().enumerate() {
        out.push(layout.context_of(q, position, prev, sum_mod)?);
        prev = Some(token);
        sum_mod = (sum_mod + token) % q.modulus;
    }
    Ok(out)
}

/// Shared gradient kernel: adds `sum_j w_j * d log pi(y_j | ctx_j) / d theta`
/// into `grad_out`, i.e. `w_j * (onehot(y_j) - p(ctx_j)) / temperature` on row
/// `ctx_j`. Token order is fixed (position-ascending) so accumulation is
/// bit-reproducible. Zero-weight tokens are skipped, leaving `grad_out`
/// untouched for them.
pub fn accumulate_weighted_grad(
    params: &PolicyParams,
    layout: &ContextLayout,
    q: &Query,
    tokens: &[u32],
    weights: &[f64],
    temperature: f64,
    grad_out: &mut [f64],
) -> Result<()> {
    if weights.len() != tokens.len() {
        return Err(Error::Input(format!(
            "weights length {} != token count {}",
            weights.len(),
            tokens.len()
        )));
    }
    debug_assert!(weights.iter().all(|w| w.is_finite()));
    let vocab = params.vocab_size as usize;
    let mut prev = None;
    let mut sum_mod = 0u32;
    for (position, (&token, &w)) in tokens.iter().zip(weights).enumerate() {
        let ctx = layout.context_of(q, position, prev, sum_mod)?;
        if w != 0.0 {
            let lps = params.token_logprobs(ctx, temperature);
            let base = ctx.0 * vocab;
            for (k, &lp) in lps.iter().enumerate() {
                let p = lp.exp();
                let indicator = if k == token as usize { 1.0 } else { 0.0 };
                grad_out[base + k] += w * (indicator - p) / temperature;
            }
        }
        prev = Some(token);
        sum_mod = (sum_mod + token) % q.modulus;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use crate::task::TaskKind;
    use rand::Rng;
    use std::collections::HashSet;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            task_kind: TaskKind::Modsum,
            vocab_size: 10,
            seq_len: 6,
            modulus_range: [3, 9],
        }
    }

    fn query(modulus: u32, target: u32, seq_len: usize) -> Query {
        Query {
            query_id: 0,
            target,
            modulus,
            seq_len,
        }
    }

    #[test]
    fn context_indexing_is_injective_and_in_range() {
        let layout = ContextLayout {
            modulus_lo: 3,
            modulus_hi: 5,
            seq_len: 3,
            vocab_size: 4,
        };
        let mut seen = HashSet::new();
        let mut count = 0usize;
        for m in 3..=5u32 {
            for t in 0..m {
                let q = query(m, t, 3);
                for pos in 0..3usize {
                    for prev in std::iter::once(None).chain((0..4).map(Some)) {
                        for s in 0..m {
                            let ctx = layout.context_of(&q, pos, prev, s).unwrap();
                            assert!(ctx.0 < layout.n_contexts());
                            assert!(seen.insert(ctx.0), "collision at {:?}", (m, t, pos, prev, s));
                            count += 1;
                        }
                    }
                }
            }
        }
        assert!(count > 0);
    }

    #[test]
    fn context_of_is_deterministic() {
        let layout = ContextLayout::from_task(&small_spec());
        let q = query(7, 2, 6);
        let a = layout.context_of(&q, 3, Some(4), 5).unwrap();
        let b = layout.context_of(&q, 3, Some(4), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_of_rejects_out_of_range_features() {
        let layout = ContextLayout::from_task(&small_spec());
        let q = query(7, 2, 6);
        assert!(layout.context_of(&q, 6, None, 0).is_err());
        assert!(layout.context_of(&q, 0, None, 7).is_err());
        assert!(layout.context_of(&q, 0, Some(10), 0).is_err());
    }

    #[test]
    fn uniform_row_gives_log_uniform() {
        let layout = ContextLayout::from_task(&small_spec());
        let params = PolicyParams::zeros(&layout);
        let lps = params.token_logprobs(Context(0), 1.0);
        for lp in lps {
            assert!((lp - (0.1f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn logprobs_are_shift_invariant() {
        let layout = ContextLayout::from_task(&small_spec());
        let mut params = PolicyParams::zeros(&layout);
        let ctx = Context(17);
        for (i, v) in params.row_mut(ctx).iter_mut().enumerate() {
            *v = i as f64 * 0.3 - 1.0;
        }
        let before = params.token_logprobs(ctx, 1.0);
        for v in params.row_mut(ctx) {
            *v += 123.456;
        }
        let after = params.token_logprobs(ctx, 1.0);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_logit_row_matches_softplus_form() {
        let layout = ContextLayout {
            modulus_lo: 2,
            modulus_hi: 2,
            seq_len: 1,
            vocab_size: 2,
        };
        let mut params = PolicyParams::zeros(&layout);
        params.row_mut(Context(0))[0] = 1.0;
        let lps = params.token_logprobs(Context(0), 1.0);
        // [-softplus(-1), -softplus(1)]
        assert!((lps[0] - (-0.3132616875182228)).abs() < 1e-12);
        assert!((lps[1] - (-1.3132616875182228)).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one_on_random_rows() {
        let layout = ContextLayout::from_task(&small_spec());
        let mut params = PolicyParams::zeros(&layout);
        let mut rng = substream(5, Stream::Rollout);
        for i in 0..50usize {
            let ctx = Context(i * 7);
            for v in params.row_mut(ctx) {
                *v = rng.gen_range(-4.0..4.0);
            }
            let total: f64 = params.token_logprobs(ctx, 0.7).iter().map(|lp| lp.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let layout = ContextLayout::from_task(&small_spec());
        let params = PolicyParams::zeros(&layout);
        let q = query(7, 3, 6);
        let mut rng1 = substream(99, Stream::Rollout);
        let mut rng2 = substream(99, Stream::Rollout);
        let a = sample_trajectory(&params, &layout, &q, 1.0, 4, &mut rng1).unwrap();
        let b = sample_trajectory(&params, &layout, &q, 1.0, 4, &mut rng2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.birth_step, 4);
    }

    #[test]
    fn near_delta_policy_always_emits_its_token() {
        let layout = ContextLayout::from_task(&small_spec());
        let mut params = PolicyParams::zeros(&layout);
        let q = query(3, 0, 6);
        // push token 3 to logit +1000 in every context
        for c in 0..params.n_contexts {
            params.row_mut(Context(c))[3] = 1000.0;
        }
        let mut rng = substream(1, Stream::Rollout);
        let traj = sample_trajectory(&params, &layout, &q, 1.0, 0, &mut rng).unwrap();
        assert!(traj.tokens.iter().all(|&t| t == 3));
        for lp in &traj.logprobs_old {
            assert!(*lp >= (1.0 - 1e-6f64).ln());
        }
    }

    #[test]
    fn uniform_policy_reward_rate_matches_exact_probability() {
        let spec = TaskSpec {
            task_kind: TaskKind::Modsum,
            vocab_size: 10,
            seq_len: 6,
            modulus_range: [2, 2],
        };
        let layout = ContextLayout::from_task(&spec);
        let params = PolicyParams::zeros(&layout);
        let q = query(2, 0, 6);
        let exact = task::count_solutions(&q, &spec).unwrap() as f64 / 1e6;
        assert!((exact - 0.5).abs() < 1e-12);
        let mut rng = substream(2024, Stream::Rollout);
        let mut hits = 0u32;
        for _ in 0..10_000 {
            hits += u32::from(
                sample_trajectory(&params, &layout, &q, 1.0, 0, &mut rng)
                    .unwrap()
                    .reward,
            );
        }
        let rate = f64::from(hits) / 1e4;
        assert!((rate - exact).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn rescoring_own_sample_reproduces_stored_logprobs() {
        let layout = ContextLayout::from_task(&small_spec());
        let mut params = PolicyParams::zeros(&layout);
        let mut rng = substream(8, Stream::Rollout);
        for v in 0..params.len() {
            params.table[v] = rng.gen_range(-2.0..2.0);
        }
        let q = query(5, 1, 6);
        let traj = sample_trajectory(&params, &layout, &q, 1.0, 0, &mut rng).unwrap();
        let rescored = sequence_logprobs(&params, &layout, &q, &traj.tokens, 1.0).unwrap();
        for (a, b) in rescored.iter().zip(&traj.logprobs_old) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_policy_scores_every_token_log_uniform() {
        let layout = ContextLayout::from_task(&small_spec());
        let params = PolicyParams::zeros(&layout);
        let q = query(4, 2, 6);
        let lps = sequence_logprobs(&params, &layout, &q, &[0, 1, 2, 3, 4, 5], 1.0).unwrap();
        for lp in lps {
            assert!((lp - (0.1f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbing_one_row_only_changes_matching_positions() {
        let layout = ContextLayout::from_task(&small_spec());
        let mut params = PolicyParams::zeros(&layout);
        let q = query(5, 1, 6);
        let tokens = [1u32, 2, 3, 0, 4, 1];
        let before = sequence_logprobs(&params, &layout, &q, &tokens, 1.0).unwrap();
        let contexts = walk_contexts(&layout, &q, &tokens).unwrap();
        // bump the row serving position 2 only
        params.row_mut(contexts[2])[0] += 0.25;
        let after = sequence_logprobs(&params, &layout, &q, &tokens, 1.0).unwrap();
        for (j, (a, b)) in before.iter().zip(&after).enumerate() {
            if contexts[j] == contexts[2] {
                assert!((a - b).abs() > 1e-6, "position {j} should have moved");
            } else {
                assert_eq!(a, b, "position {j} should be untouched");
            }
        }
    }

    #[test]
    fn zero_weights_leave_gradient_untouched() {
        let layout = ContextLayout::from_task(&small_spec());
        let params = PolicyParams::zeros(&layout);
        let q = query(5, 1, 6);
        let mut grad = vec![0.0; params.len()];
        accumulate_weighted_grad(
            &params,
            &layout,
            &q,
            &[1, 2, 3, 0, 4, 1],
            &[0.0; 6],
            1.0,
            &mut grad,
        )
        .unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_token_uniform_vocab2_gradient() {
        let layout = ContextLayout {
            modulus_lo: 2,
            modulus_hi: 2,
            seq_len: 1,
            vocab_size: 2,
        };
        let params = PolicyParams::zeros(&layout);
        let q = query(2, 0, 1);
        let mut grad = vec![0.0; params.len()];
        accumulate_weighted_grad(&params, &layout, &q, &[0], &[1.0], 1.0, &mut grad).unwrap();
        let ctx = layout.context_of(&q, 0, None, 0).unwrap();
        let row = &grad[ctx.0 * 2..ctx.0 * 2 + 2];
        assert!((row[0] - 0.5).abs() < 1e-15);
        assert!((row[1] + 0.5).abs() < 1e-15);
    }

    /// Central finite differences of `sum_j w_j log pi(y_j)` against the kernel.
    #[test]
    fn gradient_kernel_matches_finite_differences() {
        let spec = TaskSpec {
            task_kind: TaskKind::Modsum,
            vocab_size: 3,
            seq_len: 3,
            modulus_range: [2, 3],
        };
        let layout = ContextLayout::from_task(&spec);
        let mut rng = substream(31, Stream::Rollout);
        for instance in 0..100 {
            let mut params = PolicyParams::zeros(&layout);
            for v in params.table.iter_mut() {
                *v = rng.gen_range(-1.5..1.5);
            }
            let m = rng.gen_range(2..=3u32);
            let q = query(m, rng.gen_range(0..m), 3);
            let tokens: Vec<u32> = (0..3).map(|_| rng.gen_range(0..3u32)).collect();
            let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let temperature = 1.0;

            let mut grad = vec![0.0; params.len()];
            accumulate_weighted_grad(&params, &layout, &q, &tokens, &weights, temperature, &mut grad)
                .unwrap();

            let objective = |p: &PolicyParams| -> f64 {
                sequence_logprobs(p, &layout, &q, &tokens, temperature)
                    .unwrap()
                    .iter()
                    .zip(&weights)
                    .map(|(lp, w)| lp * w)
                    .sum()
            };
            let h = 1e-5;
            let contexts = walk_contexts(&layout, &q, &tokens).unwrap();
            for ctx in contexts {
                for k in 0..3usize {
                    let idx = ctx.0 * 3 + k;
                    let mut plus = params.clone();
                    plus.table[idx] += h;
                    let mut minus = params.clone();
                    minus.table[idx] -= h;
                    let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                    let abs_err = (fd - grad[idx]).abs();
                    let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
                    assert!(
                        abs_err <= 1e-10 || abs_err / denom <= 1e-6,
                        "instance {instance} idx {idx}: fd {fd} vs analytic {}",
                        grad[idx]
                    );
                }
            }
        }
    }

    #[test]
    fn top_k_breaks_ties_by_token_id() {
        let layout = ContextLayout::from_task(&small_spec());
        let params = PolicyParams::zeros(&layout);
        let top = params.top_k_logprobs(Context(0), 3, 1.0).unwrap();
        let ids: Vec<u32> = top.iter().map(|(t, _)| *t).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        for (_, lp) in top {
            assert!((lp - (0.1f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_full_and_ordering() {
        let layout = ContextLayout {
            modulus_lo: 2,
            modulus_hi: 2,
            seq_len: 1,
            vocab_size: 3,
        };
        let mut params = PolicyParams::zeros(&layout);
        params.row_mut(Context(0)).copy_from_slice(&[3.0, 1.0, 2.0]);
        let full = params.top_k_logprobs(Context(0), 3, 1.0).unwrap();
        assert_eq!(
            full.iter().map(|(t, _)| *t).collect::<Vec<_>>(),
            vec![0, 2, 1]
        );
        let two = params.top_k_logprobs(Context(0), 2, 1.0).unwrap();
        assert_eq!(two.iter().map(|(t, _)| *t).collect::<Vec<_>>(), vec![0, 2]);
        assert!(params.top_k_logprobs(Context(0), 0, 1.0).is_err());
        assert!(params.top_k_logprobs(Context(0), 4, 1.0).is_err());
    }

    #[test]
    fn empirical_token_frequencies_match_probabilities() {
        let layout = ContextLayout {
            modulus_lo: 5,
            modulus_hi: 5,
            seq_len: 1,
            vocab_size: 6,
        };
        let mut params = PolicyParams::zeros(&layout);
        let q = query(5, 0, 1);
        let ctx = layout.context_of(&q, 0, None, 0).unwrap();
        let mut rng = substream(77, Stream::Rollout);
        for v in params.row_mut(ctx) {
            *v = rng.gen_range(-1.0..1.0);
        }
        let probs: Vec<f64> = params
            .token_logprobs(ctx, 1.0)
            .iter()
            .map(|lp| lp.exp())
            .collect();
        let n = 100_000usize;
        let mut counts = vec![0u32; 6];
        for _ in 0..n {
            let t = sample_trajectory(&params, &layout, &q, 1.0, 0, &mut rng).unwrap().tokens[0];
            counts[t as usize] += 1;
        }
        for (k, &p) in probs.iter().enumerate() {
            let freq = f64::from(counts[k]) / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "token {k}: freq {freq} vs p {p} (se {se})"
            );
        }
    }

    #[test]
    fn apply_gradient_rejects_non_finite_results() {
        let layout = ContextLayout {
            modulus_lo: 2,
            modulus_hi: 2,
            seq_len: 1,
            vocab_size: 2,
        };
        let mut params = PolicyParams::zeros(&layout);
        let grad = vec![f64::MAX; params.len()];
        assert!(params.apply_gradient(&grad, f64::MAX).is_err());
    }
}

//! Synthetic verifiable-reward sequence tasks.
//!
//! The `modsum` task asks for a token sequence whose sum hits a target residue
//! modulo a per-query modulus. The checker is exact, difficulty is tunable via
//! the modulus range and sequence length, and the full correct-solution set is
//! countable in closed form, so diversity can be measured without sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of candidate sequences `count_solutions` will agree to reason about.
const MAX_INSTANCE_SIZE: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Modsum,
}

/// Task family definition: alphabet, response length and modulus range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default = "default_task_kind")]
    pub task_kind: TaskKind,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: u32,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Inclusive `[lo, hi]` interval the per-query modulus is drawn from.
    #[serde(default = "default_modulus_range")]
    pub modulus_range: [u32; 2],
}

fn default_task_kind() -> TaskKind {
    TaskKind::Modsum
}
fn default_vocab_size() -> u32 {
    10
}
fn default_seq_len() -> usize {
    6
}
fn default_modulus_range() -> [u32; 2] {
    [3, 9]
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task_kind: default_task_kind(),
            vocab_size: default_vocab_size(),
            seq_len: default_seq_len(),
            modulus_range: default_modulus_range(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.seq_len < 1 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        let [lo, hi] = self.modulus_range;
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!(
                "modulus_range must satisfy 2 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// One task instance: find tokens summing to `target` mod `modulus`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: u64,
    pub target: u32,
    pub modulus: u32,
    pub seq_len: usize,
}

/// Draw `n` queries with modulus uniform over the spec range and target
/// uniform over `[0, m)`. Ids are sequential from 0; callers that need
/// run-unique ids offset them.
pub fn sample_queries<R: Rng>(spec: &TaskSpec, n: usize, rng: &mut R) -> Result<Vec<Query>> {
    spec.validate()?;
    if n < 1 {
        return Err(Error::Config("query count must be >= 1".into()));
    }
    let [lo, hi] = spec.modulus_range;
    let mut queries = Vec::with_capacity(n);
    for id in 0..n {
        let modulus = rng.gen_range(lo..=hi);
        let target = rng.gen_range(0..modulus);
        queries.push(Query {
            query_id: id as u64,
            target,
            modulus,
            seq_len: spec.seq_len,
        });
    }
    Ok(queries)
}

/// Binary reward: 1 iff the token sum hits the target residue.
/// Pure and deterministic; rejects malformed responses loudly since those
/// indicate a decoder bug rather than a wrong answer.
pub fn verify(q: &Query, tokens: &[u32], vocab_size: u32) -> Result<u8> {
    if tokens.len() != q.seq_len {
        return Err(Error::Input(format!(
            "response length {} != seq_len {}",
            tokens.len(),
            q.seq_len
        )));
    }
    let mut sum = 0u64;
    for &t in tokens {
        if t >= vocab_size {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab {vocab_size}"
            )));
        }
        sum += u64::from(t);
    }
    Ok(u8::from(sum % u64::from(q.modulus) == u64::from(q.target)))
}

/// Exact count of reward-1 sequences for `q`, via dynamic programming over
/// residue classes (never by enumeration).
pub fn count_solutions(q: &Query, spec: &TaskSpec) -> Result<u64> {
    spec.validate()?;
    let total = (f64::from(spec.vocab_size)).powi(q.seq_len as i32);
    if total > MAX_INSTANCE_SIZE {
        return Err(Error::Capacity(format!(
            "instance has {total:.3e} sequences, limit is {MAX_INSTANCE_SIZE:.0e}"
        )));
    }
    let m = q.modulus as usize;
    // ways[r] = number of prefixes of the current length with sum ≡ r (mod m)
    let mut ways = vec![0u64; m];
    ways[0] = 1;
    for _ in 0..q.seq_len {
        let mut next = vec![0u64; m];
        for (r, &w) in ways.iter().enumerate() {
            if w == 0 {
                continue;
            }
            for v in 0..spec.vocab_size as usize {
                next[(r + v) % m] += w;
            }
        }
        ways = next;
    }
    Ok(ways[q.target as usize])
}

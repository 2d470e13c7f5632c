//! Dynamic replay buffer.
//!
//! The buffer keeps only perfect (reward-1) trajectories that are temporally
//! close to the current policy: entries older than `max_age` macro-steps are
//! evicted FIFO, and each step admits new samples by sweeping confidence
//! strata from the most- to the least-confident group until a time-aware fill
//! target is met. The fill target is elevated during warm-up so the buffer
//! captures the high-entropy early phase, then contracts.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::GroupRollout;
use crate::policy::Trajectory;

/// Two-plateau fill-rate schedule: `eta_warmup` for the first `warmup_steps`
/// macro-steps, `eta_steady` afterwards. Hard switch, no annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FillSchedule {
    pub warmup_steps: u64,
    pub eta_warmup: f64,
    pub eta_steady: f64,
}

impl Default for FillSchedule {
    fn default() -> Self {
        FillSchedule {
            warmup_steps: 20,
            eta_warmup: 0.20,
            eta_steady: 0.05,
        }
    }
}

impl FillSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_steady > 0.0 && self.eta_steady <= self.eta_warmup && self.eta_warmup <= 1.0)
        {
            return Err(Error::Config(format!(
                "fill schedule must satisfy 0 < eta_steady <= eta_warmup <= 1, got {} / {}",
                self.eta_steady, self.eta_warmup
            )));
        }
        Ok(())
    }

    fn eta(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            self.eta_warmup
        } else {
            self.eta_steady
        }
    }
}

/// Admission target for one step: `ceil(eta(step) * rollouts_per_step)`.
pub fn target_fill_count(sched: &FillSchedule, step: u64, rollouts_per_step: usize) -> usize {
    debug_assert!(rollouts_per_step >= 1);
    (sched.eta(step) * rollouts_per_step as f64).ceil() as usize
}

/// A buffered trajectory together with the group-relative advantage it had at
/// admission time (used by the off-policy replay objective).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub trajectory: Trajectory,
    pub source_advantage: f64,
}

/// FIFO store of perfect trajectories, bounded by age and a rolling capacity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBufferState {
    entries: VecDeque<ReplayEntry>,
    pub max_age: u64,
    /// N = prompt_batch x group_size; the base the fill rate applies to.
    pub rollouts_per_step: usize,
}

impl ReplayBufferState {
    pub fn new(max_age: u64, rollouts_per_step: usize) -> Self {
        ReplayBufferState {
            entries: VecDeque::new(),
            max_age,
            rollouts_per_step,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    /// Remove exactly the entries with `step - birth_step > max_age`,
    /// preserving the relative order of survivors. Returns the evicted count.
    pub fn evict_stale(&mut self, step: u64) -> usize {
        let before = self.entries.len();
        self.entries
            .retain(|e| step.saturating_sub(e.trajectory.birth_step) <= self.max_age);
        before - self.entries.len()
    }

    /// Rolling capacity: the sum of the admission targets of the last
    /// `max_age` steps (the cohorts that can legally coexist in steady state).
    pub fn capacity_bound(&self, sched: &FillSchedule, step: u64) -> usize {
        let lo = step.saturating_sub(self.max_age.saturating_sub(1)).max(1);
        (lo..=step)
            .map(|s| target_fill_count(sched, s, self.rollouts_per_step))
            .sum()
    }

    /// Confidence-stratified descending admission.
    ///
    /// Sweeps k = G, G-1, ..., 1 and admits every reward-1 trajectory from
    /// groups with confidence k while a full stratum fits the remaining quota;
    /// a stratum that does not fit contributes a uniform random subset that
    /// fills the quota exactly, and the sweep halts. The per-step quota is the
    /// schedule target, further capped by the remaining rolling capacity.
    /// Returns the number of admitted entries.
    pub fn admit<R: Rng>(
        &mut self,
        rollouts: &[GroupRollout],
        step: u64,
        sched: &FillSchedule,
        rng: &mut R,
    ) -> usize {
        let target = target_fill_count(sched, step, self.rollouts_per_step);
        let available = self.capacity_bound(sched, step).saturating_sub(self.len());
        let mut remaining = target.min(available);
        if remaining == 0 {
            return 0;
        }
        let max_conf = rollouts.iter().map(|g| g.confidence).max().unwrap_or(0);
        let mut admitted = 0usize;
        for k in (1..=max_conf).rev() {
            if remaining == 0 {
                break;
            }
            let mut stratum: Vec<ReplayEntry> = Vec::new();
            for group in rollouts.iter().filter(|g| g.confidence == k) {
                for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
                    if traj.reward == 1 {
                        stratum.push(ReplayEntry {
                            trajectory: traj.clone(),
                            source_advantage: adv,
                        });
                    }
                }
            }
            if stratum.is_empty() {
                continue;
            }
            stratum.shuffle(rng);
            let take = stratum.len().min(remaining);
            let partial = take < stratum.len();
            for entry in stratum.into_iter().take(take) {
                self.entries.push_back(entry);
            }
            admitted += take;
            remaining -= take;
            if partial {
                break;
            }
        }
        admitted
    }

    /// Append one entry directly, bypassing the admission rules. Used for
    /// checkpoint restore and by archival replay modes that manage their own
    /// retention policy.
    pub fn push(&mut self, entry: ReplayEntry) {
        self.entries.push_back(entry);
    }

    /// Uniform sample without replacement; returns the whole buffer when it
    /// holds fewer than `batch_size` entries. Entries are cloned snapshots.
    pub fn sample_replay<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Vec<ReplayEntry> {
        if self.entries.len() <= batch_size {
            return self.entries.iter().cloned().collect();
        }
        rand::seq::index::sample(rng, self.entries.len(), batch_size)
            .into_iter()
            .map(|i| self.entries[i].clone())
            .collect()
    }
}

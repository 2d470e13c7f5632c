//! Group-relative advantages and the clipped surrogate objective.
//!
//! Advantages standardize binary rewards against group statistics (no learned
//! critic). The surrogate uses per-token importance ratios against the stored
//! generation-time log-probabilities, asymmetric clip bounds, and token-mean
//! aggregation over the flattened online batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{self, ContextLayout, PolicyParams, Trajectory};
use crate::replay::ReplayEntry;
use crate::task::Query;

/// Clipping and degenerate-group handling knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    #[serde(default = "default_eps_low")]
    pub eps_low: f64,
    #[serde(default = "default_eps_high")]
    pub eps_high: f64,
    /// Below this reward standard deviation a group is treated as degenerate
    /// and contributes no gradient.
    #[serde(default = "default_sigma_floor")]
    pub sigma_floor: f64,
}

fn default_eps_low() -> f64 {
    0.2
}
fn default_eps_high() -> f64 {
    0.28
}
fn default_sigma_floor() -> f64 {
    1e-6
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_low: default_eps_low(),
            eps_high: default_eps_high(),
            sigma_floor: default_sigma_floor(),
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return Err(Error::Config(format!("eps_low out of (0,1): {}", self.eps_low)));
        }
        if !(self.eps_high > 0.0 && self.eps_high < 1.0) {
            return Err(Error::Config(format!(
                "eps_high out of (0,1): {}",
                self.eps_high
            )));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        Ok(())
    }
}

/// The G responses sampled for one query, with group-standardized advantages
/// and the empirical confidence (count of correct responses).
#[derive(Debug, Clone, Serialize)]
pub struct GroupRollout {
    pub query: Query,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<u8>,
    pub advantages: Vec<f64>,
    pub confidence: usize,
}

impl GroupRollout {
    pub fn from_trajectories(
        query: Query,
        trajectories: Vec<Trajectory>,
        sigma_floor: f64,
    ) -> Result<Self> {
        let rewards: Vec<u8> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = group_advantages(&rewards, sigma_floor)?;
        let confidence = rewards.iter().filter(|&&r| r == 1).count();
        Ok(GroupRollout {
            query,
            trajectories,
            rewards,
            advantages,
            confidence,
        })
    }
}

/// Standardize rewards against the group mean and population standard
/// deviation. Degenerate groups (all rewards equal, sigma below the floor)
/// get all-zero advantages instead of a division blowup.
pub fn group_advantages(rewards: &[u8], sigma_floor: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::Config(format!("group size must be >= 2, got {g}")));
    }
    let mean = rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / g as f64;
    let var = rewards
        .iter()
        .map(|&r| (f64::from(r) - mean).powi(2))
        .sum::<f64>()
        / g as f64;
    let sigma = var.sqrt();
    if sigma < sigma_floor {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards
        .iter()
        .map(|&r| (f64::from(r) - mean) / sigma)
        .collect())
}

/// Clipped-surrogate loss over one batch of groups plus its gradient.
///
/// Per token: `rho = exp(logpi_theta - logpi_old)`, term = `min(rho * A,
/// clamp(rho, 1-eps_low, 1+eps_high) * A)`; the loss is the negated token-mean
/// over the flattened batch. Gradient flows only where the unclipped branch
/// attains the min.
pub fn grpo_loss_and_grad(
    params: &PolicyParams,
    layout: &ContextLayout,
    groups: &[GroupRollout],
    clip: &ClipConfig,
    temperature: f64,
    grad_out: &mut [f64],
) -> Result<f64> {
    let total_tokens: usize = groups
        .iter()
        .flat_map(|g| g.trajectories.iter())
        .map(|t| t.tokens.len())
        .sum();
    if total_tokens == 0 {
        return Ok(0.0);
    }
    let denom = total_tokens as f64;
    let mut term_sum = 0.0;
    for group in groups {
        for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
            let current =
                policy::sequence_logprobs(params, layout, &traj.query, &traj.tokens, temperature)?;
            let mut weights = vec![0.0; traj.tokens.len()];
            for (j, (&lp_cur, &lp_old)) in current.iter().zip(&traj.logprobs_old).enumerate() {
                let rho = (lp_cur - lp_old).exp();
                if !rho.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite importance ratio for query {} token {j}",
                        traj.query.query_id
                    )));
                }
                let unclipped = rho * adv;
                let clipped = rho.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high) * adv;
                if unclipped <= clipped {
                    term_sum += unclipped;
                    weights[j] = -adv * rho / denom;
                } else {
                    term_sum += clipped;
                }
            }
            if adv != 0.0 {
                policy::accumulate_weighted_grad(
                    params,
                    layout,
                    &traj.query,
                    &traj.tokens,
                    &weights,
                    temperature,
                    grad_out,
                )?;
            }
        }
    }
    Ok(-term_sum / denom)
}

/// The same clipped surrogate applied to replayed trajectories, treating them
/// as extra off-policy data: stored log-probabilities play the old policy and
/// the advantage is the one frozen at admission time. Token-mean over the
/// replay batch.
pub fn replay_surrogate_loss_and_grad(
    params: &PolicyParams,
    layout: &ContextLayout,
    entries: &[ReplayEntry],
    clip: &ClipConfig,
    temperature: f64,
    grad_out: &mut [f64],
) -> Result<f64> {
    let total_tokens: usize = entries.iter().map(|e| e.trajectory.tokens.len()).sum();
    if total_tokens == 0 {
        return Ok(0.0);
    }
    let denom = total_tokens as f64;
    let mut term_sum = 0.0;
    for entry in entries {
        let traj = &entry.trajectory;
        let adv = entry.source_advantage;
        let current =
            policy::sequence_logprobs(params, layout, &traj.query, &traj.tokens, temperature)?;
        let mut weights = vec![0.0; traj.tokens.len()];
        for (j, (&lp_cur, &lp_old)) in current.iter().zip(&traj.logprobs_old).enumerate() {
            let rho = (lp_cur - lp_old).exp();
            if !rho.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite replay ratio for query {} token {j}",
                    traj.query.query_id
                )));
            }
            let unclipped = rho * adv;
            let clipped = rho.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high) * adv;
            if unclipped <= clipped {
                term_sum += unclipped;
                weights[j] = -adv * rho / denom;
            } else {
                term_sum += clipped;
            }
        }
        if adv != 0.0 {
            policy::accumulate_weighted_grad(
                params,
                layout,
                &traj.query,
                &traj.tokens,
                &weights,
                temperature,
                grad_out,
            )?;
        }
    }
    Ok(-term_sum / denom)
}

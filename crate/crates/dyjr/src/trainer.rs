//! End-to-end training orchestration.
//!
//! Each macro-step runs the same four phases: rollout from the frozen policy,
//! buffer maintenance (eviction then admission, mode-dependent), optimization
//! (clipped surrogate plus the mode's replay term), and logging. Every source
//! of randomness draws from its own named substream of the run seed, so a
//! (config, seed) pair determines every output byte, and toggling the replay
//! machinery cannot perturb the rollout stream.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ReplayMode, TrainConfig};
use crate::divergence;
use crate::error::{Error, Result};
use crate::grpo::{self, GroupRollout};
use crate::metrics::{self, RankStatsCollector};
use crate::policy::{self, ContextLayout, PolicyParams};
use crate::replay::{ReplayBufferState, ReplayEntry};
use crate::rng::{self, Stream, StreamState};
use crate::task;

/// Samples drawn per query during evaluation (drives pass@16).
pub const EVAL_SAMPLES: u64 = 16;

/// One JSONL row of the metrics log. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub loss_grpo: f64,
    pub loss_reg: f64,
    pub buffer_size: usize,
    pub admitted_count: usize,
    pub evicted_count: usize,
    pub approx_entropy_mean: f64,
    pub rank1_prob: f64,
    pub rank2_prob: f64,
    pub rank3_prob: f64,
    pub eval_pass1: Option<f64>,
    pub eval_pass16: Option<f64>,
    pub eval_mean_reward: Option<f64>,
    pub distinct_correct_mean: Option<f64>,
    pub clamp_hits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub pass1: f64,
    pub pass16: f64,
    pub mean_reward: f64,
    pub distinct_correct_mean: f64,
}

/// Greedy pass@1 plus sampled pass@16 / mean reward / distinct-correct over a
/// held-out query set. Self-seeding: the held-out queries and the sampling
/// stream derive from dedicated substreams of the run seed, so repeated calls
/// see identical draws (common random numbers across checkpoints).
pub fn evaluate(params: &PolicyParams, cfg: &TrainConfig) -> Result<EvalMetrics> {
    let layout = ContextLayout::from_task(&cfg.task);
    if params.n_contexts != layout.n_contexts() || params.vocab_size != cfg.task.vocab_size {
        return Err(Error::Config(
            "policy shape does not match the task in this config".into(),
        ));
    }
    let mut query_rng = rng::substream(cfg.seed, Stream::EvalQueries);
    let queries = task::sample_queries(&cfg.task, cfg.eval_queries, &mut query_rng)?;
    let mut sample_rng = rng::substream(cfg.seed, Stream::Evaluation);

    let mut pass1_sum = 0.0;
    let mut pass16_sum = 0.0;
    let mut reward_sum = 0.0;
    let mut distinct_sum = 0.0;
    for q in &queries {
        let greedy = policy::greedy_trajectory(params, &layout, q, cfg.temperature_eval, 0)?;
        pass1_sum += f64::from(greedy.reward);

        let mut responses = Vec::with_capacity(EVAL_SAMPLES as usize);
        let mut correct = 0u64;
        for _ in 0..EVAL_SAMPLES {
            let t = policy::sample_trajectory(
                params,
                &layout,
                q,
                cfg.temperature_eval,
                0,
                &mut sample_rng,
            )?;
            correct += u64::from(t.reward);
            reward_sum += f64::from(t.reward);
            responses.push(t.tokens);
        }
        pass16_sum += metrics::pass_at_k(EVAL_SAMPLES, correct, EVAL_SAMPLES)?;
        distinct_sum += metrics::distinct_correct(q, &responses, cfg.task.vocab_size)? as f64;
    }
    let n = queries.len() as f64;
    Ok(EvalMetrics {
        pass1: pass1_sum / n,
        pass16: pass16_sum / n,
        mean_reward: reward_sum / (n * EVAL_SAMPLES as f64),
        distinct_correct_mean: distinct_sum / n,
    })
}

/// Serialized trainer state. The policy fields sit at the top level; buffer
/// contents and substream positions ride along so resumed runs are
/// byte-identical to uninterrupted ones.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    step: u64,
    vocab_size: u32,
    n_contexts: usize,
    table: Vec<f64>,
    config_digest: String,
    buffer: CheckpointBuffer,
    rng: CheckpointRng,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointBuffer {
    max_age: u64,
    rollouts_per_step: usize,
    entries: Vec<ReplayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRng {
    query_sampling: StreamState,
    rollout: StreamState,
    buffer_admission: StreamState,
    replay_sampling: StreamState,
}

/// How many solutions the archival (rlep) mode keeps per task pattern.
const ARCHIVE_PER_PATTERN: usize = 2;

pub struct Trainer {
    cfg: TrainConfig,
    digest: String,
    layout: ContextLayout,
    params: PolicyParams,
    buffer: ReplayBufferState,
    /// rlep mode: archived-solution count per (modulus, target) pattern.
    archive_counts: HashMap<(u32, u32), usize>,
    step: u64,
    rng_query: ChaCha8Rng,
    rng_rollout: ChaCha8Rng,
    rng_admit: ChaCha8Rng,
    rng_replay: ChaCha8Rng,
    last_groups: Option<Vec<GroupRollout>>,
}

impl Trainer {
    /// Fresh run: uniform policy (all-zero logits), empty buffer, step 0.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let cfg = cfg.normalized()?;
        let digest = cfg.digest();
        let layout = ContextLayout::from_task(&cfg.task);
        let params = PolicyParams::zeros(&layout);
        let buffer = ReplayBufferState::new(cfg.buffer.max_age, cfg.rollouts_per_step());
        Ok(Trainer {
            rng_query: rng::substream(cfg.seed, Stream::QuerySampling),
            rng_rollout: rng::substream(cfg.seed, Stream::Rollout),
            rng_admit: rng::substream(cfg.seed, Stream::BufferAdmission),
            rng_replay: rng::substream(cfg.seed, Stream::ReplaySampling),
            cfg,
            digest,
            layout,
            params,
            buffer,
            step: 0,
            last_groups: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn buffer(&self) -> &ReplayBufferState {
        &self.buffer
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// One macro-step: rollout, maintenance, optimization, metrics. Runs the
    /// periodic evaluation when due (and always at the final step).
    pub fn step(&mut self) -> Result<StepRecord> {
        self.step += 1;
        let t = self.step;
        let cfg = &self.cfg;

        // --- rollout from the frozen policy ---
        let mut queries = task::sample_queries(&cfg.task, cfg.prompt_batch, &mut self.rng_query)?;
        for (i, q) in queries.iter_mut().enumerate() {
            q.query_id = (t - 1) * cfg.prompt_batch as u64 + i as u64;
        }
        let mut groups = Vec::with_capacity(queries.len());
        for q in &queries {
            let mut trajectories = Vec::with_capacity(cfg.group_size);
            for _ in 0..cfg.group_size {
                trajectories.push(policy::sample_trajectory(
                    &self.params,
                    &self.layout,
                    q,
                    cfg.temperature_train,
                    t,
                    &mut self.rng_rollout,
                )?);
            }
            groups.push(GroupRollout::from_trajectories(
                q.clone(),
                trajectories,
                cfg.clip.sigma_floor,
            )?);
        }
        let total_rollouts = (cfg.prompt_batch * cfg.group_size) as f64;
        let mean_reward = groups
            .iter()
            .flat_map(|g| g.rewards.iter())
            .map(|&r| f64::from(r))
            .sum::<f64>()
            / total_rollouts;

        // distribution diagnostics under the generation-time policy
        let k_eff = cfg.entropy_topk.min(cfg.task.vocab_size as usize);
        let mut collector = RankStatsCollector::new(k_eff);
        for g in &groups {
            for traj in &g.trajectories {
                let contexts = policy::walk_contexts(&self.layout, &traj.query, &traj.tokens)?;
                for ctx in contexts {
                    let topk =
                        self.params
                            .top_k_logprobs(ctx, k_eff, cfg.temperature_train)?;
                    let lps: Vec<f64> = topk.iter().map(|(_, lp)| *lp).collect();
                    collector.add_token(&lps);
                }
            }
        }
        let rank_stats = collector.finish();
        let rank_at = |r: usize| rank_stats.rank_prob_mean.get(r - 1).copied().unwrap_or(0.0);

        // --- buffer maintenance ---
        let (evicted_count, admitted_count) = match cfg.replay_mode {
            ReplayMode::Grpo => (0, 0),
            ReplayMode::Dyjr | ReplayMode::RlepDynamic => {
                let evicted = self.buffer.evict_stale(t);
                let admitted =
                    self.buffer
                        .admit(&groups, t, &cfg.buffer.fill_schedule(), &mut self.rng_admit);
                (evicted, admitted)
            }
            ReplayMode::Rlep => (0, self.buffer.append_all_perfect(&groups, 2)),
        };
        let buffer_size = self.buffer.len();

        // --- optimization over mini-batch slices ---
        self.last_groups = Some(groups.clone());
        let mut loss_grpo_sum = 0.0;
        let mut loss_reg_sum = 0.0;
        let mut clamp_hits = 0u64;
        let mut slices = 0usize;
        for slice in groups.chunks(cfg.mini_batch) {
            slices += 1;
            let mut grad = vec![0.0; self.params.len()];
            loss_grpo_sum += grpo::grpo_loss_and_grad(
                &self.params,
                &self.layout,
                slice,
                &cfg.clip,
                cfg.temperature_train,
                &mut grad,
            )?;
            match cfg.replay_mode {
                ReplayMode::Grpo => {}
                ReplayMode::Dyjr => {
                    let batch = self.buffer.sample_replay(cfg.replay_batch, &mut self.rng_replay);
                    let out = divergence::replay_loss_and_grad(
                        &self.params,
                        &self.layout,
                        &batch,
                        &cfg.regularizer,
                        cfg.temperature_train,
                        &mut grad,
                    )?;
                    loss_reg_sum += out.loss;
                    clamp_hits += out.clamp_hits;
                }
                ReplayMode::Rlep | ReplayMode::RlepDynamic => {
                    let batch = self.buffer.sample_replay(cfg.replay_batch, &mut self.rng_replay);
                    loss_reg_sum += grpo::replay_surrogate_loss_and_grad(
                        &self.params,
                        &self.layout,
                        &batch,
                        &cfg.clip,
                        cfg.temperature_train,
                        &mut grad,
                    )?;
                }
            }
            self.params.apply_gradient(&grad, cfg.learning_rate)?;
        }
        let loss_grpo = loss_grpo_sum / slices as f64;
        let loss_reg = loss_reg_sum / slices as f64;

        // --- periodic evaluation ---
        let eval = if t % cfg.eval_every == 0 || t == cfg.total_steps {
            Some(evaluate(&self.params, cfg)?)
        } else {
            None
        };

        Ok(StepRecord {
            step: t,
            mean_reward,
            loss_grpo,
            loss_reg,
            buffer_size,
            admitted_count,
            evicted_count,
            approx_entropy_mean: rank_stats.approx_entropy_mean,
            rank1_prob: rank_at(1),
            rank2_prob: rank_at(2),
            rank3_prob: rank_at(3),
            eval_pass1: eval.map(|e| e.pass1),
            eval_pass16: eval.map(|e| e.pass16),
            eval_mean_reward: eval.map(|e| e.mean_reward),
            distinct_correct_mean: eval.map(|e| e.distinct_correct_mean),
            clamp_hits,
        })
    }

    /// JSON dump of the rollout batch that triggered a numeric abort.
    pub fn diagnostic_dump(&self, path: &Path) -> Result<()> {
        let payload = serde_json::json!({
            "step": self.step,
            "groups": self.last_groups,
        });
        fs::write(path, serde_json::to_string_pretty(&payload).unwrap())?;
        Ok(())
    }

    /// Write the full trainer state; the write goes through a temp file and
    /// rename so an interrupted save never leaves a torn checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            step: self.step,
            vocab_size: self.params.vocab_size,
            n_contexts: self.params.n_contexts,
            table: self.params.table().to_vec(),
            config_digest: self.digest.clone(),
            buffer: CheckpointBuffer {
                max_age: self.buffer.max_age,
                rollouts_per_step: self.buffer.rollouts_per_step,
                entries: self.buffer.entries().cloned().collect(),
            },
            rng: CheckpointRng {
                query_sampling: rng::capture(&self.rng_query),
                rollout: rng::capture(&self.rng_rollout),
                buffer_admission: rng::capture(&self.rng_admit),
                replay_sampling: rng::capture(&self.rng_replay),
            },
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(&ck).unwrap())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint. Refuses to resume when the
    /// checkpoint was produced under a different config (digest mismatch) or
    /// when shapes disagree; a corrupt file fails before any state is built.
    pub fn resume_from(path: &Path, cfg: TrainConfig) -> Result<Self> {
        let cfg = cfg.normalized()?;
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("unreadable checkpoint {path:?}: {e}")))?;
        let digest = cfg.digest();
        if ck.config_digest != digest {
            return Err(Error::Config(format!(
                "checkpoint digest {} does not match config digest {digest}; refusing to resume",
                ck.config_digest
            )));
        }
        let layout = ContextLayout::from_task(&cfg.task);
        if ck.vocab_size != cfg.task.vocab_size || ck.n_contexts != layout.n_contexts() {
            return Err(Error::Config(format!(
                "checkpoint shape ({} contexts, vocab {}) does not match config ({} contexts, vocab {})",
                ck.n_contexts,
                ck.vocab_size,
                layout.n_contexts(),
                cfg.task.vocab_size
            )));
        }
        let params = PolicyParams::from_table(ck.table, ck.n_contexts, ck.vocab_size)?;
        let mut buffer = ReplayBufferState::new(ck.buffer.max_age, ck.buffer.rollouts_per_step);
        for entry in ck.buffer.entries {
            buffer.push_restored(entry);
        }
        Ok(Trainer {
            rng_query: rng::restore(cfg.seed, Stream::QuerySampling, &ck.rng.query_sampling)?,
            rng_rollout: rng::restore(cfg.seed, Stream::Rollout, &ck.rng.rollout)?,
            rng_admit: rng::restore(cfg.seed, Stream::BufferAdmission, &ck.rng.buffer_admission)?,
            rng_replay: rng::restore(cfg.seed, Stream::ReplaySampling, &ck.rng.replay_sampling)?,
            cfg,
            digest,
            layout,
            params,
            buffer,
            step: ck.step,
            last_groups: None,
        })
    }
}

/// Load just the policy from a checkpoint (for evaluation); enforces the same
/// digest and shape checks as a resume.
pub fn load_params(path: &Path, cfg: &TrainConfig) -> Result<(PolicyParams, u64)> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("unreadable checkpoint {path:?}: {e}")))?;
    if ck.config_digest != cfg.digest() {
        return Err(Error::Config(
            "checkpoint digest does not match config digest".into(),
        ));
    }
    let layout = ContextLayout::from_task(&cfg.task);
    if ck.vocab_size != cfg.task.vocab_size || ck.n_contexts != layout.n_contexts() {
        return Err(Error::Config("checkpoint shape does not match config".into()));
    }
    Ok((
        PolicyParams::from_table(ck.table, ck.n_contexts, ck.vocab_size)?,
        ck.step,
    ))
}

/// Run a full training job: JSONL metrics to `<out_dir>/metrics.jsonl`, final
/// checkpoint to `<out_dir>/checkpoint.json`. A numeric abort leaves a
/// diagnostic dump of the offending batch next to the log.
pub fn train(cfg: TrainConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(cfg)?;
    let log_path = out_dir.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    while !trainer.is_finished() {
        match trainer.step() {
            Ok(record) => {
                serde_json::to_writer(&mut log, &record)
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                log.write_all(b"\n")?;
                log.flush()?;
            }
            Err(err @ Error::Numeric(_)) => {
                trainer.diagnostic_dump(&out_dir.join("diagnostic_dump.json"))?;
                return Err(err);
            }
            Err(err) => return Err(err),
        }
    }
    trainer.save_checkpoint(&out_dir.join("checkpoint.json"))?;
    Ok(())
}

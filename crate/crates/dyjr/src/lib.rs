//! dyjr: a CPU-scale laboratory for replay-regularized policy optimization.
//!
//! The crate trains small tabular softmax policies on synthetic
//! verifiable-reward tasks with group-relative policy optimization (GRPO) and
//! studies how replayed historical samples are best reused. Four replay modes
//! are wired end to end:
//!
//! - `grpo` — on-policy baseline, rollouts are used once and discarded;
//! - `dyjr` — a max-age FIFO buffer of perfect samples with a warm-up-boosted
//!   admission schedule, used as the reference set of a Jensen-Shannon
//!   divergence regularizer computed from stored log-probabilities;
//! - `rlep` — perfect samples are archived without bound and replayed through
//!   the clipped surrogate as extra off-policy data;
//! - `rlep_dynamic` — the dynamic buffer rules combined with the
//!   clipped-surrogate replay objective.
//!
//! Everything is exact and deterministic: analytic gradients (validated
//! against finite differences), closed-form divergence oracles, countable
//! solution sets for diversity metrics, and named random substreams so a
//! (config, seed) pair reproduces every output byte.

pub mod config;
pub mod divergence;
pub mod error;
pub mod grpo;
pub mod metrics;
pub mod policy;
pub mod replay;
pub mod report;
pub mod rng;
pub mod task;
pub mod trainer;

pub use config::{BufferConfig, ReplayMode, TrainConfig};
pub use divergence::{RegKind, RegularizerConfig};
pub use error::{Error, Result};
pub use grpo::{ClipConfig, GroupRollout};
pub use policy::{ContextLayout, PolicyParams, Trajectory};
pub use replay::{FillSchedule, ReplayBufferState, ReplayEntry};
pub use trainer::{evaluate, train, EvalMetrics, StepRecord, Trainer};

//! Seeded random substreams.
//!
//! One root seed keys a ChaCha8 cipher; each consumer of randomness gets its
//! own stream id. Toggling a feature (e.g. enabling the replay buffer) then
//! never shifts the randomness seen by any other consumer, which is what makes
//! mode-reduction comparisons exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named substreams of the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    QuerySampling = 1,
    Rollout = 2,
    BufferAdmission = 3,
    ReplaySampling = 4,
    Evaluation = 5,
    EvalQueries = 6,
}

/// Fresh generator for one named substream of `seed`.
pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Serializable position of a substream, enough to resume it bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamState {
    /// 128-bit word position stored as a decimal string (JSON has no u128).
    pub word_pos: String,
}

pub fn capture(rng: &ChaCha8Rng) -> StreamState {
    StreamState {
        word_pos: rng.get_word_pos().to_string(),
    }
}

pub fn restore(seed: u64, stream: Stream, state: &StreamState) -> Result<ChaCha8Rng> {
    let pos: u128 = state
        .word_pos
        .parse()
        .map_err(|e| Error::Config(format!("bad rng word_pos {:?}: {}", state.word_pos, e)))?;
    let mut rng = substream(seed, stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

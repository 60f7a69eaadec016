//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha stream so that enabling one feature never shifts another's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_LABELED: u64 = 1;
pub(crate) const STREAM_UNLABELED: u64 = 2;
pub(crate) const STREAM_MCC: u64 = 3;
pub(crate) const STREAM_AUG_LABELED: u64 = 4;
pub(crate) const STREAM_AUG_UNLABELED: u64 = 5;
pub(crate) const STREAM_SYNTH_GEOMETRY: u64 = 10;
pub(crate) const STREAM_SYNTH_TEXTURE: u64 = 11;

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Serializable position of a [`ChaCha8Rng`] created by [`stream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position as a decimal string (u128 does not fit JSON numbers).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

impl RngState {
    pub(crate) fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub(crate) fn restore(&self) -> ChaCha8Rng {
        let mut rng = stream(self.seed, self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

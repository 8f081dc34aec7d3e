//! Seeded random streams.
//!
//! Model tables and projections are addressed by `(seed, domain, index)` and
//! read from an independent ChaCha8 stream, so any row can be regenerated on
//! its own and the result does not depend on generation order or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Each table kind reads from its own family of streams.
pub mod domain {
    pub const TARGET_ROW: u64 = 0x7461_7267_6574_0001;
    pub const NOISE_ROW: u64 = 0x6e6f_6973_6500_0002;
    pub const FEATURE_SLICE: u64 = 0x6665_6174_0000_0003;
    pub const EMBEDDING: u64 = 0x656d_6265_6400_0004;
    pub const POLICY_INIT: u64 = 0x706f_6c69_6379_0005;
    pub const CORPUS: u64 = 0x636f_7270_7573_0006;
    pub const SAMPLING: u64 = 0x7361_6d70_6c65_0007;
    pub const MINIBATCH: u64 = 0x6d69_6e69_6200_0008;
}

/// Returns the stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

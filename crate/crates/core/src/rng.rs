//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`substream`] derived from a
//! single root seed, a stream name, and optional integer keys. Streams with
//! different names or keys are statistically independent, and a stream
//! depends only on its own derivation, never on how many draws other streams
//! made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const AUGMENT: &str = "augment";
pub const SPLIT: &str = "split";
pub const SYNTH: &str = "synth";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a root seed, a name and keys.
pub fn derive_seed(root: u64, name: &str, keys: &[u64]) -> u64 {
    // FNV-1a over the name, then fold keys through splitmix.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut s = splitmix64(root ^ splitmix64(h));
    for &k in keys {
        s = splitmix64(s ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    s
}

pub fn substream(root: u64, name: &str, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, name, keys))
}

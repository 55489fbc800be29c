//! Named random streams split from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const CORPUS: &str = "corpus";
pub const INIT: &str = "init";
pub const MASKING: &str = "masking";
pub const SAMPLING: &str = "sampling";
pub const DROPOUT: &str = "dropout";
pub const NEGATIVES: &str = "negatives";

/// A generator whose state depends only on `master` and `name`.
pub fn stream(master: u64, name: &str) -> Rng {
    // FNV-1a over the name, then a splitmix64 finalizer over the mix
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

//! Named, counter-based random streams derived from one global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent stream for `(seed, name, index)`. The same triple always gives
/// the same sequence regardless of how many other streams were drawn.
pub fn stream(seed: u64, name: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut id = [0u8; 8];
    id.copy_from_slice(&digest[..8]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from_le_bytes(id));
    rng
}

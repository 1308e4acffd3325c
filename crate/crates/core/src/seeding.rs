//! Named, reproducible random streams derived from one run seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Sub-stream tags. Every source of randomness in a run draws from exactly one.
pub const STREAM_DATA: u64 = 0xD47A;
pub const STREAM_AUGMENT: u64 = 0xA06;
pub const STREAM_BATCH: u64 = 0xBA7C;
pub const STREAM_INIT: u64 = 0x1417;
pub const STREAM_EVAL: u64 = 0xE7A1;
pub const STREAM_TEXT: u64 = 0x7E47;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `parts` into `base`; distinct part lists give unrelated seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

/// Epoch-wise shuffled mini-batches over `0..n`. A trailing batch with fewer
/// than two members is dropped (it has no negatives).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[STREAM_BATCH, epoch]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

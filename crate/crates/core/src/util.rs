//! Seed derivation, stable hashing, and summation helpers shared across modules.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over bytes. Used to derive per-name parameter seeds; stable across
/// platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Mix a base seed with a context label into a fresh stream seed.
pub fn mix_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(label.as_bytes()))
}

/// Mix a base seed with an index (per-record, per-epoch streams).
pub fn mix_seed_index(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(mix_seed(seed, label) ^ splitmix64(index.wrapping_add(0x9e37)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for a given stream seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Pairwise summation; bounds float drift on long reductions.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Number of worker threads honored by parallel sections.
///
/// Reads `HEARTBEIT_THREADS`; a value of 0 or an unset/unparsable value falls
/// back to the available parallelism. Always at least 1.
pub fn thread_count() -> usize {
    let from_env = std::env::var("HEARTBEIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    from_env
        .or_else(|| std::thread::available_parallelism().ok().map(|n| n.get()))
        .unwrap_or(1)
}

/// Map `f` over indexed items, in parallel when the `parallel` feature is on.
/// Output order always matches input order, so results are identical to the
/// sequential path regardless of thread count.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, U: Send, F: Fn(usize, &T) -> U + Sync>(items: &[T], f: F) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F: Fn(usize, &T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

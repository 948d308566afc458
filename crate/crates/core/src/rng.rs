//! Pinned pseudo-random generation.
//!
//! Every random draw in the crate (parameter initialization, batch order,
//! synthetic corpora) goes through ChaCha8 seeded from a `u64`. The stream is
//! platform-independent, so identical seeds give identical results everywhere.

pub use rand_chacha::ChaCha8Rng as Rng;

use rand::SeedableRng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, stream)`, e.g. one per epoch.
pub fn derived(seed: u64, stream: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Tensor of i.i.d. draws from `U(lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> crate::Tensor {
    use rand::Rng as _;
    let mut t = crate::Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    t
}

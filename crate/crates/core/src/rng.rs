use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible random stream `stream` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills `out` with standard normal draws.
pub fn fill_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    use rand_distr::{Distribution, StandardNormal};
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

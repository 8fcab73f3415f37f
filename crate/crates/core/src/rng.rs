//! Deterministic random number generation.
//!
//! Every stochastic component derives its own ChaCha stream from the run seed
//! plus a context path (round, client, epoch, ...), so results are identical
//! across runs and independent of thread scheduling.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a seed with a context path into a new stream seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(seed ^ 0x6a09_e667_f3bc_c908);
    for &part in path {
        state = splitmix64(state ^ splitmix64(part));
    }
    state
}

/// A ChaCha stream for `seed` mixed with `path`.
pub fn stream(seed: u64, path: &[u64]) -> Prng {
    Prng::seed_from_u64(derive_seed(seed, path))
}

/// Uniformly random permutation of `0..n`.
pub fn permutation(rng: &mut Prng, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Sample `u` indices from `0..n` uniformly without replacement,
/// falling back to with-replacement when `n < u`.
pub fn sample_indices(rng: &mut Prng, n: usize, u: usize) -> Vec<usize> {
    if n == 0 || u == 0 {
        return Vec::new();
    }
    if n < u {
        (0..u).map(|_| rng.random_range(0..n)).collect()
    } else {
        let mut perm = permutation(rng, n);
        perm.truncate(u);
        perm
    }
}

pub fn uniform_f64(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn normal_f64(rng: &mut Prng, mean: f64, std: f64) -> f64 {
    use rand_distr::Distribution;
    rand_distr::Normal::new(mean, std).expect("valid normal").sample(rng)
}

/// Dirichlet(beta * 1_k) proportions via normalized Gamma draws.
pub fn dirichlet(rng: &mut Prng, beta: f64, k: usize) -> Vec<f64> {
    use rand_distr::Distribution;
    let gamma = rand_distr::Gamma::new(beta, 1.0).expect("valid gamma shape");
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        // All draws underflowed (tiny beta); dump everything on one client.
        let winner = rng.random_range(0..k);
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[winner] = 1.0;
        return draws;
    }
    draws.iter_mut().for_each(|d| *d /= sum);
    draws
}

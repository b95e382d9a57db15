//! Counter-based Gaussian draws.
//!
//! Every normal variate occupies a fixed slot of a ChaCha8 keystream: the key
//! comes from the seed, the stream id from `(domain, step)`, and the word offset
//! from the flat `(particle, component)` index. Filling a block sequentially or
//! addressing single slots gives identical values.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Separate keystream families so lattices, probes and permutations never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Lattice = 0,
    Probe = 1,
    Sample = 2,
    Permutation = 3,
}

const WORDS_PER_NORMAL: u128 = 4;

fn stream_rng(seed: u64, domain: Domain, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) ^ step);
    rng
}

fn box_muller(a: u64, b: u64) -> f64 {
    let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard normal at slot `index` of stream `(domain, step)`.
pub fn normal_at(seed: u64, domain: Domain, step: u64, index: u64) -> f64 {
    let mut rng = stream_rng(seed, domain, step);
    rng.set_word_pos(index as u128 * WORDS_PER_NORMAL);
    let a = rng.next_u64();
    let b = rng.next_u64();
    box_muller(a, b)
}

/// Fill `out` with the normals at slots `0..out.len()` of stream `(domain, step)`.
pub fn fill_normals(seed: u64, domain: Domain, step: u64, out: &mut [f64]) {
    let mut rng = stream_rng(seed, domain, step);
    rng.set_word_pos(0);
    for v in out.iter_mut() {
        let a = rng.next_u64();
        let b = rng.next_u64();
        *v = box_muller(a, b);
    }
}

/// Seeded uniform random permutation of `0..n` (Fisher-Yates on a ChaCha stream).
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = stream_rng(seed, Domain::Permutation, 0);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

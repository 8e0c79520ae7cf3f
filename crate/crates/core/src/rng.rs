//! Counter-based random streams.
//!
//! Every random draw in the solvers comes from a stream addressed by
//! `(seed, domain, step, index)`, so results do not depend on how particles
//! are scheduled across worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent families of streams. Two domains never share a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    /// Initial terminal-time grid draw.
    GridInit = 1,
    /// Brownian increments of the backward grid (Step 6).
    GridStep = 2,
    /// Particle regeneration after a covariance projection.
    GridRegen = 3,
    /// Forward baseline grid.
    ForwardGrid = 4,
    /// Policy-evaluation paths.
    Evaluation = 5,
    /// Population parameter draws.
    Population = 6,
    /// Individual-load simulations for nominal profiles.
    LoadSimulation = 7,
    /// Free-form streams for tests and tools.
    Auxiliary = 8,
}

/// Returns the stream for `(seed, domain, step, index)`.
///
/// `step` must fit in 24 bits and `index` in 32 bits.
pub fn stream(seed: u64, domain: Domain, step: usize, index: usize) -> ChaCha8Rng {
    debug_assert!(step < (1 << 24), "step index {step} overflows the stream id");
    debug_assert!((index as u64) < (1 << 32), "particle index overflows the stream id");
    let id = ((domain as u64) << 56) | ((step as u64) << 32) | (index as u64 & 0xffff_ffff);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Fills `out` with standard normal draws.
pub fn fill_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for z in out.iter_mut() {
        *z = StandardNormal.sample(rng);
    }
}

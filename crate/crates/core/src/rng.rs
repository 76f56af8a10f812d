//! Deterministic random streams.
//!
//! Every stochastic draw in a run comes from a ChaCha stream keyed by
//! `(master seed, purpose, agent, round)`, so the values an agent sees do
//! not depend on which other agents were active or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Participation = 2,
    LocalSolver = 3,
    Initialization = 4,
    Sensitivity = 5,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, purpose: Purpose, agent: u64, round: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ agent);
    splitmix64(h ^ round)
}

pub fn stream(master: u64, purpose: Purpose, agent: u64, round: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, agent, round))
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by the run
//! seed and a stream name, so components can be re-run independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Opens the named substream of `seed`.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

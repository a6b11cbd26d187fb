//! Deterministic per-task random streams.
//!
//! Every stochastic step draws from its own ChaCha8 stream keyed by the
//! global seed, a purpose tag and up to two indices (user, round, ...), so
//! results do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ClientInit = 1,
    ClientTrain = 2,
    Upload = 3,
    ServerInit = 4,
    ServerTrain = 5,
    Download = 6,
    Schedule = 7,
    FedAvg = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(global);
    for v in [stream as u64, a, b] {
        h = splitmix64(h ^ v);
    }
    h
}

pub fn stream_rng(global: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, stream, a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let s = derive_seed(1, Stream::Upload, 3, 4);
        assert_eq!(s, derive_seed(1, Stream::Upload, 3, 4));
        assert_ne!(s, derive_seed(1, Stream::Upload, 4, 3));
        assert_ne!(s, derive_seed(1, Stream::ClientTrain, 3, 4));
        assert_ne!(s, derive_seed(2, Stream::Upload, 3, 4));
    }
}

//! Seed derivation.
//!
//! A trial seed fixes a ChaCha8 key; each consumer draws from its own stream
//! of that key, so meters never share generator state and any meter's noise
//! is independent of how many other meters exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GROUPING_STREAM: u64 = 0;
const METER_STREAM_BASE: u64 = 1 << 32;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noise source of the meter at position `index`.
pub fn meter_rng(seed: u64, index: usize) -> ChaCha8Rng {
    stream_rng(seed, METER_STREAM_BASE + index as u64)
}

/// Source for group partitions and master selection.
pub fn grouping_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, GROUPING_STREAM)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_differ_and_repeat() {
        let a: u64 = meter_rng(5, 0).random();
        let b: u64 = meter_rng(5, 1).random();
        let g: u64 = grouping_rng(5).random();
        assert_ne!(a, b);
        assert_ne!(a, g);
        assert_eq!(a, meter_rng(5, 0).random::<u64>());
    }
}

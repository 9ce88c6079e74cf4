use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to derive stable per-component seeds and token seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// An independent stream for a named component under a master seed.
pub fn component_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()).rotate_left(17))
}

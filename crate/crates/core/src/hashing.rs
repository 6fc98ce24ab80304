//! Stable hashing and seed derivation.
//!
//! Everything that must be reproducible across runs and platforms (seed
//! fan-out, message keys, feature hashing) goes through these functions
//! rather than `std::hash`, whose output is not guaranteed to be stable.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_continue(FNV_OFFSET, bytes)
}

fn fnv1a64_continue(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer. Bijective on `u64`.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Canonical key of a message for external embedding lookup: FNV-1a of the
/// UTF-8 bytes.
pub fn message_hash(message: &str) -> u64 {
    fnv1a64(message.as_bytes())
}

/// Seeded hash of `bytes`: the seed's little-endian bytes are fed before the
/// payload and the result is passed through SplitMix64.
pub fn seeded_hash(seed: u64, bytes: &[u8]) -> u64 {
    let h = fnv1a64_continue(FNV_OFFSET, &seed.to_le_bytes());
    splitmix64(fnv1a64_continue(h, bytes))
}

/// Per-stage seed: `splitmix64(global ^ fnv1a64(stage))`.
pub fn derive_seed(global: u64, stage: &str) -> u64 {
    splitmix64(global ^ fnv1a64(stage.as_bytes()))
}

/// Seed for the `index`-th draw within a stage.
pub fn derive_seed_indexed(global: u64, stage: &str, index: u64) -> u64 {
    splitmix64(derive_seed(global, stage) ^ splitmix64(index))
}

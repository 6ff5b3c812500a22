//! Stable, documented hashing used everywhere a decision must be reproducible
//! across runs and platforms: split assignment and per-epoch resampling seeds.
//!
//! The hash is 64-bit FNV-1a over a little-endian encoding of the inputs,
//! finished with splitmix64's avalanche step. It is *not* a defaulted
//! `std::hash::Hasher` on purpose — those make no cross-version stability
//! promise, and a corpus split must never move when the toolchain is bumped.
//!
//! The finalizer matters: raw FNV-1a pushes a byte's influence upward through
//! one multiplication per subsequent input byte, so ids that differ only in a
//! trailing serial number ("enc-000004" vs "enc-000005") land within ~2^-24 of
//! each other on the unit interval and a ratio split would misfile whole
//! blocks of them together. The avalanche spreads the last byte across all 64
//! bits, restoring the binomial behaviour a hash split is supposed to have.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// splitmix64's finalizer (Stafford's Mix13 variant): full-width avalanche so
/// every input bit moves every output bit with probability ~1/2.
fn avalanche(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    z
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash of `(seed, id)`: the seed's little-endian bytes followed by the id's
/// UTF-8 bytes, fed through FNV-1a and the avalanche finalizer. Used for
/// split assignment.
pub fn hash_seeded_str(seed: u64, id: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in seed.to_le_bytes().iter() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    for &b in id.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    avalanche(h)
}

/// Hash of `(seed, n)` with both encoded little-endian; derives per-epoch
/// resampling seeds from a run seed.
pub fn hash_seeded_u64(seed: u64, n: u64) -> u64 {
    let mut buf = [0u8; 16];
    buf[..8].copy_from_slice(&seed.to_le_bytes());
    buf[8..].copy_from_slice(&n.to_le_bytes());
    avalanche(fnv1a64(&buf))
}

/// Maps a hash to [0, 1). Uses the top 53 bits so every output is exactly
/// representable and strictly below 1 — dividing the full 64-bit value by
/// 2^64 instead would round up to exactly 1.0 for hashes near the top of the
/// range and misfile those ids past the last split boundary.
pub fn unit_interval(hash: u64) -> f64 {
    (hash >> 11) as f64 / (1u64 << 53) as f64
}

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
///
/// Used wherever a stable, platform-independent bucket assignment is needed
/// (hashed embeddings, policy feature buckets). `std`'s hasher is randomized
/// per process and cannot be used for this.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercase hex SHA-256 of the UTF-8 bytes of `text`.
pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// SplitMix64 finalizer; derives independent sub-seeds from one master seed.
pub(crate) fn mix_seed(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for a named sub-stream of `master`, e.g. `(iteration, sample index)`.
pub(crate) fn stream_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix_seed(master), |acc, p| mix_seed(acc ^ mix_seed(*p)))
}

//! The stable 64-bit hash shared by the log partitioner and the
//! consistent-hash exchange.
//!
//! FNV-1a 64 over the input bytes (offset basis `0xcbf29ce484222325`,
//! prime `0x100000001b3`), followed by the MurmurHash3 `fmix64` finalizer to
//! spread short-key entropy into the high bits. No seed, no per-process
//! randomness: values are stable across runs, platforms and releases.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

pub fn stable_hash(bytes: &[u8]) -> u64 {
    fmix64(fnv1a64(bytes))
}

/// Hash of two byte strings, unambiguous with respect to the split point.
pub fn stable_hash_pair(a: &[u8], b: &[u8]) -> u64 {
    let h = (a.len() as u64).to_le_bytes().iter().chain(a).chain(b).fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    });
    fmix64(h)
}

//! Stable 64-bit hashing for seed derivation and deterministic bucketing.
//!
//! `std::hash` offers no cross-run stability guarantee, so everything that
//! must reproduce bit-identically (mock judge verdicts, per-record RNG
//! streams) goes through this fixed FNV-1a + splitmix64 pipeline instead.

/// FNV-1a over a sequence of byte fields, with a length prefix per field so
/// that `["ab", "c"]` and `["a", "bc"]` hash differently.
pub(crate) fn fnv1a(fields: &[&[u8]]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    for field in fields {
        eat(&(field.len() as u64).to_le_bytes());
        eat(field);
    }
    h
}

/// splitmix64 finalizer; FNV-1a alone disperses short inputs poorly.
pub(crate) fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable hash of string fields under a numeric seed.
pub(crate) fn stable_hash(seed: u64, fields: &[&str]) -> u64 {
    let mut byte_fields: Vec<&[u8]> = Vec::with_capacity(fields.len() + 1);
    let seed_bytes = seed.to_le_bytes();
    byte_fields.push(&seed_bytes);
    for f in fields {
        byte_fields.push(f.as_bytes());
    }
    mix(fnv1a(&byte_fields))
}

/// Maps a hash to a uniform fraction in [0, 1).
pub(crate) fn unit_fraction(h: u64) -> f64 {
    // 53 high bits -> exactly representable dyadic fraction.
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_boundaries_matter() {
        assert_ne!(fnv1a(&[b"ab", b"c"]), fnv1a(&[b"a", b"bc"]));
    }

    #[test]
    fn stable_across_calls() {
        let a = stable_hash(7, &["x", "y"]);
        let b = stable_hash(7, &["x", "y"]);
        assert_eq!(a, b);
        assert_ne!(a, stable_hash(8, &["x", "y"]));
    }

    #[test]
    fn unit_fraction_in_range() {
        for i in 0..1000u64 {
            let f = unit_fraction(mix(i));
            assert!((0.0..1.0).contains(&f));
        }
    }
}

//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is derived from a root seed plus a
//! string tag and the coordinates that identify the consumer (task, noise
//! level, seed index, episode index, control cycle). Derivation hashes the
//! material with SHA-256 so streams are independent and stable across runs
//! and platforms.

use sha2::{Digest, Sha256};

/// Accumulates seed material and finishes into a 64-bit seed.
pub struct SeedMix {
    hasher: Sha256,
}

impl SeedMix {
    pub fn new(tag: &str) -> SeedMix {
        let mut hasher = Sha256::new();
        hasher.update((tag.len() as u64).to_le_bytes());
        hasher.update(tag.as_bytes());
        SeedMix { hasher }
    }

    pub fn u64(mut self, v: u64) -> SeedMix {
        self.hasher.update([1u8]);
        self.hasher.update(v.to_le_bytes());
        self
    }

    pub fn f64_bits(mut self, v: f64) -> SeedMix {
        self.hasher.update([2u8]);
        self.hasher.update(v.to_bits().to_le_bytes());
        self
    }

    pub fn str(mut self, s: &str) -> SeedMix {
        self.hasher.update([3u8]);
        self.hasher.update((s.len() as u64).to_le_bytes());
        self.hasher.update(s.as_bytes());
        self
    }

    pub fn finish(self) -> u64 {
        let digest = self.hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// Hex SHA-256 of a byte slice, used for artifact fingerprints.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short hash of an observation vector for step logs.
pub fn hash_f64_slice(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_bits().to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_tag_sensitive() {
        let a = SeedMix::new("cell").u64(7).str("place").f64_bits(0.2).finish();
        let b = SeedMix::new("cell").u64(7).str("place").f64_bits(0.2).finish();
        let c = SeedMix::new("cycle").u64(7).str("place").f64_bits(0.2).finish();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn field_order_matters() {
        let a = SeedMix::new("t").u64(1).u64(2).finish();
        let b = SeedMix::new("t").u64(2).u64(1).finish();
        assert_ne!(a, b);
    }

    #[test]
    fn obs_hash_is_bit_sensitive() {
        let a = hash_f64_slice(&[1.0, 2.0]);
        let b = hash_f64_slice(&[1.0, 2.0 + 1e-15]);
        assert_eq!(a.len(), 16);
        assert_ne!(a, b);
    }
}

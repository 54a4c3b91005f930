//! Stable content hashing.
//!
//! Everything that must be identical across processes (word ids, prompt
//! digests, per-step seeds, audio payload digests) goes through SHA-256 so
//! results never depend on `std`'s hasher seeding.

use sha2::{Digest, Sha256};

#[derive(Clone, Default)]
pub struct StableHasher {
    inner: Sha256,
}

impl StableHasher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts a hasher with a domain-separation tag.
    pub fn with_domain(domain: &str) -> Self {
        let mut h = Self::new();
        h.write_bytes(domain.as_bytes());
        h
    }

    pub fn write_u8(&mut self, v: u8) -> &mut Self {
        self.inner.update([v]);
        self
    }

    pub fn write_u32(&mut self, v: u32) -> &mut Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    pub fn write_u64(&mut self, v: u64) -> &mut Self {
        self.inner.update(v.to_le_bytes());
        self
    }

    /// Length-prefixed, so concatenations cannot collide.
    pub fn write_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn finish_bytes(self) -> [u8; 32] {
        self.inner.finalize().into()
    }

    pub fn finish(self) -> u64 {
        let out = self.finish_bytes();
        u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
    }
}

/// Derives a 64-bit seed from an ordered list of parts.
pub fn mix(domain: &str, parts: &[u64]) -> u64 {
    let mut h = StableHasher::with_domain(domain);
    for &p in parts {
        h.write_u64(p);
    }
    h.finish()
}

/// Maps a 64-bit hash to a uniform value in `[0, 1)` using its top 53 bits.
pub fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

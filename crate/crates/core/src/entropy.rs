//! Seedable source of identifiers, salts and tokens.
//!
//! Everything random in the system draws from an [`Entropy`] so that a
//! simulation seeded with the same value produces the same ids.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Entropy {
    rng: ChaCha8Rng,
}

impl Entropy {
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_os() -> Self {
        Self {
            rng: ChaCha8Rng::from_entropy(),
        }
    }

    /// A fresh 128-bit random id rendered as a hyphenated UUID string.
    pub fn uuid(&mut self) -> String {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes)
            .into_uuid()
            .hyphenated()
            .to_string()
    }

    pub fn bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.rng.fill_bytes(&mut out);
        out
    }

    /// Opaque bearer token, 256 bits as lowercase hex.
    pub fn token(&mut self) -> String {
        hex::encode(self.bytes::<32>())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_sources_repeat() {
        let mut a = Entropy::seeded(7);
        let mut b = Entropy::seeded(7);
        assert_eq!(a.uuid(), b.uuid());
        assert_eq!(a.token(), b.token());
    }

    #[test]
    fn uuid_shape() {
        let id = Entropy::seeded(1).uuid();
        assert_eq!(id.len(), 36);
        assert_eq!(id.as_bytes()[14], b'4');
    }
}

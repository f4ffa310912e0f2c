//! Content digests and seed derivation.
//!
//! Every digest is SHA-256 over a canonical byte encoding, rendered as
//! lowercase hex. Structured values are digested through their canonical
//! JSON form (maps are `BTreeMap`s so key order is fixed).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of the canonical JSON encoding of `value`.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    sha256_hex(bytes)
}

/// Derives a 64-bit seed from a base seed and a stream path.
///
/// Distinct paths give independent streams; the mapping is stable across
/// platforms because it only depends on SHA-256 of little-endian words.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for word in path {
        hasher.update(word.to_le_bytes());
    }
    let out = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&out[..8]);
    u64::from_le_bytes(word)
}

/// A ChaCha8 generator for the stream `path` under `base`.
pub fn rng_for(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

/// Stable 64-bit tag for a string, used to fold identifiers into seed paths.
pub fn str_word(s: &str) -> u64 {
    let out = Sha256::digest(s.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&out[..8]);
    u64::from_le_bytes(word)
}

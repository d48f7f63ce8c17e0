//! Deterministic bag-of-words embeddings via feature hashing.

use crate::text::tokenize;

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

/// Hashes each lowercase alphanumeric token into one of `dim` buckets and
/// counts occurrences. Texts without tokens map to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            v[(fold(fnv1a(token.as_bytes())) % self.dim as u64) as usize] += 1.0;
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// The low bits of an FNV hash depend only on the low bits of each step, so
/// tokens sharing a prefix collide in small power-of-two tables. The 64-bit
/// murmur finalizer spreads every input bit over the low bits.
fn fold(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::cosine_similarity;

    #[test]
    fn fixed_dimension_and_determinism() {
        let e = HashingEmbedder::default();
        let a = e.embed("Let there be bright red light!");
        assert_eq!(a.len(), 256);
        assert_eq!(a, e.embed("let THERE be bright, red light"));
        assert_eq!(a.iter().sum::<f64>(), 6.0);
    }

    #[test]
    fn near_duplicates_score_high() {
        let e = HashingEmbedder::default();
        let sim = |x: &str, y: &str| cosine_similarity(&e.embed(x), &e.embed(y)).unwrap();
        assert!((sim("turn the lamp off", "Turn the lamp off!") - 1.0).abs() < 1e-12);
        assert!(sim("i'm off to bed", "make it bright and blue") < 0.5);
    }

    #[test]
    fn shared_prefixes_do_not_collide_together() {
        let e = HashingEmbedder::default();
        let vs: Vec<_> = (0..300)
            .map(|i| e.embed(&format!("b{i}a b{i}b b{i}c b{i}d")))
            .collect();
        for (i, a) in vs.iter().enumerate() {
            for b in &vs[..i] {
                assert!(cosine_similarity(a, b).unwrap() < 0.85);
            }
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn empty_text_is_zero_vector() {
        assert!(HashingEmbedder::new(8).embed("?!").iter().all(|x| *x == 0.0));
    }
}

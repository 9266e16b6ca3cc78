//! Frozen query function: hashed random features of unigrams and adjacent
//! bigrams, average-pooled and L2-normalized. It has no trainable state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::vocab::{self, SEP_TOKEN};

#[derive(Clone, Debug, PartialEq)]
pub struct QueryVector {
    pub values: Vec<f32>,
    /// Fingerprint of the `(context, question)` pair.
    pub source_hash: u64,
}

impl QueryVector {
    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&x| x as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for QueryEncoder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl QueryEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::field("query_dim", "must be positive"));
        }
        Ok(Self { dim, seed })
    }

    fn add_feature(&self, feature: &[u8], acc: &mut [f64]) {
        let mut rng = seed::rng(self.seed, &[seed::stream::ENCODER, fnv1a(feature)]);
        for a in acc.iter_mut() {
            *a += rng.gen_range(-1.0..1.0);
        }
    }

    /// `question` is the full question (options included).
    pub fn encode(&self, context: &str, question: &str) -> Result<QueryVector> {
        let tokens: Vec<&str> = vocab::tokenize(context)
            .chain(std::iter::once(SEP_TOKEN))
            .chain(vocab::tokenize(question))
            .collect();
        if tokens.len() <= 1 {
            return Err(Error::EmptyInput);
        }
        let mut acc = vec![0.0f64; self.dim];
        let mut buf = Vec::new();
        for t in &tokens {
            buf.clear();
            buf.push(b'u');
            buf.extend_from_slice(t.as_bytes());
            self.add_feature(&buf, &mut acc);
        }
        for w in tokens.windows(2) {
            buf.clear();
            buf.push(b'b');
            buf.extend_from_slice(w[0].as_bytes());
            buf.push(0);
            buf.extend_from_slice(w[1].as_bytes());
            self.add_feature(&buf, &mut acc);
        }
        // Pooling divides by the feature count; normalization makes it moot
        // except for the zero check.
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        let mut src = Vec::with_capacity(context.len() + question.len() + 1);
        src.extend_from_slice(context.as_bytes());
        src.push(0);
        src.extend_from_slice(question.as_bytes());
        Ok(QueryVector {
            values: acc.iter().map(|x| (x / norm) as f32).collect(),
            source_hash: fnv1a(&src),
        })
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - cos(u, v)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

/// Same as [`cosine_distance`] for stored single-precision vectors.
pub fn cosine_distance_f32(u: &[f32], v: &[f32]) -> Result<f64> {
    let u: Vec<f64> = u.iter().map(|&x| x as f64).collect();
    let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    cosine_distance(&u, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encoding_is_deterministic_and_unit_norm() {
        let e = QueryEncoder::default();
        let a = e.encode("w1 w2 m0 w3", "<ext> after m0").unwrap();
        let b = e.encode("w1 w2 m0 w3", "<ext> after m0").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.values.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn order_changes_the_query() {
        let e = QueryEncoder::default();
        let a = e.encode("a b c", "q").unwrap();
        let b = e.encode("c b a", "q").unwrap();
        assert!(cosine_distance_f32(&a.values, &b.values).unwrap() > 1e-3);
    }

    #[test]
    fn empty_input_is_an_error() {
        let e = QueryEncoder::default();
        assert!(matches!(e.encode("", "  "), Err(Error::EmptyInput)));
    }

    #[test]
    fn feature_values_are_pinned() {
        // Guards cross-platform stability of the hashing and the generator.
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn distance_examples() {
        let u = [1.0, 0.0];
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&u, &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&u, &[-2.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(cosine_distance(&u, &[0.0, 0.0]), Err(Error::ZeroVector)));
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 6).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_scale_invariant(u in nonzero_vec(), v in nonzero_vec(), a in 0.01f64..100.0) {
            let d = cosine_distance(&u, &v).unwrap();
            prop_assert!((d - cosine_distance(&v, &u).unwrap()).abs() < 1e-12);
            let su: Vec<f64> = u.iter().map(|x| x * a).collect();
            prop_assert!((d - cosine_distance(&su, &v).unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}

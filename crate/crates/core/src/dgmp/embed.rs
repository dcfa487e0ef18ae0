use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Mutex;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::DgmpError;

/// Maps report text to a unit-norm parsing feature.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, DgmpError>;
}

/// Bag of seeded random token vectors, summed and normalized.
#[derive(Debug)]
pub struct StubEmbedder {
    dim: usize,
    seed: u64,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl StubEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.cache.lock().expect("cache lock").get(token) {
            return v.clone();
        }
        let mut h = FnvHasher::default();
        h.write(token.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish() ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        self.cache
            .lock()
            .expect("cache lock")
            .insert(token.to_string(), v.clone());
        v
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '#'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Embedder for StubEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, DgmpError> {
        if text.trim().is_empty() {
            return Err(DgmpError::EmptyText);
        }
        let mut toks = tokens(text);
        if toks.is_empty() {
            toks.push(text.trim().to_string());
        }
        let mut acc = vec![0.0; self.dim];
        for t in &toks {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        Ok(crate::numerics::l2_normalize(&acc))
    }
}

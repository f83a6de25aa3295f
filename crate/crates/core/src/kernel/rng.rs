use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Seeded generator. Identical seed and call sequence yields identical draws.
///
/// Child generators are derived by hashing the parent seed with a list of
/// keys, so independent components (devices, stages, steps) draw from
/// independent streams no matter in which order they run.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for the stream identified by `keys`.
    pub fn derive(&self, keys: &[u64]) -> Rng {
        Rng::new(derive_seed(self.seed, keys))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Tensor of i.i.d. `N(0, std^2)` entries.
    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.normal() * std;
        }
        t
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Reparameterized draw `mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn sample_gaussian(mu: &Tensor, sigma: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if mu.shape() != sigma.shape() {
        return Err(shape_err(
            "sample_gaussian",
            format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
        ));
    }
    if let Some(s) = sigma.data().iter().find(|s| **s < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be non-negative, found {s}"
        )));
    }
    let mut out = mu.clone();
    for (o, s) in out.data_mut().iter_mut().zip(sigma.data()) {
        let eps = rng.normal();
        *o += s * eps;
    }
    Ok(out)
}

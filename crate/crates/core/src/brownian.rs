//! Reproducible Brownian motion over a fixed horizon.
//!
//! Values of `B_t` live on a dyadic tree over `[start, end]`: the endpoint
//! value is drawn first, and every dyadic midpoint is drawn from the
//! Brownian bridge between its two neighbours one level up. Each draw uses a
//! counter-based generator keyed by `(seed, level, index)`, so any query
//! order produces the same path. Times that are not dyadic grid points are
//! resolved at [`MAX_DEPTH`] by one more bridge draw keyed on the time's bit
//! pattern.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Depth at which non-dyadic query times are resolved (leaf width is
/// `span / 2^MAX_DEPTH`).
pub const MAX_DEPTH: u32 = 32;

const LEAF_TAG: u64 = 0xB5AD_4ECE_DA1C_E2A9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Key {
    Grid { level: u32, index: u64 },
    OffGrid(u64),
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine any number of words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &p| mix(acc ^ mix(p)))
}

pub struct BrownianPath {
    seed: u64,
    dim: usize,
    start: f64,
    end: f64,
    cache: Mutex<HashMap<Key, Arc<Vec<f64>>>>,
}

impl std::fmt::Debug for BrownianPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BrownianPath")
            .field("seed", &self.seed)
            .field("dim", &self.dim)
            .field("start", &self.start)
            .field("end", &self.end)
            .finish()
    }
}

impl BrownianPath {
    pub fn new(seed: u64, dim: usize, start: f64, end: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("Brownian path dimension must be positive"));
        }
        if !(start < end) || !start.is_finite() || !end.is_finite() {
            return Err(Error::contract(format!("invalid Brownian horizon [{start}, {end}]")));
        }
        Ok(Self { seed, dim, start, end, cache: Mutex::new(HashMap::new()) })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> (f64, f64) {
        (self.start, self.end)
    }

    /// `B(t1) - B(t0)`.
    pub fn increment<T: Scalar>(&self, t0: f64, t1: f64) -> Result<Tensor<T>> {
        if !(t0 < t1) {
            return Err(Error::contract(format!("increment needs t0 < t1, got [{t0}, {t1}]")));
        }
        let eps = 1e-12 * (self.end - self.start);
        if t0 < self.start - eps || t1 > self.end + eps {
            return Err(Error::contract(format!(
                "[{t0}, {t1}] outside the horizon [{}, {}]",
                self.start, self.end
            )));
        }
        let a = self.value_at(t0.max(self.start));
        let b = self.value_at(t1.min(self.end));
        Ok(Tensor::from_parts(
            vec![self.dim],
            a.iter().zip(b.iter()).map(|(x, y)| T::lit(y - x)).collect(),
        ))
    }

    /// `B(t) - B(start)`.
    pub fn value_at(&self, t: f64) -> Arc<Vec<f64>> {
        let span = self.end - self.start;
        let scaled = ((t - self.start) / span).clamp(0.0, 1.0) * (1u64 << MAX_DEPTH) as f64;
        let lo = scaled.floor();
        if lo == scaled {
            return self.grid(MAX_DEPTH, lo as u64);
        }
        let key = Key::OffGrid(t.to_bits());
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Arc::clone(v);
        }
        let left = self.grid(MAX_DEPTH, lo as u64);
        let right = self.grid(MAX_DEPTH, lo as u64 + 1);
        let width = span / (1u64 << MAX_DEPTH) as f64;
        let ta = self.start + lo * width;
        let frac = ((t - ta) / width).clamp(0.0, 1.0);
        let sd = (width * frac * (1.0 - frac)).sqrt();
        let z = self.normals(derive_seed(&[self.seed, LEAF_TAG, t.to_bits()]));
        let v: Vec<f64> = (0..self.dim)
            .map(|i| left[i] + frac * (right[i] - left[i]) + sd * z[i])
            .collect();
        let v = Arc::new(v);
        self.cache.lock().unwrap().insert(key, Arc::clone(&v));
        v
    }

    /// Value at grid point `index / 2^level` of the horizon.
    fn grid(&self, mut level: u32, mut index: u64) -> Arc<Vec<f64>> {
        while level > 0 && index % 2 == 0 {
            level -= 1;
            index /= 2;
        }
        if level == 0 && index == 0 {
            return Arc::new(vec![0.0; self.dim]);
        }
        let key = Key::Grid { level, index };
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Arc::clone(v);
        }
        let span = self.end - self.start;
        let v: Vec<f64> = if level == 0 {
            let z = self.normals(derive_seed(&[self.seed, 0, 1]));
            z.iter().map(|z| span.sqrt() * z).collect()
        } else {
            let left = self.grid(level, index - 1);
            let right = self.grid(level, index + 1);
            // bridge midpoint of an interval of width span / 2^(level-1)
            let sd = (span / (1u64 << (level + 1)) as f64).sqrt();
            let z = self.normals(derive_seed(&[self.seed, level as u64, index]));
            (0..self.dim).map(|i| 0.5 * (left[i] + right[i]) + sd * z[i]).collect()
        };
        let v = Arc::new(v);
        self.cache.lock().unwrap().insert(key, Arc::clone(&v));
        v
    }

    fn normals(&self, key_seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(key_seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

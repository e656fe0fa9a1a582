//! Named parameter storage: seeded initialization, trainability flags,
//! content hashing for frozen weights, and JSON (de)serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_ctx, Error, Result};
use crate::scalar::{s, to_f64, Scalar};

/// Flat map from parameter name to 2-D tensor.
///
/// Initialization is deterministic per name: each tensor draws from a stream
/// seeded by `base_seed ^ fnv1a(name)`, so adding or removing parameters
/// never shifts the values of the others.
pub struct ParamStore<T: Scalar> {
    base_seed: u64,
    params: BTreeMap<String, Array2<T>>,
    trainable: BTreeSet<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(base_seed: u64) -> Self {
        ParamStore {
            base_seed,
            params: BTreeMap::new(),
            trainable: BTreeSet::new(),
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>, trainable: bool) {
        let name = name.into();
        if trainable {
            self.trainable.insert(name.clone());
        } else {
            self.trainable.remove(&name);
        }
        self.params.insert(name, value);
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn init_normal(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        trainable: bool,
    ) {
        let name = name.into();
        let mut rng = self.rng_for(&name);
        let normal = rand_distr::Normal::new(0.0, std).expect("valid std");
        let value = Array2::from_shape_fn(shape, |_| s::<T>(normal.sample(&mut rng)));
        self.insert(name, value, trainable);
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: (usize, usize), trainable: bool) {
        self.insert(name, Array2::zeros(shape), trainable);
    }

    pub fn init_ones(&mut self, name: impl Into<String>, shape: (usize, usize), trainable: bool) {
        self.insert(name, Array2::from_elem(shape, T::one()), trainable);
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.base_seed ^ fnv1a(name))
    }

    pub fn get(&self, name: &str) -> &Array2<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<T> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<T>> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count over trainable tensors.
    pub fn trainable_elements(&self) -> usize {
        self.trainable
            .iter()
            .map(|n| self.params[n].len())
            .sum()
    }

    /// Total element count over frozen tensors.
    pub fn frozen_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| !self.trainable.contains(*n))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// SHA-256 over the frozen tensors (names, shapes, little-endian f64
    /// values, in name order). Training must leave this hash unchanged.
    pub fn frozen_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.params {
            if self.trainable.contains(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update((value.nrows() as u64).to_le_bytes());
            hasher.update((value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                hasher.update(to_f64(*v).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The full store as canonical JSON (exact float round trip).
    pub fn save_to_string(&self) -> Result<String> {
        let saved = SavedParams {
            dtype: T::DTYPE.to_string(),
            base_seed: self.base_seed,
            trainable: self.trainable.iter().cloned().collect(),
            params: self
                .params
                .iter()
                .map(|(name, value)| {
                    (
                        name.clone(),
                        SavedTensor {
                            shape: [value.nrows(), value.ncols()],
                            data: value.iter().map(|&v| to_f64(v)).collect(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&saved).map_err(|e| Error::input(format!("serialize params: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.save_to_string()?;
        io_ctx(std::fs::write(path, json), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io_ctx(std::fs::read_to_string(path), path)?;
        let saved: SavedParams = serde_json::from_str(&text)
            .map_err(|e| Error::input(format!("parse params {}: {e}", path.display())))?;
        let mut store = ParamStore::new(saved.base_seed);
        for (name, tensor) in saved.params {
            let [r, c] = tensor.shape;
            if tensor.data.len() != r * c {
                return Err(Error::input(format!(
                    "tensor {name:?} claims {r}x{c} but holds {} values",
                    tensor.data.len()
                )));
            }
            let value = Array2::from_shape_vec((r, c), tensor.data.iter().map(|&v| s(v)).collect())
                .expect("shape checked above");
            let trainable = saved.trainable.contains(&name);
            store.insert(name, value, trainable);
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedTensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SavedParams {
    dtype: String,
    base_seed: u64,
    trainable: Vec<String>,
    params: BTreeMap<String, SavedTensor>,
}

/// FNV-1a hash; stable across platforms, used to derive per-name seeds.
pub fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

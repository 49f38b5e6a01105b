//! Named learnable tensors and their initialization.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::{Tape, Var};
use crate::tensor::{numel, Float, Tensor};

/// How a freshly built parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
    /// Normal with std `sqrt(2 / fan_out)`.
    FanOut(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

fn sample(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::TruncNormal(std) => {
            let normal = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape, |_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break v as f32;
                }
            })
        }
        Init::FanOut(fan_out) => {
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
        }
    }
}

/// Ordered name → tensor map. Iteration follows insertion order.
#[derive(Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    entries: Vec<(String, Arc<Tensor<T>>)>,
    index: HashMap<String, usize>,
}

impl<T: Float> std::fmt::Debug for ParamStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.entries.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl ParamStore<f32> {
    /// Materialize `specs` in order from a seeded generator.
    pub fn initialize(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        for spec in specs {
            // each tensor draws from its own stream so shapes elsewhere do not shift it
            let mut sub = ChaCha8Rng::seed_from_u64(rng.gen());
            store
                .insert(spec.name.clone(), sample(spec.init, &spec.shape, &mut sub))
                .expect("parameter specs have unique names");
        }
        store
    }
}

impl<T: Float> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, Arc::new(value)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.entries[i].1)
    }

    /// Mutable access; copies only if a tape still holds the tensor.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.entries[i].1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), &**t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Element count of every tensor whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), Arc::new(t.cast()))).collect(),
            index: self.index.clone(),
        }
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Register every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound<T> {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf_shared(Arc::clone(t), requires_grad)))
            .collect();
        Bound { vars }
    }
}

/// Parameters registered on one tape episode.
pub struct Bound<T: Float = f32> {
    vars: HashMap<String, Var<T>>,
}

impl<T: Float> Bound<T> {
    /// Assemble from variables already on a tape.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not in the store")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients reached by backward, keyed by parameter name.
    pub fn grads(&self, tape: &Tape<T>) -> HashMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(n, v)| tape.grad(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

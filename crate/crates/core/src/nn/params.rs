use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::tensor::Real;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered, named collection of weight arrays.
///
/// The same structure doubles as a gradient buffer (see [`ParamSet::zeros_like`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), shape: p.shape.clone(), data: vec![T::zero(); p.data.len()] })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Flat scalar view: (param index, offset) for the `i`-th scalar.
    pub fn locate(&self, mut i: usize) -> (ParamId, usize) {
        for (pi, p) in self.params.iter().enumerate() {
            if i < p.data.len() {
                return (ParamId(pi), i);
            }
            i -= p.data.len();
        }
        panic!("scalar index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.data.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Hash of the layout (names and shapes) plus a caller supplied
    /// architecture description.
    pub fn arch_hash(&self, description: &str) -> String {
        let mut h = Sha256::new();
        h.update(description.as_bytes());
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Hash of names, shapes and the exact weight values (as `f32`).
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Registers parameters in order with seeded initialisation.
pub struct ParamSetBuilder<T> {
    set: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamSetBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self { set: ParamSet { params: Vec::new() }, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform_bound(name, shape, bound)
    }

    pub fn uniform_bound(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect();
        self.push(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n: usize = shape.iter().product();
        self.push(name, shape, vec![T::zero(); n])
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> ParamId {
        assert!(self.set.find(name).is_none(), "duplicate parameter {name}");
        self.set.params.push(Param { name: name.to_string(), shape: shape.to_vec(), data });
        ParamId(self.set.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.set.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.params.is_empty()
    }

    pub fn finish(self) -> ParamSet<T> {
        self.set
    }
}

//! Named parameter storage, graph binding and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Named weight tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across tensors whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.count_with_prefix("")
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Registers every tensor as a gradient-tracked leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.variable(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Registers every tensor as a constant leaf on `g` (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] as they live on one [`Graph`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics when `name` was never registered; parameter names are fixed
    /// by the architecture, so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Pulls the gradient of every bound parameter out of `grads`; parameters
    /// that did not influence the loss get a zero gradient.
    pub fn collect(&self, grads: &mut Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| Tensor::zeros(store.get(n).unwrap().shape()));
                (n.clone(), g)
            })
            .collect()
    }
}

/// Fan-in scaled uniform initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data)
}

/// A `rows × cols` matrix with orthonormal rows or columns (whichever is
/// shorter), from Gram-Schmidt on a Gaussian draw.
pub fn init_orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let (short, long) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, &x) in b.iter().enumerate() {
            if rows <= cols {
                data[i * cols + j] = x;
            } else {
                data[j * cols + i] = x;
            }
        }
    }
    Tensor::new(&[rows, cols], data)
}

pub fn init_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: ParamStore,
    pub second: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Tensor::zeros(p.shape()));
                self.second.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.first.get_mut(name).unwrap().data_mut();
            let v = self.second.get_mut(name).unwrap().data_mut();
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = learning_rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for (r, c) in [(4, 8), (8, 4), (5, 5)] {
            let m = init_orthogonal(&mut rng, r, c);
            let short_is_rows = r <= c;
            let n = r.min(c);
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = if short_is_rows {
                        (0..c).map(|k| m.data()[i * c + k] * m.data()[j * c + k]).sum()
                    } else {
                        (0..r).map(|k| m.data()[k * c + i] * m.data()[k * c + j]).sum()
                    };
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[3], vec![0.3, 0.1, -4.0]));
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        });
        adam.update(&mut params, &grads);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(&[2], vec![0.0, 0.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(&[2], vec![5.0, -0.01]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut params, &grads);
        let w = params.get("w").unwrap().data();
        assert!((w[0] + 1e-3).abs() < 1e-9);
        assert!((w[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn content_hash_tracks_values() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::new(&[2], vec![1.0, 2.0]));
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.get_mut("x").unwrap().data_mut()[1] = 2.0 + 1e-12;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}

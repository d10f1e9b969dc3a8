//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Ordered collection of named parameter matrices. Iteration order is
/// insertion order, which keeps training deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    /// Glorot-style normal init scaled by fan-in and fan-out.
    pub fn insert_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha20Rng) {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let v = Array2::from_shape_fn((rows, cols), |_| {
            // Box-Muller from two uniforms keeps us independent of the
            // rand_distr crate
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        self.insert(name, v);
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn insert_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::ones((rows, cols)));
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[idx]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Accumulated gradients keyed by parameter name.
pub type GradMap = HashMap<String, Array2<f64>>;

pub fn grad_map_add(acc: &mut GradMap, name: &str, g: &Array2<f64>) {
    match acc.get_mut(name) {
        Some(existing) => *existing += g,
        None => {
            acc.insert(name.to_string(), g.clone());
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Array2<f64>>,
    v: HashMap<String, Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every parameter that has a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        // iterate in parameter order for determinism
        for name in params.names().to_vec() {
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m *= self.beta1;
            *m += &(g * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *v *= self.beta2;
            *v += &(g.mapv(|t| t * t) * (1.0 - self.beta2));
            let mhat = &*m / bc1;
            let vhat = &*v / bc2;
            let update = mhat / (vhat.mapv(f64::sqrt) + self.eps) * self.lr;
            *params.get_mut(&name) -= &update;
        }
    }
}

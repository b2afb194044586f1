//! Named parameter storage, layer helpers built on [`Graph`], and Adam.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Gradients, Graph, Var};
use crate::tensor::{Shape, Tensor};
use crate::Scalar;

/// Ordered named tensors plus an architecture fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    fingerprint: String,
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        let previous = self.index.insert(name.clone(), self.entries.len());
        assert!(previous.is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new(self.fingerprint.clone());
        for (name, t) in &self.entries {
            let data = t.data().iter().map(|v| U::lit(v.as_f64())).collect();
            out.insert(name.clone(), Tensor::from_vec(t.shape(), data).expect("same length"));
        }
        out
    }

    /// Records every tensor in `g`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>, trainable: bool) -> Bound<'a, T> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] recorded into one graph.
pub struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    /// Pairs already-recorded vars (in store order) with `store`'s names.
    pub fn from_vars(store: &'a ParamStore<T>, vars: Vec<Var>) -> Self {
        assert_eq!(store.len(), vars.len(), "one var per parameter");
        Self { store, vars }
    }

    /// Panics when `name` is unknown.
    pub fn var(&self, name: &str) -> Var {
        match self.store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Gradients in store order, zero-filled for unused parameters.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(&self.store.entries)
            .map(|(&v, (_, t))| grads.wrt_or_zeros(v, t.shape()))
            .collect()
    }
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Fan-in scaled uniform initialization, `U(−1/√fan_in, 1/√fan_in)`.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform<T: Scalar>(&mut self, shape: Shape, fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data).expect("shape product")
    }

    /// `name.w: [cout, cin / groups, k, k]` and `name.b: [1, cout, 1, 1]`.
    pub fn conv<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, groups: usize) {
        let fan_in = cin / groups * k * k;
        store.insert(format!("{name}.w"), self.uniform([cout, cin / groups, k, k], fan_in));
        store.insert(format!("{name}.b"), self.uniform([1, cout, 1, 1], fan_in));
    }

    /// A dense layer stored as a 1×1 convolution.
    pub fn linear<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) {
        self.conv(store, name, din, dout, 1, 1);
    }

    /// `name.gamma = 1`, `name.beta = 0`.
    pub fn norm<T: Scalar>(&mut self, store: &mut ParamStore<T>, name: &str, channels: usize) {
        store.insert(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], T::one()));
        store.insert(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]));
    }
}

pub fn conv<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_, T>, name: &str, x: Var, spec: ConvSpec) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    g.conv2d(x, w, Some(b), spec)
}

/// Dense layer over the channel axis of `[n, d, h, w]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_, T>, name: &str, x: Var) -> Var {
    conv(g, p, name, x, ConvSpec::same(1))
}

pub fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bound<'_, T>, name: &str, x: Var) -> Var {
    let groups = group_count(g.shape(x)[1]);
    let gamma = p.var(&format!("{name}.gamma"));
    let beta = p.var(&format!("{name}.beta"));
    g.group_norm(x, gamma, beta, groups)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads` follows store order.
    pub fn update<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, param) in store.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, g)) in param.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *p = T::lit(p.as_f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counts() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(12), 4);
        assert_eq!(group_count(6), 2);
        assert_eq!(group_count(3), 1);
    }

    #[test]
    fn store_bookkeeping() {
        let mut s = ParamStore::<f32>::new("demo");
        let mut init = Initializer::new(1);
        init.conv(&mut s, "c", 4, 6, 3, 2);
        init.norm(&mut s, "n", 6);
        assert_eq!(s.len(), 4);
        assert_eq!(s.parameter_count(), 6 * 2 * 9 + 6 + 12);
        assert_eq!(s.get("c.w").unwrap().shape(), [6, 2, 3, 3]);
        let bound = 1.0 / 18f32.sqrt();
        assert!(s.get("c.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(s.cast::<f64>().cast::<f32>(), s);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(p) = Σ (p − 3)², one-dimensional bowl per entry.
        let mut s = ParamStore::<f64>::new("q");
        s.insert("p", Tensor::zeros([1, 1, 1, 4]));
        let mut opt = Adam::new(&s, AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = s.bind(&mut g, true);
            let target = g.constant(Tensor::full([1, 1, 1, 4], 3.0));
            let d = g.sub(b.var("p"), target);
            let sq = g.square(d);
            let loss = g.mean(sq);
            let grads = b.gradients(&g.backward(loss));
            opt.update(&mut s, &grads);
        }
        assert!(s.get("p").unwrap().data().iter().all(|v| (v - 3.0).abs() < 1e-3));
        assert_eq!(opt.steps_taken(), 2000);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new("q");
        s.insert("p", Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap());
        let mut opt = Adam::new(&s, AdamConfig { lr: 0.1, ..Default::default() });
        opt.update(&mut s, &[Tensor::from_vec([1, 1, 1, 2], vec![5.0, -0.01]).unwrap()]);
        let p = s.get("p").unwrap().data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 1.1).abs() < 1e-5);
    }
}

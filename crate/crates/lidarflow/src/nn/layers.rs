//! Named parameter storage and the basic trainable layers.

use super::{Graph, Real, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named tensor parameters for one model.
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// FNV-1a hash of the raw little-endian bytes of selected parameters.
    pub fn content_hash(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for id in self.ids() {
            if !filter(self.name(id)) {
                continue;
            }
            let mut bytes = Vec::new();
            for &v in self.get(id).iter() {
                v.write_le(&mut bytes);
            }
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Per-graph binding of parameters to tape leaves with a trainability policy.
pub struct Binder {
    cache: HashMap<usize, Var>,
    trainable: Box<dyn Fn(&str) -> bool>,
}

impl Binder {
    /// All bound parameters participate in gradients.
    pub fn trainable_all() -> Self {
        Binder {
            cache: HashMap::new(),
            trainable: Box::new(|_| true),
        }
    }

    /// No bound parameter receives a gradient.
    pub fn frozen_all() -> Self {
        Binder {
            cache: HashMap::new(),
            trainable: Box::new(|_| false),
        }
    }

    /// Trainability decided per parameter name.
    pub fn with_policy(policy: impl Fn(&str) -> bool + 'static) -> Self {
        Binder {
            cache: HashMap::new(),
            trainable: Box::new(policy),
        }
    }

    pub fn bind<T: Real>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id.0) {
            return v;
        }
        let value = store.get(id).clone();
        let var = if (self.trainable)(store.name(id)) {
            g.leaf(value)
        } else {
            g.constant(value)
        };
        self.cache.insert(id.0, var);
        var
    }

    /// Collect parameter gradients after a backward pass, keyed by id.
    pub fn grads<T: Real>(
        &self,
        grads: &mut super::Grads<T>,
    ) -> std::collections::BTreeMap<ParamId, ArrayD<T>> {
        let mut out = std::collections::BTreeMap::new();
        for (&pid, &var) in &self.cache {
            if let Some(g) = grads.take(var) {
                out.insert(ParamId(pid), g);
            }
        }
        out
    }
}

/// Dense layer `y = x W + b` applied over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            init_uniform::<T>(&[fan_in, fan_out], fan_in, rng),
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
        Linear { w, b }
    }

    /// Variant initialized to exactly zero (identity-at-start modulation).
    pub fn new_zeros<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), ArrayD::zeros(IxDyn(&[fan_in, fan_out])));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
        Linear { w, b }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder,
        store: &ParamStore<T>,
        x: Var,
    ) -> Var {
        let w = bind.bind(g, store, self.w);
        let b = bind.bind(g, store, self.b);
        let y = g.matmul_lastdim(x, w);
        g.add_bias_last(y, b)
    }
}

/// Convolution layer with weights in a store.
#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: (usize, usize),
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(
            &format!("{name}.w"),
            init_uniform::<T>(&[out_ch, in_ch, k, k], fan_in, rng),
        );
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_ch])));
        ConvLayer { w, b, stride }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder,
        store: &ParamStore<T>,
        x: Var,
    ) -> Var {
        let w = bind.bind(g, store, self.w);
        let b = bind.bind(g, store, self.b);
        g.conv2d(x, w, b, self.stride)
    }
}

/// GroupNorm layer with affine parameters in a store.
#[derive(Clone, Copy, Debug)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize, groups: usize) -> Self {
        let gamma = store.add(&format!("{name}.g"), ArrayD::from_elem(IxDyn(&[ch]), T::one()));
        let beta = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[ch])));
        GroupNormLayer { gamma, beta, groups }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binder,
        store: &ParamStore<T>,
        x: Var,
    ) -> Var {
        let ga = bind.bind(g, store, self.gamma);
        let be = bind.bind(g, store, self.beta);
        g.group_norm(x, ga, be, self.groups, T::from_f64(1e-6))
    }
}

/// Uniform init over `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

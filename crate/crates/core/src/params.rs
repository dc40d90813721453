//! Named parameter storage and per-pass graph binding.
//!
//! A [`ParamStore`] owns every learnable tensor of a model under a unique
//! dotted name, in registration order. Each forward pass opens a [`Binder`]
//! over the store: the first use of a name clones the tensor onto the graph
//! as a leaf and later uses return the same node, so gradients accumulate
//! correctly even when a parameter appears several times.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::tensor::{invalid, Result, Tensor};

#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Register a new parameter. Names must be unique.
    pub fn register(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(invalid("param_store", format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    /// Replace a parameter's value; the shape must not change.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| invalid("param_store", format!("unknown parameter {name:?}")))?;
        if self.entries[i].1.shape() != t.shape() {
            return Err(invalid(
                "param_store",
                format!(
                    "shape change for {name:?}: {:?} -> {:?}",
                    self.entries[i].1.shape(),
                    t.shape()
                ),
            ));
        }
        self.entries[i].1 = t;
        Ok(())
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Per-forward-pass view of a [`ParamStore`].
pub struct Binder<'s> {
    store: &'s ParamStore,
    trainable: bool,
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Binder<'s> {
        Binder { store, trainable, vars: HashMap::new(), order: Vec::new() }
    }

    /// Fetch (or reuse) the graph node for a named parameter.
    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| invalid("binder", format!("unknown parameter {name:?}")))?;
        let v = g.leaf(t.clone(), self.trainable);
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Every binding made so far, in first-use order.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(move |n| (n.as_str(), self.vars[n]))
    }
}

/// Collect gradients for all bound parameters after a backward pass.
/// Parameters the loss never reached get zero gradients.
pub fn collect_grads(g: &Graph, binder: &Binder) -> Vec<(String, Vec<f64>)> {
    binder
        .bound()
        .map(|(name, v)| {
            let grad = g
                .grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.val(v).numel()]);
            (name.to_string(), grad)
        })
        .collect()
}

/// Truncated normal draw: resample anything outside two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::from_vec(shape, data).expect("trunc_normal shape")
}

//! Named parameter storage, initialisation and graph binding.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        let mut p = Self::new();
        for (n, t) in entries {
            p.insert(n, t);
        }
        p
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Copy every tensor of `other` whose name exists here, checking shapes.
    pub fn load_from(&mut self, other: &Params) -> Result<usize> {
        let mut n = 0;
        for (name, t) in other.iter() {
            if let Some(dst) = self.get_mut(name) {
                if dst.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: checkpoint shape {:?} != model shape {:?}",
                        t.dims(),
                        dst.dims()
                    )));
                }
                *dst = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    /// Put every parameter on `g`; those selected by `trainable` as leaves,
    /// the rest as constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable(n) { g.leaf(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Binding { vars }
    }
}

/// Parameter name → graph node for one forward pass.
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    /// Bind explicit graph nodes to parameter names.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Binding { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Gradients of the bound trainable parameters, by name.
    pub fn collect_grads(&self, grads: &Gradients) -> HashMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

/// Normal(0, `std`) truncated to ±2 std.
pub fn truncated_normal(dims: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(dims, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Registers layers under a name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub params: &'a mut Params,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    /// `k×k×cin×cout` weight and zero bias.
    pub fn conv2d(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        let w = truncated_normal(&[k, k, cin, cout], INIT_STD, self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    pub fn conv3d(&mut self, name: &str, kt: usize, k: usize, cin: usize, cout: usize) {
        let w = truncated_normal(&[kt, k, k, cin, cout], INIT_STD, self.rng);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    /// 3-D conv with all-zero weights and bias (residual update branches).
    pub fn conv3d_zero(&mut self, name: &str, kt: usize, k: usize, cin: usize, cout: usize) {
        self.params.insert(format!("{name}.w"), Tensor::zeros(&[kt, k, k, cin, cout]));
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

impl Graph {
    /// Apply the conv layer `name` (`name.w`, `name.b`); 2-D or 3-D by weight rank.
    pub fn conv_layer(&mut self, b: &Binding, name: &str, x: Var) -> Result<Var> {
        let w = b.var(&format!("{name}.w"))?;
        let bias = b.var(&format!("{name}.b"))?;
        if self.value(w).rank() == 5 {
            self.conv3d(x, w, bias)
        } else {
            self.conv2d(x, w, bias)
        }
    }
}

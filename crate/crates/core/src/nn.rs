//! Parameter storage, layers and the SGD optimizer.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Grads, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Trainable-group tag. Freezing a group excludes it from gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Backbone,
    Head,
    Embedding,
    Fusion,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Arc<Tensor<T>>,
    pub decay: bool,
}

/// Flat parameter store. Parameter ids are indices into it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    frozen: Vec<Group>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), frozen: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>, decay: bool) -> usize {
        self.params.push(Param { name: name.into(), group, value: Arc::new(value), decay });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set(&mut self, id: usize, value: Tensor<T>) {
        assert_eq!(value.shape(), self.params[id].value.shape(), "parameter {} shape", self.params[id].name);
        self.params[id].value = Arc::new(value);
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        self.frozen.retain(|g| *g != group);
        if frozen {
            self.frozen.push(group);
        }
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        !self.frozen.contains(&self.params[id].group)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts parameter `id` on the graph.
    pub fn var<'g>(&self, g: &'g Graph<T>, id: usize) -> Var<'g, T> {
        g.param(id, &self.params[id].value, self.is_trainable(id))
    }
}

/// A 2-D convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Registers a Kaiming-normal initialised convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<T> = (0..cout * cin * k * k).map(|_| T::lit({ let z: f64 = StandardNormal.sample(rng); z * std })).collect();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            Tensor::from_vec(&[cout, cin, k, k], w).unwrap(),
            true,
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]), false);
        Self { weight, bias, stride, pad }
    }

    pub fn forward<'g, T: Scalar>(&self, store: &ParamStore<T>, x: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        x.conv2d(store.var(g, self.weight), Some(store.var(g, self.bias)), self.stride, self.pad)
    }

    /// Rescales the initial weights and sets a constant bias.
    pub fn reinit<T: Scalar>(&self, store: &mut ParamStore<T>, weight_scale: f64, bias: f64) {
        let w = store.get(self.weight).value.map(|v| v * T::lit(weight_scale));
        store.set(self.weight, w);
        let b = Tensor::full(store.get(self.bias).value.shape(), T::lit(bias));
        store.set(self.bias, b);
    }
}

/// SGD with momentum and L2 weight decay: `v = m*v + g + wd*w; w -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Global L2 norm of the gradients of all trainable parameters.
    pub fn grad_norm(store: &ParamStore<T>, grads: &Grads<T>) -> T {
        (0..store.len())
            .filter_map(|id| grads.param(id))
            .map(|g| g.sq_norm())
            .sum::<T>()
            .sqrt()
    }

    /// Applies one update. Gradients are scaled by `clip / norm` when their
    /// global norm exceeds `clip`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: T, clip: Option<T>) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let scale = match clip {
            Some(c) => {
                let n = Self::grad_norm(store, grads);
                if n > c {
                    c / n
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        for id in 0..store.len() {
            let Some(g) = grads.param(id) else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get(id);
            let wd = if p.decay { self.weight_decay } else { T::zero() };
            let mut w = (*p.value).clone();
            let v = self.velocity[id].get_or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = self.momentum * *vi + gi * scale + wd * *wi;
                *wi -= lr * *vi;
            }
            store.set(id, w);
        }
    }
}

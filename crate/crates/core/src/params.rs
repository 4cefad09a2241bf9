//! Named parameter storage and per-pass binding onto a [`Tape`].

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ndtensor::{Gradients, Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, insertion-ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        t.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds `scale · g` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>], scale: f64) {
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = g {
                if scale == 1.0 {
                    t.accumulate_grad(g);
                } else {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    t.accumulate_grad(&scaled);
                }
            }
        }
    }

    /// Copy with every value rounded through `f32`, i.e. exactly what a
    /// checkpoint round trip yields.
    pub fn quantized_f32(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.zero_grad();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = f64::from(*v as f32));
        }
        out
    }
}

/// Seeded initializer for model parameters.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform values for a weight with the given fan-in/fan-out.
    pub fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(shape, limit)
    }

    pub fn uniform(&mut self, shape: &[usize], limit: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        Tensor::new(shape, data).expect("shape")
    }
}

/// Binds stored parameters onto a tape as leaves, once per pass.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t, 's> Binder<'t, 's> {
    /// Parameters become differentiable leaves.
    pub fn train(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters become constants; nothing is kept for a backward pass.
    pub fn infer(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'t Tape, store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, t: &Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Per-parameter gradients in store order (`None` if unused).
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.wrt(v).map(<[f64]>::to_vec)))
            .collect()
    }
}

/// Affine layer `x·W + b` with `W: [d_in, d_out]`; the bias is optional.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    pub fn new(
        store: &mut ParamStore,
        init: &mut ParamInit,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.glorot(&[d_in, d_out], d_in, d_out),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// Purely linear map `x·W`.
    pub fn without_bias(
        store: &mut ParamStore,
        init: &mut ParamInit,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.glorot(&[d_in, d_out], d_in, d_out),
        );
        Self {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        match self.bias {
            Some(bias) => x.linear(b.p(self.weight), b.p(bias)),
            None => x.matmul(b.p(self.weight)),
        }
    }

    /// Overwrites the weight and bias (used to build exact configurations).
    /// `bias` is ignored for a layer without one.
    pub fn set(&self, store: &mut ParamStore, weight: &[f64], bias: &[f64]) {
        store.get_mut(self.weight).data_mut().copy_from_slice(weight);
        if let Some(id) = self.bias {
            store.get_mut(id).data_mut().copy_from_slice(bias);
        }
    }
}

/// Layer normalization parameters over a width-`d` axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layernorm(b.p(self.gamma), b.p(self.beta))
    }
}

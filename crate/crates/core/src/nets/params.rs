use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    decay: bool,
}

/// Named trainable tensors, each with a gradient slot of the same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_owned(),
            grad: Tensor::zeros(value.rows(), value.cols()),
            value,
            decay,
        });
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.params[id.0].decay
    }

    /// Value and gradient of a parameter, the gradient mutable.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn total_size(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Per-parameter gradients extracted from one backward pass.
#[derive(Clone, Debug)]
pub struct ParamGrads(Vec<Option<Tensor>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0[id.0].as_ref()
    }
}

/// A tape with every parameter of a store bound as a leaf.
pub struct Graph {
    pub tape: Tape,
    vars: Vec<Var>,
}

impl Graph {
    /// Binds parameters as differentiable leaves.
    pub fn new(store: &ParamStore) -> Self {
        Self::bind(store, true)
    }

    /// Binds parameters as constants; for forward-only evaluation.
    pub fn frozen(store: &ParamStore) -> Self {
        Self::bind(store, false)
    }

    fn bind(store: &ParamStore, trainable: bool) -> Self {
        let tape = Tape::new();
        let vars = store
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Self { tape, vars }
    }

    #[inline]
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn backward(&self, loss: Var) -> ParamGrads {
        let grads: Grads = self.tape.backward(loss);
        ParamGrads(self.vars.iter().map(|&v| grads.get(v).cloned()).collect())
    }
}

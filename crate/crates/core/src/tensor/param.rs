//! Named, grouped trainable parameters.

use super::{Gradients, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Expert MLP weights inside MoE layers.
    Experts,
    /// Classifier head.
    Head,
    /// Everything else in the vision model.
    Backbone,
    /// Location encoder FFN and per-block projectors.
    LocProj,
}

/// A value tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Frozen parameters join the graph as constants and are skipped by the
    /// optimizer; their bytes never change.
    pub frozen: bool,
}

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of parameters; indices are stable after insertion.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<S: Scalar> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<S>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            group,
            value,
            grad,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<S>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Mark every parameter in a group as frozen/unfrozen.
    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut() {
            if p.group == group {
                p.frozen = frozen;
            }
        }
    }

    /// Pull gradients accumulated in a graph back into `grad` fields.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients<S>) {
        for &(id, var) in &binding.pairs {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[id.0];
                let sum: Vec<S> = p
                    .grad
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &b)| a + b)
                    .collect();
                p.grad = Tensor::from_vec(p.value.shape().to_vec(), sum)
                    .expect("gradient shape matches parameter shape");
            }
        }
    }

    /// Convert the whole set to another precision (used by verification).
    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    frozen: p.frozen,
                })
                .collect(),
        }
    }
}

/// Records which graph leaf each parameter was bound to in one forward pass.
#[derive(Default)]
pub struct Binding {
    pub(crate) pairs: Vec<(ParamId, Var)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter into the graph as a leaf and remember the pairing.
    /// Frozen parameters enter as constants.
    pub fn bind<S: Scalar>(&mut self, g: &mut Graph<S>, set: &ParamSet<S>, id: ParamId) -> Var {
        let p = set.get(id);
        let var = g.leaf(p.value.clone(), !p.frozen);
        self.pairs.push((id, var));
        var
    }
}

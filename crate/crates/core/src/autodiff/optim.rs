use std::ops::Index;

use crate::scalar::Scalar;

use super::array::DenseArray;
use super::graph::{Gradients, Graph, NodeId};
use super::AutodiffError;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors owned by one model component.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<DenseArray<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: DenseArray<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseArray<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray<S> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(DenseArray::len).sum()
    }

    /// Overwrites a tensor, keeping its name. The shape must not change.
    pub fn set(&mut self, id: ParamId, value: DenseArray<S>) -> Result<(), AutodiffError> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set",
                node: id.0,
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Adds every tensor to `graph` as a parameter leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> BoundParams {
        BoundParams(self.values.iter().map(|v| graph.parameter(v.clone())).collect())
    }

    /// Adds every tensor to `graph` as a constant (no gradients flow into it).
    pub fn bind_frozen(&self, graph: &mut Graph<S>) -> BoundParams {
        BoundParams(self.values.iter().map(|v| graph.constant(v.clone())).collect())
    }

    pub fn zero_grads(&self) -> ParamGrads<S> {
        ParamGrads(self.values.iter().map(DenseArray::zeros_like).collect())
    }
}

/// Graph nodes a [`ParamStore`] was bound to, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<NodeId>);

impl BoundParams {
    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }

    /// Gathers the gradients of the bound leaves.
    pub fn collect<S: Scalar>(&self, store: &ParamStore<S>, grads: &Gradients<S>) -> ParamGrads<S> {
        ParamGrads(
            self.0
                .iter()
                .zip(&store.values)
                .map(|(&node, value)| {
                    grads
                        .get(node)
                        .cloned()
                        .unwrap_or_else(|| DenseArray::zeros_like(value))
                })
                .collect(),
        )
    }
}

impl Index<ParamId> for BoundParams {
    type Output = NodeId;

    fn index(&self, id: ParamId) -> &NodeId {
        &self.0[id.0]
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<S>(pub(crate) Vec<DenseArray<S>>);

impl<S: Scalar> ParamGrads<S> {
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, by: S) {
        self.0.iter_mut().for_each(|g| g.scale(by));
    }

    pub fn zero(&mut self) {
        self.0.iter_mut().for_each(DenseArray::fill_zero);
    }

    pub fn norm_sq(&self) -> S {
        self.0.iter().map(DenseArray::norm_sq).sum()
    }

    pub fn get(&self, id: ParamId) -> &DenseArray<S> {
        &self.0[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(DenseArray::is_finite)
    }
}

/// Plain stochastic gradient descent with optional global-norm clipping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd<S> {
    pub learning_rate: S,
    pub clip_norm: Option<S>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(learning_rate: S) -> Self {
        Self {
            learning_rate,
            clip_norm: None,
        }
    }

    pub fn with_clip(mut self, clip_norm: Option<S>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    /// `p ← p − lr·g` over every (store, gradient) pair, after scaling all
    /// gradients jointly so their global norm does not exceed `clip_norm`.
    /// Gradients are zeroed afterwards. Returns the pre-clip global norm.
    pub fn step(&self, groups: &mut [(&mut ParamStore<S>, &mut ParamGrads<S>)]) -> Result<S, AutodiffError> {
        if !(self.learning_rate >= S::zero()) {
            return Err(AutodiffError::InvalidLearningRate(
                self.learning_rate.to_f64_lossy(),
            ));
        }
        if groups.iter().any(|(_, g)| !g.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient);
        }
        let norm = groups.iter().map(|(_, g)| g.norm_sq()).sum::<S>().sqrt();
        let mut factor = self.learning_rate;
        if let Some(clip) = self.clip_norm {
            if norm > clip && norm > S::zero() {
                factor = factor * clip / norm;
            }
        }
        for (store, grads) in groups.iter_mut() {
            for (p, g) in store.values.iter_mut().zip(grads.0.iter()) {
                for (pv, &gv) in p.values_mut().iter_mut().zip(g.values()) {
                    *pv = *pv - factor * gv;
                }
            }
            grads.zero();
        }
        Ok(norm)
    }
}

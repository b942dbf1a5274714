//! Parameter storage with optimizer-ownership tags.
//!
//! Every parameter belongs to exactly one optimizer group; the training loop
//! asserts the partition covers the whole store.

use crate::tensor::{Graph, NodeId, Tensor};
use ndarray::IxDyn;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(idx: usize) -> ParamId {
        ParamId(idx)
    }
}

/// Which optimizer owns a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimGroup {
    /// Segmentation branch plus all projection heads (adaptive-moment).
    SegAdam,
    /// Classification branch plus the inter-task attention module
    /// (momentum SGD, weight decay 1e-4).
    ClsSgd,
}

#[derive(Debug)]
pub struct ParamStore {
    values: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<OptimGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            values: Vec::new(),
            names: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: OptimGroup, value: Tensor) -> ParamId {
        self.values.push(value);
        self.names.push(name.into());
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> OptimGroup {
        self.groups[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Binds every parameter into a graph as leaves; `track` controls
    /// whether gradients are accumulated.
    pub fn bind_all(&self, g: &mut Graph, track: bool) -> BoundParams {
        let nodes = self
            .values
            .iter()
            .map(|v| {
                if track {
                    g.input(v.clone())
                } else {
                    g.constant(v.clone())
                }
            })
            .collect();
        BoundParams { nodes }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph nodes for every parameter of one forward pass.
pub struct BoundParams {
    nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }
}

/// He-normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), data).expect("he_normal shape")
}

//! Building blocks: convolution, group norm, linear, and residual blocks.

use super::params::{he_normal, BoundParams, OptimGroup, ParamId, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};
use ndarray::IxDyn;
use rand::Rng;

/// Largest group count in {8,4,2,1} dividing the channel width.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2, 1] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: OptimGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let pad = k / 2;
        let w = store.add(
            format!("{name}.w"),
            group,
            he_normal(&[cout, cin, k, k], cin * k * k, rng),
        );
        let b = store.add(
            format!("{name}.b"),
            group,
            Tensor::zeros(IxDyn(&[cout])),
        );
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> NodeId {
        g.conv2d(x, p.node(self.w), p.node(self.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: OptimGroup, channels: usize) -> Self {
        GroupNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                group,
                Tensor::from_elem(IxDyn(&[channels]), 1.0),
            ),
            beta: store.add(
                format!("{name}.beta"),
                group,
                Tensor::zeros(IxDyn(&[channels])),
            ),
            groups: norm_groups(channels),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> NodeId {
        g.group_norm(x, p.node(self.gamma), p.node(self.beta), self.groups, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: OptimGroup,
        n_in: usize,
        n_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            w: store.add(
                format!("{name}.w"),
                group,
                he_normal(&[n_in, n_out], n_in, rng),
            ),
            b: store.add(format!("{name}.b"), group, Tensor::zeros(IxDyn(&[n_out]))),
        }
    }

    /// x [N,in] -> [N,out]
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> NodeId {
        let y = g.matmul(x, p.node(self.w));
        g.add(y, p.node(self.b))
    }
}

/// conv -> group norm -> relu
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: OptimGroup,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv"), group, cin, cout, k, stride, rng),
            norm: GroupNorm::new(store, &format!("{name}.norm"), group, cout),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> NodeId {
        let y = self.conv.forward(g, p, x);
        let y = self.norm.forward(g, p, y);
        g.relu(y)
    }
}

/// Residual basic block: two 3x3 convs with a projection shortcut when the
/// shape changes.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: OptimGroup,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shortcut = if cin != cout || stride != 1 {
            Some((
                Conv2d::new(store, &format!("{name}.short.conv"), group, cin, cout, 1, stride, rng),
                GroupNorm::new(store, &format!("{name}.short.norm"), group, cout),
            ))
        } else {
            None
        };
        BasicBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), group, cin, cout, 3, stride, rng),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), group, cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), group, cout, cout, 3, 1, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), group, cout),
            shortcut,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> NodeId {
        let y = self.conv1.forward(g, p, x);
        let y = self.norm1.forward(g, p, y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, p, y);
        let y = self.norm2.forward(g, p, y);
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(g, p, x);
                norm.forward(g, p, s)
            }
            None => x,
        };
        let sum = g.add(y, skip);
        g.relu(sum)
    }
}

//! A small reverse-mode autodiff engine over `ndarray` tensors (f64).
//!
//! Each training step builds a fresh [`Graph`] (a tape of [`Node`]s), runs
//! forward math eagerly as nodes are created, then walks the tape backwards
//! once from a scalar loss. Values are `ArrayD<f64>`; double precision keeps
//! finite-difference gradient oracles tight.
//!
//! Elementwise binary ops broadcast with NumPy alignment rules; gradients of
//! broadcast operands are reduced back to the operand shape.

mod conv;
pub mod check;

pub use conv::{col2im, im2col};

use crate::error::{HermesError, Result};
use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use rayon::prelude::*;

pub type Tensor = ArrayD<f64>;

/// Convenience constructor for a scalar tensor (0-dim).
pub fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxisKeep(NodeId, usize),
    Reshape(NodeId),
    Matmul(NodeId, NodeId),
    /// a [m,k] x b[n,k]^T -> [m,n]
    MatmulTB(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    UpsampleNearest2(NodeId),
    GlobalAvgPool(NodeId),
    ChannelMean(NodeId),
    ChannelMax {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Concat {
        axis: usize,
        parts: Vec<NodeId>,
    },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSoftmax {
        x: NodeId,
        axis: usize,
    },
    L2Normalize {
        x: NodeId,
        axis: usize,
        eps: f64,
    },
    GatherClass {
        x: NodeId,
        targets: Vec<u32>,
    },
    GatherPixels {
        x: NodeId,
        coords: Vec<(usize, usize, usize)>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    op: Op,
}

/// The autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sums `grad` over broadcast axes so it matches `shape`.
fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if gd != sd {
            debug_assert_eq!(sd, 1);
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    g
}

fn binary_elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = broadcast_shapes(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast a");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast b");
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a constant (no gradient tracked).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Inserts a differentiable leaf (parameter or tracked input).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        *v.iter().next().expect("empty tensor")
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_elementwise(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_elementwise(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_elementwise(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = binary_elementwise(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| -x);
        let ng = self.needs(a);
        self.push(v, ng, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| c * x);
        let ng = self.needs(a);
        self.push(v, ng, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x + c);
        let ng = self.needs(a);
        self.push(v, ng, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, ng, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, ng, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, ng, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        let ng = self.needs(a);
        self.push(v, ng, Op::Ln(a))
    }

    // ---- reductions / shape ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, ng, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let v = scalar(self.value(a).sum() / n);
        let ng = self.needs(a);
        self.push(v, ng, Op::Mean(a))
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let ng = self.needs(a);
        self.push(v, ng, Op::SumAxisKeep(a, axis))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.needs(a);
        self.push(v, ng, Op::Reshape(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::Matmul(a, b))
    }

    /// `a [m,k] . b[n,k]^T -> [m,n]`
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv.t()).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, ng, Op::MatmulTB(a, b))
    }

    // ---- convolution and spatial ops ----

    /// 2D convolution, NCHW layout, zero padding.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let v = conv::conv2d_forward(&xv, &wv, &bv, stride, pad);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, ng, Op::Conv2d { x, w, b, stride, pad })
    }

    /// 2x2 max pooling with stride 2.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (v, argmax) = conv::max_pool2_forward(&xv);
        let ng = self.needs(x);
        self.push(v, ng, Op::MaxPool2 { x, argmax })
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let v = conv::upsample_nearest2_forward(&xv);
        let ng = self.needs(x);
        self.push(v, ng, Op::UpsampleNearest2(x))
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                out[(i, j)] = xv.index_axis(Axis(0), i).index_axis(Axis(0), j).sum()
                    / (h * w) as f64;
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::GlobalAvgPool(x))
    }

    /// [N,C,H,W] -> [N,1,H,W] mean over channels.
    pub fn channel_mean(&mut self, x: NodeId) -> NodeId {
        let c = self.value(x).shape()[1] as f64;
        let v = self
            .value(x)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .mapv(|t| t / c);
        let ng = self.needs(x);
        self.push(v, ng, Op::ChannelMean(x))
    }

    /// [N,C,H,W] -> [N,1,H,W] max over channels.
    pub fn channel_max(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<f64>::zeros((n, 1, h, w));
        let mut argmax = vec![0u32; n * h * w];
        for i in 0..n {
            for y in 0..h {
                for x_ in 0..w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_c = 0;
                    for j in 0..c {
                        let v = xv[(i, j, y, x_)];
                        if v > best {
                            best = v;
                            best_c = j;
                        }
                    }
                    out[(i, 0, y, x_)] = best;
                    argmax[(i * h + y) * w + x_] = best_c as u32;
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::ChannelMax { x, argmax })
    }

    /// Concatenation along `axis`.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayViewD<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(
            v,
            ng,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        )
    }

    /// Group normalization over [N,C,H,W] with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert!(c % groups == 0, "groups {groups} must divide channels {c}");
        let cg = c / groups;
        let gsz = (cg * h * w) as f64;
        let mut out = ndarray::Array4::<f64>::zeros((n, c, h, w));
        let mut means = vec![0.0f64; n * groups];
        let mut inv_stds = vec![0.0f64; n * groups];
        for i in 0..n {
            for g in 0..groups {
                let c0 = g * cg;
                let mut s = 0.0;
                let mut s2 = 0.0;
                for j in c0..c0 + cg {
                    for y in 0..h {
                        for x_ in 0..w {
                            let v = xv[(i, j, y, x_)];
                            s += v;
                            s2 += v * v;
                        }
                    }
                }
                let m = s / gsz;
                let var = (s2 / gsz - m * m).max(0.0);
                let inv = 1.0 / (var + eps).sqrt();
                means[i * groups + g] = m;
                inv_stds[i * groups + g] = inv;
                for j in c0..c0 + cg {
                    for y in 0..h {
                        for x_ in 0..w {
                            let xh = (xv[(i, j, y, x_)] - m) * inv;
                            out[(i, j, y, x_)] = gv[j] * xh + bv[j];
                        }
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out.into_dyn(),
            ng,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                inv_std: inv_stds,
            },
        )
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let xv = self.value(x);
        let mx = xv.fold_axis(Axis(axis), f64::NEG_INFINITY, |a, &b| a.max(b));
        let mx = mx.insert_axis(Axis(axis));
        let shifted = xv - &mx;
        let lse = shifted
            .mapv(f64::exp)
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis))
            .mapv(f64::ln);
        let v = shifted - &lse;
        let ng = self.needs(x);
        self.push(v, ng, Op::LogSoftmax { x, axis })
    }

    /// Softmax along `axis`, composed as exp(log_softmax).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let ls = self.log_softmax(x, axis);
        self.exp(ls)
    }

    /// L2 normalization along `axis`: y = x / sqrt(sum x^2 + eps).
    pub fn l2_normalize(&mut self, x: NodeId, axis: usize, eps: f64) -> NodeId {
        let xv = self.value(x);
        let norm = xv
            .mapv(|t| t * t)
            .sum_axis(Axis(axis))
            .insert_axis(Axis(axis))
            .mapv(|t| (t + eps).sqrt());
        let v = xv / &norm;
        let ng = self.needs(x);
        self.push(v, ng, Op::L2Normalize { x, axis, eps })
    }

    /// Picks the target-class entry along axis 1.
    /// [N,C] with targets [N] -> [N]; [N,C,H,W] with targets [N*H*W] -> [N,H,W].
    pub fn gather_class(&mut self, x: NodeId, targets: Vec<u32>) -> NodeId {
        let xv = self.value(x);
        let v = match xv.ndim() {
            2 => {
                let a = xv.view().into_dimensionality::<Ix2>().unwrap();
                let (n, _c) = a.dim();
                assert_eq!(targets.len(), n);
                ndarray::Array1::from_iter((0..n).map(|i| a[(i, targets[i] as usize)])).into_dyn()
            }
            4 => {
                let a = xv.view().into_dimensionality::<Ix4>().unwrap();
                let (n, _c, h, w) = a.dim();
                assert_eq!(targets.len(), n * h * w);
                let mut out = ndarray::Array3::<f64>::zeros((n, h, w));
                for i in 0..n {
                    for y in 0..h {
                        for x_ in 0..w {
                            let t = targets[(i * h + y) * w + x_] as usize;
                            out[(i, y, x_)] = a[(i, t, y, x_)];
                        }
                    }
                }
                out.into_dyn()
            }
            d => panic!("gather_class expects 2- or 4-dim input, got {d}"),
        };
        let ng = self.needs(x);
        self.push(v, ng, Op::GatherClass { x, targets })
    }

    /// Gathers per-location embedding vectors: x [N,D,h,w] + coords -> [K,D].
    pub fn gather_pixels(&mut self, x: NodeId, coords: Vec<(usize, usize, usize)>) -> NodeId {
        let a = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (_n, d, _h, _w) = a.dim();
        let mut out = ndarray::Array2::<f64>::zeros((coords.len(), d));
        for (k, &(i, y, x_)) in coords.iter().enumerate() {
            for j in 0..d {
                out[(k, j)] = a[(i, j, y, x_)];
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::GatherPixels { x, coords })
    }

    /// Contiguous slice of `len` rows along axis 0.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self
            .value(x)
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let ng = self.needs(x);
        self.push(v, ng, Op::SliceRows { x, start })
    }

    /// Gathers rows of a [N,D] matrix -> [K,D].
    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let a = self.value(x).view().into_dimensionality::<Ix2>().unwrap();
        let d = a.dim().1;
        let mut out = ndarray::Array2::<f64>::zeros((rows.len(), d));
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(k).assign(&a.row(r));
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), ng, Op::GatherRows { x, rows })
    }

    // ---- backward ----

    fn accumulate(&mut self, id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match self.nodes[id.0].grad.as_mut() {
            Some(existing) => *existing += &g,
            None => self.nodes[id.0].grad = Some(g),
        }
    }

    /// Runs reverse-mode accumulation from a scalar `loss` node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(HermesError::Shape(
                "backward requires a scalar loss node".into(),
            ));
        }
        let seed_shape = self.value(loss).raw_dim();
        self.nodes[loss.0].grad = Some(ArrayD::from_elem(seed_shape, 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.clone() else {
                continue;
            };
            // Ownership dance: take op out, put back after.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_op(&op, &g, idx);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backprop_op(&mut self, op: &Op, g: &Tensor, node_idx: usize) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let ga = reduce_to_shape(g, &self.value(a).shape().to_vec());
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = reduce_to_shape(g, &self.value(b).shape().to_vec());
                    self.accumulate(b, gb);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let ga = reduce_to_shape(g, &self.value(a).shape().to_vec());
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let gb = reduce_to_shape(&g.mapv(|t| -t), &self.value(b).shape().to_vec());
                    self.accumulate(b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let gb = binary_elementwise(g, self.value(b), |x, y| x * y);
                    let ga = reduce_to_shape(&gb, &self.value(a).shape().to_vec());
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let ga = binary_elementwise(g, self.value(a), |x, y| x * y);
                    let gb = reduce_to_shape(&ga, &self.value(b).shape().to_vec());
                    self.accumulate(b, gb);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let gq = binary_elementwise(g, self.value(b), |x, y| x / y);
                    let ga = reduce_to_shape(&gq, &self.value(a).shape().to_vec());
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let num = binary_elementwise(av, bv, |x, y| -x / (y * y));
                    let gq = binary_elementwise(g, &num, |x, y| x * y);
                    let gb = reduce_to_shape(&gq, &bv.shape().to_vec());
                    self.accumulate(b, gb);
                }
            }
            Op::Neg(a) => {
                let a = *a;
                self.accumulate(a, g.mapv(|t| -t));
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accumulate(a, g.mapv(|t| c * t));
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, g.clone());
            }
            Op::Relu(a) => {
                let a = *a;
                let mask = self.value(a).mapv(|t| if t > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(a, g * &mask);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[node_idx].value;
                let dy = y.mapv(|t| t * (1.0 - t));
                self.accumulate(a, g * &dy);
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.nodes[node_idx].value.clone();
                self.accumulate(a, g * &y);
            }
            Op::Ln(a) => {
                let a = *a;
                let inv = self.value(a).mapv(|t| 1.0 / t);
                self.accumulate(a, g * &inv);
            }
            Op::Sum(a) => {
                let a = *a;
                let gv = g.iter().next().copied().unwrap_or(0.0);
                let shape = self.value(a).raw_dim();
                self.accumulate(a, ArrayD::from_elem(shape, gv));
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.value(a).len().max(1) as f64;
                let gv = g.iter().next().copied().unwrap_or(0.0) / n;
                let shape = self.value(a).raw_dim();
                self.accumulate(a, ArrayD::from_elem(shape, gv));
            }
            Op::SumAxisKeep(a, axis) => {
                let (a, axis) = (*a, *axis);
                let shape = self.value(a).shape().to_vec();
                let gb = g
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis_keep grad broadcast")
                    .to_owned();
                let _ = axis;
                self.accumulate(a, gb);
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                let gr = g.clone().into_shape_with_order(IxDyn(&shape)).unwrap();
                self.accumulate(a, gr);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(a) {
                    let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
                    let ga = gv.dot(&bv.t()).into_dyn();
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
                    let gb = av.t().dot(&gv).into_dyn();
                    self.accumulate(b, gb);
                }
            }
            Op::MatmulTB(a, b) => {
                let (a, b) = (*a, *b);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.needs(a) {
                    let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
                    let ga = gv.dot(&bv).into_dyn();
                    self.accumulate(a, ga);
                }
                if self.needs(b) {
                    let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
                    let gb = gv.t().dot(&av).into_dyn();
                    self.accumulate(b, gb);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
                let (gx, gw, gb) = conv::conv2d_backward(
                    &xv,
                    &wv,
                    &gv,
                    stride,
                    pad,
                    self.needs(x),
                    self.needs(w),
                    self.needs(b),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, gw);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, gb);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let shape = self.value(x).shape().to_vec();
                let gx = conv::max_pool2_backward(&gv, argmax, &shape);
                self.accumulate(x, gx);
            }
            Op::UpsampleNearest2(a) => {
                let a = *a;
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let gx = conv::upsample_nearest2_backward(&gv);
                self.accumulate(a, gx);
            }
            Op::GlobalAvgPool(a) => {
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let inv = 1.0 / (h * w) as f64;
                for i in 0..n {
                    for j in 0..c {
                        let gij = gv[(i, j)] * inv;
                        gx.index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), j)
                            .fill(gij);
                    }
                }
                self.accumulate(a, gx.into_dyn());
            }
            Op::ChannelMean(a) => {
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                let c = shape[1] as f64;
                let gb = g
                    .broadcast(IxDyn(&shape))
                    .expect("channel_mean grad broadcast")
                    .mapv(|t| t / c);
                self.accumulate(a, gb);
            }
            Op::ChannelMax { x, argmax } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                let (n, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for i in 0..n {
                    for y in 0..h {
                        for x_ in 0..w {
                            let j = argmax[(i * h + y) * w + x_] as usize;
                            gx4[(i, j, y, x_)] += gv[(i, 0, y, x_)];
                        }
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Concat { axis, parts } => {
                let axis = *axis;
                let mut offset = 0usize;
                for p in parts.clone() {
                    let len = self.value(p).shape()[axis];
                    let gp = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    offset += len;
                    if self.needs(p) {
                        self.accumulate(p, gp);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
                let gam = self
                    .value(gamma)
                    .view()
                    .into_dimensionality::<Ix1>()
                    .unwrap();
                let (n, c, h, w) = xv.dim();
                let cg = c / groups;
                let gsz = (cg * h * w) as f64;
                let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                let mut ggamma = ndarray::Array1::<f64>::zeros(c);
                let mut gbeta = ndarray::Array1::<f64>::zeros(c);
                for i in 0..n {
                    for gi in 0..groups {
                        let c0 = gi * cg;
                        let m = mean[i * groups + gi];
                        let inv = inv_std[i * groups + gi];
                        // First pass: accumulate means of dxhat and dxhat*xhat.
                        let mut s_dxh = 0.0;
                        let mut s_dxh_xh = 0.0;
                        for j in c0..c0 + cg {
                            for y in 0..h {
                                for x_ in 0..w {
                                    let xh = (xv[(i, j, y, x_)] - m) * inv;
                                    let go = gv[(i, j, y, x_)];
                                    let dxh = go * gam[j];
                                    s_dxh += dxh;
                                    s_dxh_xh += dxh * xh;
                                    ggamma[j] += go * xh;
                                    gbeta[j] += go;
                                }
                            }
                        }
                        let m_dxh = s_dxh / gsz;
                        let m_dxh_xh = s_dxh_xh / gsz;
                        for j in c0..c0 + cg {
                            for y in 0..h {
                                for x_ in 0..w {
                                    let xh = (xv[(i, j, y, x_)] - m) * inv;
                                    let dxh = gv[(i, j, y, x_)] * gam[j];
                                    gx[(i, j, y, x_)] = inv * (dxh - m_dxh - xh * m_dxh_xh);
                                }
                            }
                        }
                    }
                }
                if self.needs(x) {
                    self.accumulate(x, gx.into_dyn());
                }
                if self.needs(gamma) {
                    self.accumulate(gamma, ggamma.into_dyn());
                }
                if self.needs(beta) {
                    self.accumulate(beta, gbeta.into_dyn());
                }
            }
            Op::LogSoftmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let y = &self.nodes[node_idx].value;
                let softmax = y.mapv(f64::exp);
                let gsum = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let gx = g - &(&softmax * &gsum);
                self.accumulate(x, gx);
            }
            Op::L2Normalize { x, axis, eps } => {
                let (x, axis, eps) = (*x, *axis, *eps);
                let xv = self.value(x);
                let norm = xv
                    .mapv(|t| t * t)
                    .sum_axis(Axis(axis))
                    .insert_axis(Axis(axis))
                    .mapv(|t| (t + eps).sqrt());
                let y = xv / &norm;
                let dot = (g * &y).sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let gx = (g - &(&y * &dot)) / &norm;
                self.accumulate(x, gx);
            }
            Op::GatherClass { x, targets } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                match shape.len() {
                    2 => {
                        let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                        let mut gx2 = gx.view_mut().into_dimensionality::<Ix2>().unwrap();
                        for i in 0..shape[0] {
                            gx2[(i, targets[i] as usize)] += gv[i];
                        }
                    }
                    4 => {
                        let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                        let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                        let (n, h, w) = gv.dim();
                        for i in 0..n {
                            for y in 0..h {
                                for x_ in 0..w {
                                    let t = targets[(i * h + y) * w + x_] as usize;
                                    gx4[(i, t, y, x_)] += gv[(i, y, x_)];
                                }
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                self.accumulate(x, gx);
            }
            Op::GatherPixels { x, coords } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                let d = shape[1];
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for (k, &(i, y, x_)) in coords.iter().enumerate() {
                    for j in 0..d {
                        gx4[(i, j, y, x_)] += gv[(k, j)];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let shape = self.value(x).shape().to_vec();
                let len = g.shape()[0];
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                gx.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(g);
                self.accumulate(x, gx);
            }
            Op::GatherRows { x, rows } => {
                let x = *x;
                let shape = self.value(x).shape().to_vec();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = ArrayD::<f64>::zeros(IxDyn(&shape));
                let mut gx2 = gx.view_mut().into_dimensionality::<Ix2>().unwrap();
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..shape[1] {
                        gx2[(r, j)] += gv[(k, j)];
                    }
                }
                self.accumulate(x, gx);
            }
        }
    }
}

/// Parallel per-sample map used by conv kernels; kept here so callers share
/// one rayon entry point.
pub(crate) fn par_map_batch<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::check::{finite_diff, max_rel_err};
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Checks d(sum of f(x))/dx against central finite differences.
    fn check_unary(shape: &[usize], f: impl Fn(&mut Graph, NodeId) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randn(shape, &mut rng).mapv(|v| 0.1 + v.abs()); // positive for ln
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = f(&mut g, x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().clone();
        let numeric = finite_diff(
            &mut |t: &Tensor| {
                let mut g2 = Graph::new();
                let x2 = g2.constant(t.clone());
                let y2 = f(&mut g2, x2);
                let l2 = g2.sum(y2);
                g2.scalar_value(l2)
            },
            &x0,
            1e-5,
        );
        assert!(
            max_rel_err(&analytic, &numeric) < 1e-5,
            "rel err {}",
            max_rel_err(&analytic, &numeric)
        );
    }

    #[test]
    fn unary_op_gradients() {
        check_unary(&[3, 4], |g, x| g.relu(x));
        check_unary(&[3, 4], |g, x| g.sigmoid(x));
        check_unary(&[3, 4], |g, x| g.exp(x));
        check_unary(&[3, 4], |g, x| g.ln(x));
        check_unary(&[3, 4], |g, x| g.scale(x, -2.5));
        check_unary(&[2, 3, 2, 2], |g, x| g.channel_mean(x));
        check_unary(&[2, 3, 2, 2], |g, x| g.channel_max(x));
        check_unary(&[2, 3, 4, 4], |g, x| g.max_pool2(x));
        check_unary(&[2, 3, 2, 2], |g, x| g.upsample_nearest2(x));
        check_unary(&[2, 3, 4, 4], |g, x| g.global_avg_pool(x));
        check_unary(&[4, 5], |g, x| g.log_softmax(x, 1));
        check_unary(&[4, 5], |g, x| g.l2_normalize(x, 1, 1e-12));
        check_unary(&[3, 4], |g, x| g.sum_axis_keep(x, 1));
    }

    #[test]
    fn broadcast_add_mul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = randn(&[2, 3, 2, 2], &mut rng);
        let b0 = randn(&[3, 1, 1], &mut rng);
        let mut g = Graph::new();
        let a = g.input(a0.clone());
        let b = g.input(b0.clone());
        let y = g.mul(a, b);
        let z = g.add(y, b);
        let loss = g.sum(z);
        g.backward(loss).unwrap();
        let ga = g.grad(a).unwrap().clone();
        let gb = g.grad(b).unwrap().clone();
        let na = finite_diff(
            &mut |t: &Tensor| {
                let mut g2 = Graph::new();
                let a2 = g2.constant(t.clone());
                let b2 = g2.constant(b0.clone());
                let y2 = g2.mul(a2, b2);
                let z2 = g2.add(y2, b2);
                let l = g2.sum(z2);
                g2.scalar_value(l)
            },
            &a0,
            1e-5,
        );
        let nb = finite_diff(
            &mut |t: &Tensor| {
                let mut g2 = Graph::new();
                let a2 = g2.constant(a0.clone());
                let b2 = g2.constant(t.clone());
                let y2 = g2.mul(a2, b2);
                let z2 = g2.add(y2, b2);
                let l = g2.sum(z2);
                g2.scalar_value(l)
            },
            &b0,
            1e-5,
        );
        assert!(max_rel_err(&ga, &na) < 1e-6);
        assert!(max_rel_err(&gb, &nb) < 1e-6);
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let x0 = randn(&[2, 3, 5, 5], &mut rng);
            let w0 = randn(&[4, 3, 3, 3], &mut rng).mapv(|v| v * 0.3);
            let b0 = randn(&[4], &mut rng);
            let run = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
                let mut g = Graph::new();
                let xn = g.constant(x.clone());
                let wn = g.constant(w.clone());
                let bn = g.constant(b.clone());
                let y = g.conv2d(xn, wn, bn, stride, pad);
                let l = g.sum(y);
                g.scalar_value(l)
            };
            let mut g = Graph::new();
            let xn = g.input(x0.clone());
            let wn = g.input(w0.clone());
            let bn = g.input(b0.clone());
            let y = g.conv2d(xn, wn, bn, stride, pad);
            let l = g.sum(y);
            g.backward(l).unwrap();
            let nx = finite_diff(&mut |t: &Tensor| run(t, &w0, &b0), &x0, 1e-5);
            let nw = finite_diff(&mut |t: &Tensor| run(&x0, t, &b0), &w0, 1e-5);
            let nb = finite_diff(&mut |t: &Tensor| run(&x0, &w0, t), &b0, 1e-5);
            assert!(max_rel_err(g.grad(xn).unwrap(), &nx) < 1e-6, "x grad s{stride} p{pad}");
            assert!(max_rel_err(g.grad(wn).unwrap(), &nw) < 1e-6, "w grad");
            assert!(max_rel_err(g.grad(bn).unwrap(), &nb) < 1e-6, "b grad");
        }
    }

    #[test]
    fn group_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = randn(&[2, 4, 3, 3], &mut rng);
        let g0 = randn(&[4], &mut rng).mapv(|v| 1.0 + 0.1 * v);
        let b0 = randn(&[4], &mut rng);
        let run = |x: &Tensor, ga: &Tensor, be: &Tensor| -> f64 {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let gn = g.constant(ga.clone());
            let bn = g.constant(be.clone());
            let y = g.group_norm(xn, gn, bn, 2, 1e-5);
            // Weighted sum keeps the loss sensitive to normalization.
            let w = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 4, 3, 3]), |ix| {
                (ix[0] + 2 * ix[1] + ix[2] * ix[3]) as f64 * 0.1
            }));
            let yw = g.mul(y, w);
            let l = g.sum(yw);
            g.scalar_value(l)
        };
        let mut g = Graph::new();
        let xn = g.input(x0.clone());
        let gn = g.input(g0.clone());
        let bn = g.input(b0.clone());
        let y = g.group_norm(xn, gn, bn, 2, 1e-5);
        let w = g.constant(ArrayD::from_shape_fn(IxDyn(&[2, 4, 3, 3]), |ix| {
            (ix[0] + 2 * ix[1] + ix[2] * ix[3]) as f64 * 0.1
        }));
        let yw = g.mul(y, w);
        let l = g.sum(yw);
        g.backward(l).unwrap();
        let nx = finite_diff(&mut |t: &Tensor| run(t, &g0, &b0), &x0, 1e-5);
        let ng = finite_diff(&mut |t: &Tensor| run(&x0, t, &b0), &g0, 1e-5);
        let nb = finite_diff(&mut |t: &Tensor| run(&x0, &g0, t), &b0, 1e-5);
        assert!(max_rel_err(g.grad(xn).unwrap(), &nx) < 1e-5);
        assert!(max_rel_err(g.grad(gn).unwrap(), &ng) < 1e-6);
        assert!(max_rel_err(g.grad(bn).unwrap(), &nb) < 1e-6);
    }

    #[test]
    fn matmul_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a0 = randn(&[4, 3], &mut rng);
        let b0 = randn(&[3, 5], &mut rng);
        let mut g = Graph::new();
        let a = g.input(a0.clone());
        let b = g.input(b0.clone());
        let y = g.matmul(a, b);
        let l = g.sum(y);
        g.backward(l).unwrap();
        let na = finite_diff(
            &mut |t: &Tensor| {
                let mut g2 = Graph::new();
                let a2 = g2.constant(t.clone());
                let b2 = g2.constant(b0.clone());
                let y2 = g2.matmul(a2, b2);
                let l2 = g2.sum(y2);
                g2.scalar_value(l2)
            },
            &a0,
            1e-5,
        );
        assert!(max_rel_err(g.grad(a).unwrap(), &na) < 1e-6);

        // gather_class on [N,C]
        let x0 = randn(&[3, 4], &mut rng);
        let t = vec![1u32, 0, 3];
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let y = g.gather_class(x, t.clone());
        let l = g.sum(y);
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        let gx2 = gx.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(gx2[(0, 1)], 1.0);
        assert_eq!(gx2[(1, 0)], 1.0);
        assert_eq!(gx2[(2, 3)], 1.0);
        assert_eq!(gx.sum(), 3.0);
    }

    #[test]
    fn concat_splits_gradient() {
        let a0 = Array4::<f64>::from_elem((1, 2, 2, 2), 1.0).into_dyn();
        let b0 = Array4::<f64>::from_elem((1, 3, 2, 2), 2.0).into_dyn();
        let mut g = Graph::new();
        let a = g.input(a0);
        let b = g.input(b0);
        let c = g.concat(1, &[a, b]);
        assert_eq!(g.value(c).shape(), &[1, 5, 2, 2]);
        let w = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 5, 2, 2]), |ix| {
            ix[1] as f64
        }));
        let cw = g.mul(c, w);
        let l = g.sum(cw);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().iter().sum::<f64>(), (0 + 1) as f64 * 4.0);
        assert_eq!(
            g.grad(b).unwrap().iter().sum::<f64>(),
            (2 + 3 + 4) as f64 * 4.0
        );
    }

    #[test]
    fn matmul_tb_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a0 = randn(&[4, 6], &mut rng);
        let b0 = randn(&[5, 6], &mut rng);
        let mut g = Graph::new();
        let a = g.input(a0.clone());
        let b = g.input(b0.clone());
        let y = g.matmul_tb(a, b);
        let av = a0.view().into_dimensionality::<Ix2>().unwrap();
        let bv = b0.view().into_dimensionality::<Ix2>().unwrap();
        let want = av.dot(&bv.t());
        let got = g.value(y).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert!(want
            .iter()
            .zip(got.iter())
            .all(|(x, y)| (x - y).abs() < 1e-12));
        let l = g.sum(y);
        g.backward(l).unwrap();
        let nb = finite_diff(
            &mut |t: &Tensor| {
                let mut g2 = Graph::new();
                let a2 = g2.constant(a0.clone());
                let b2 = g2.constant(t.clone());
                let y2 = g2.matmul_tb(a2, b2);
                let l2 = g2.sum(y2);
                g2.scalar_value(l2)
            },
            &b0,
            1e-5,
        );
        assert!(max_rel_err(g.grad(b).unwrap(), &nb) < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = randn(&[6, 2], &mut rng).mapv(|v| v * 4.0);
        let mut g = Graph::new();
        let x = g.constant(x0);
        let p = g.softmax(x, 1);
        let pv = g.value(p).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        for row in pv.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_pixels_and_rows_roundtrip() {
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, 2]), |ix| {
            (ix[0] * 100 + ix[1] * 10 + ix[2] * 2 + ix[3]) as f64
        });
        let mut g = Graph::new();
        let x = g.input(x0);
        let got = g.gather_pixels(x, vec![(1, 0, 1), (0, 1, 0)]);
        let v = g.value(got).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(v[(0, 0)], 101.0);
        assert_eq!(v[(0, 1)], 111.0);
        assert_eq!(v[(0, 2)], 121.0);
        assert_eq!(v[(1, 0)], 2.0);

        let m0 = Array2::from_shape_fn((3, 2), |(i, j)| (i * 10 + j) as f64).into_dyn();
        let mut g = Graph::new();
        let m = g.input(m0);
        let r = g.gather_rows(m, vec![2, 0]);
        let rv = g.value(r).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(rv[(0, 0)], 20.0);
        assert_eq!(rv[(1, 1)], 1.0);
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert_eq!(g.grad(m).unwrap().sum(), 4.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(Array1::<f64>::zeros(3).into_dyn());
        assert!(g.backward(x).is_err());
    }
}

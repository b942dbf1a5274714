//! Inter-task attention and gradient-saliency utilities.
//!
//! The segmentation branch gates the classification features through channel
//! then spatial attention; the classification branch hands a detached
//! input-gradient saliency map back to the segmentation decoder.

use super::layers::{Conv2d, Linear};
use super::params::{BoundParams, OptimGroup, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, NodeId, Tensor};
use ndarray::{Array2, Array4, Ix4};
use rand::Rng;

/// Parameters of the inter-task attention module: a 3x3 fusion convolution
/// over the concatenated features, a two-layer channel MLP (reduction 8),
/// and a 3x3 spatial convolution over the pooled planes.
#[derive(Debug, Clone)]
pub struct IasParams {
    pub conv_c: Conv2d,
    pub mlp_w0: Linear,
    pub mlp_w1: Linear,
    pub conv_s: Conv2d,
    pub channels: usize,
}

impl IasParams {
    pub fn new(
        store: &mut ParamStore,
        cls_channels: usize,
        seg_channels: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hidden = (cls_channels / 8).max(1);
        IasParams {
            conv_c: Conv2d::new(
                store,
                "ias.conv_c",
                OptimGroup::ClsSgd,
                cls_channels + seg_channels,
                cls_channels,
                3,
                1,
                rng,
            ),
            mlp_w0: Linear::new(store, "ias.mlp_w0", OptimGroup::ClsSgd, cls_channels, hidden, rng),
            mlp_w1: Linear::new(store, "ias.mlp_w1", OptimGroup::ClsSgd, hidden, cls_channels, rng),
            conv_s: Conv2d::new(store, "ias.conv_s", OptimGroup::ClsSgd, 2, 1, 3, 1, rng),
            channels: cls_channels,
        }
    }
}

/// Channel attention: sigmoid(MLP(AvgPool(Conv3x3([x_cls; x_seg]) + b)))
/// -> [N,C,1,1].
pub fn channel_attention(
    g: &mut Graph,
    p: &BoundParams,
    ias: &IasParams,
    x_cls: NodeId,
    x_seg: NodeId,
) -> Result<NodeId> {
    let sc = g.value(x_cls).shape().to_vec();
    let ss = g.value(x_seg).shape().to_vec();
    if sc.len() != 4 || ss.len() != 4 || sc[2..] != ss[2..] || sc[0] != ss[0] {
        return Err(crate::error::HermesError::Shape(format!(
            "channel_attention: x_cls {sc:?} vs x_seg {ss:?}"
        )));
    }
    let cat = g.concat(1, &[x_cls, x_seg]);
    let fused = ias.conv_c.forward(g, p, cat);
    let pooled = g.global_avg_pool(fused); // [N,C]
    let h = ias.mlp_w0.forward(g, p, pooled);
    let h = g.relu(h);
    let h = ias.mlp_w1.forward(g, p, h);
    let gate = g.sigmoid(h);
    let n = sc[0];
    Ok(g.reshape(gate, &[n, ias.channels, 1, 1]))
}

/// Spatial attention over the channel-attended map:
/// sigmoid(Conv3x3([mean_c(x_m); max_c(x_m)]) + b) -> [N,1,h,w].
pub fn spatial_attention(
    g: &mut Graph,
    p: &BoundParams,
    ias: &IasParams,
    x_m: NodeId,
) -> Result<NodeId> {
    if g.value(x_m).ndim() != 4 {
        return Err(crate::error::HermesError::Shape(
            "spatial_attention expects [N,C,h,w]".into(),
        ));
    }
    let avg = g.channel_mean(x_m);
    let mx = g.channel_max(x_m);
    let cat = g.concat(1, &[avg, mx]);
    let conv = ias.conv_s.forward(g, p, cat);
    Ok(g.sigmoid(conv))
}

/// x_m = M_c (x) x_cls, x_out = M_s (x) x_m (elementwise with broadcast).
pub fn apply_attention(g: &mut Graph, x_cls: NodeId, m_c: NodeId, m_s: NodeId) -> NodeId {
    let x_m = g.mul(x_cls, m_c);
    g.mul(x_m, m_s)
}

/// Input-gradient saliency.
///
/// `forward` must map an image node [N,3,H,W] to class logits [N,2] with
/// gradient tracking on the input. The saliency is the absolute gradient of
/// each image's argmax-class logit, maxed over color channels and min-max
/// normalized to [0,1] per image (an all-zero map stays zero). The result is
/// a plain tensor, detached from any training graph.
pub fn saliency_map(
    images: &Tensor,
    forward: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let img = g.input(images.clone());
    let logits = forward(&mut g, img)?;
    let lv = g.value(logits);
    let n = lv.shape()[0];
    let classes: Vec<u32> = (0..n)
        .map(|i| {
            let l2 = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            if l2[(i, 1)] > l2[(i, 0)] {
                1
            } else {
                0
            }
        })
        .collect();
    let picked = g.gather_class(logits, classes); // [N]
    let total = g.sum(picked);
    g.backward(total)?;
    let grad = g
        .grad(img)
        .ok_or_else(|| {
            crate::error::HermesError::Shape(
                "saliency: no gradient reached the input (non-differentiable forward)".into(),
            )
        })?
        .clone();
    let g4 = grad.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _c, h, w) = g4.dim();
    let mut out = Array4::<f64>::zeros((n, 1, h, w));
    for i in 0..n {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                let v = (0..3).map(|c| g4[(i, c, y, x)].abs()).fold(0.0, f64::max);
                out[(i, 0, y, x)] = v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let span = hi - lo;
        if span > 0.0 {
            for y in 0..h {
                for x in 0..w {
                    out[(i, 0, y, x)] = (out[(i, 0, y, x)] - lo) / span;
                }
            }
        } else {
            for y in 0..h {
                for x in 0..w {
                    out[(i, 0, y, x)] = 0.0;
                }
            }
        }
    }
    Ok(out.into_dyn())
}

/// Resizes a detached [N,1,H,W] saliency map to `h x w` (bilinear).
pub fn resize_saliency(saliency: &Tensor, h: usize, w: usize) -> Tensor {
    let s4 = saliency.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _, sh, sw) = s4.dim();
    let mut out = Array4::<f64>::zeros((n, 1, h, w));
    for i in 0..n {
        let plane = Array2::from_shape_fn((sh, sw), |(y, x)| s4[(i, 0, y, x)]);
        let resized = crate::data::imgops::resize_bilinear_plane(&plane, h, w);
        for y in 0..h {
            for x in 0..w {
                out[(i, 0, y, x)] = resized[(y, x)];
            }
        }
    }
    out.into_dyn()
}

//! The dual-branch network.
//!
//! The segmentation branch is a U-Net-shaped encoder/decoder (stride-2 stem,
//! four pooled encoder stages, four decoder stages); the classification
//! branch is a width-reduced residual backbone with four two-block stages.
//! The branches share no parameters. When inter-task attention is enabled,
//! the third segmentation encoder stage (1/16 scale) gates the third
//! classification stage through channel and spatial attention; when saliency
//! is enabled, a detached input-gradient map from the classification forward
//! is concatenated into the third decoder stage (1/4 scale) behind a 1x1
//! restore convolution.

pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod params;

pub use attention::{
    apply_attention, channel_attention, resize_saliency, saliency_map, spatial_attention,
    IasParams,
};
pub use params::{BoundParams, OptimGroup, ParamId, ParamStore};

use crate::config::TrainConfig;
use crate::error::{HermesError, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use layers::{BasicBlock, Conv2d, ConvBlock, Linear};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    /// Inter-task attention (segmentation features gate classification).
    pub attention: bool,
    /// Saliency fusion (classification gradients guide segmentation).
    pub saliency: bool,
    /// Track gradients for a training backward pass.
    pub track: bool,
}

impl ForwardOpts {
    pub fn from_config(cfg: &TrainConfig, track: bool) -> Self {
        ForwardOpts {
            attention: cfg.enable_ias,
            saliency: cfg.enable_ias,
            track,
        }
    }

    pub fn inference(cfg: &TrainConfig) -> Self {
        Self::from_config(cfg, false)
    }
}

/// All per-forward tensors the training step consumes.
pub struct BranchOutputs {
    /// [N,2,H,W]
    pub seg_logits: NodeId,
    /// [N,2]
    pub cls_logits: NodeId,
    /// [N,D_pix,H/16,W/16], unit-norm per location.
    pub pixel_embeds: NodeId,
    /// [N,D_img], unit-norm.
    pub image_embed: NodeId,
    /// [N,D_img] consistency embedding from the classification branch.
    pub f_cls_proj: NodeId,
    /// [N,D_img] consistency embedding from the segmentation branch.
    pub f_seg_proj: NodeId,
    /// stem, enc1..enc4.
    pub seg_encoder_feats: Vec<NodeId>,
    /// up1..up4.
    pub seg_decoder_feats: Vec<NodeId>,
    /// Detached [N,1,H,W] map when saliency fusion ran.
    pub saliency: Option<Tensor>,
    /// Graph binding of every parameter for this forward.
    pub bound: BoundParams,
}

#[derive(Debug)]
struct SegBranch {
    stem: ConvBlock,
    enc: Vec<(ConvBlock, ConvBlock)>,
    dec: Vec<ConvBlock>,
    fuse_restore: Conv2d,
    head: Conv2d,
    width: usize,
}

#[derive(Debug)]
struct ClsBranch {
    stem: ConvBlock,
    stages: Vec<(BasicBlock, BasicBlock)>,
    fc: Linear,
    width: usize,
}

#[derive(Debug)]
struct ProjectionHeads {
    pixel_fc1: Conv2d,
    pixel_fc2: Conv2d,
    image_fc1: Linear,
    image_fc2: Linear,
    cons_cls_fc1: Linear,
    cons_cls_fc2: Linear,
    cons_seg_fc1: Linear,
    cons_seg_fc2: Linear,
}

/// The dual-branch model plus its parameter store.
pub struct HermesModel {
    pub store: ParamStore,
    seg: SegBranch,
    cls: ClsBranch,
    ias: IasParams,
    heads: ProjectionHeads,
    pub image_size: usize,
}

impl HermesModel {
    /// Builds the model with He-normal weights, deterministic in cfg.seed.
    pub fn new(cfg: &TrainConfig) -> Result<HermesModel> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(MODEL_INIT_STREAM);
        let w = cfg.seg_base_width;
        let c = cfg.cls_base_width;
        use OptimGroup::{ClsSgd, SegAdam};

        let stem = ConvBlock::new(&mut store, "seg.stem", SegAdam, 3, w, 3, 2, &mut rng);
        let enc_widths = [(w, w), (w, 2 * w), (2 * w, 4 * w), (4 * w, 8 * w)];
        let mut enc = Vec::new();
        for (i, &(cin, cout)) in enc_widths.iter().enumerate() {
            enc.push((
                ConvBlock::new(&mut store, &format!("seg.enc{}a", i + 1), SegAdam, cin, cout, 3, 1, &mut rng),
                ConvBlock::new(&mut store, &format!("seg.enc{}b", i + 1), SegAdam, cout, cout, 3, 1, &mut rng),
            ));
        }
        // Decoder: (upsampled + skip) -> out, mirroring the encoder ladder.
        let dec_widths = [
            (8 * w + 4 * w, 4 * w),
            (4 * w + 2 * w, 2 * w),
            (2 * w + w, w),
            (w + w, w),
        ];
        let mut dec = Vec::new();
        for (i, &(cin, cout)) in dec_widths.iter().enumerate() {
            dec.push(ConvBlock::new(
                &mut store,
                &format!("seg.up{}", i + 1),
                SegAdam,
                cin,
                cout,
                3,
                1,
                &mut rng,
            ));
        }
        // 1x1 restore after saliency concat: identity passthrough, zero
        // weight on the saliency channel so fusion starts neutral.
        let fuse_restore = Conv2d::new(&mut store, "seg.fuse_restore", SegAdam, w + 1, w, 1, 1, &mut rng);
        {
            let wt = store.value_mut(fuse_restore.w);
            wt.fill(0.0);
            for i in 0..w {
                wt[[i, i, 0, 0]] = 1.0;
            }
            store.value_mut(fuse_restore.b).fill(0.0);
        }
        let head = Conv2d::new(&mut store, "seg.head", SegAdam, w, 2, 1, 1, &mut rng);
        let seg = SegBranch {
            stem,
            enc,
            dec,
            fuse_restore,
            head,
            width: w,
        };

        let cls_stem = ConvBlock::new(&mut store, "cls.stem", ClsSgd, 3, c, 3, 2, &mut rng);
        let stage_widths = [(c, c, 1), (c, 2 * c, 2), (2 * c, 4 * c, 2), (4 * c, 8 * c, 2)];
        let mut stages = Vec::new();
        for (i, &(cin, cout, stride)) in stage_widths.iter().enumerate() {
            stages.push((
                BasicBlock::new(&mut store, &format!("cls.s{}a", i + 1), ClsSgd, cin, cout, stride, &mut rng),
                BasicBlock::new(&mut store, &format!("cls.s{}b", i + 1), ClsSgd, cout, cout, 1, &mut rng),
            ));
        }
        let fc = Linear::new(&mut store, "cls.fc", ClsSgd, 8 * c, 2, &mut rng);
        let cls = ClsBranch {
            stem: cls_stem,
            stages,
            fc,
            width: c,
        };

        let ias = IasParams::new(&mut store, 4 * c, 4 * w, &mut rng);

        let dp = cfg.pixel_embed_dim;
        let di = cfg.image_embed_dim;
        let heads = ProjectionHeads {
            pixel_fc1: Conv2d::new(&mut store, "head.pixel1", SegAdam, 4 * w, 4 * w, 1, 1, &mut rng),
            pixel_fc2: Conv2d::new(&mut store, "head.pixel2", SegAdam, 4 * w, dp, 1, 1, &mut rng),
            image_fc1: Linear::new(&mut store, "head.image1", SegAdam, 8 * c, 8 * c, &mut rng),
            image_fc2: Linear::new(&mut store, "head.image2", SegAdam, 8 * c, di, &mut rng),
            cons_cls_fc1: Linear::new(&mut store, "head.cons_cls1", SegAdam, 8 * c, 8 * c, &mut rng),
            cons_cls_fc2: Linear::new(&mut store, "head.cons_cls2", SegAdam, 8 * c, di, &mut rng),
            cons_seg_fc1: Linear::new(&mut store, "head.cons_seg1", SegAdam, 8 * w, 8 * w, &mut rng),
            cons_seg_fc2: Linear::new(&mut store, "head.cons_seg2", SegAdam, 8 * w, di, &mut rng),
        };

        Ok(HermesModel {
            store,
            seg,
            cls,
            ias,
            heads,
            image_size: cfg.image_size,
        })
    }

    /// Pixel-embedding grid side length (1/16 of the input resolution).
    pub fn embed_grid(&self) -> usize {
        self.image_size / 16
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.image_size || s[3] != self.image_size {
            return Err(HermesError::Shape(format!(
                "expected [N,3,{0},{0}] images, got {s:?}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn seg_encode(&self, g: &mut Graph, p: &BoundParams, x: NodeId) -> Vec<NodeId> {
        let mut feats = Vec::with_capacity(5);
        let stem = self.seg.stem.forward(g, p, x);
        feats.push(stem);
        let mut cur = stem;
        for (a, b) in &self.seg.enc {
            let pooled = g.max_pool2(cur);
            let y = a.forward(g, p, pooled);
            let y = b.forward(g, p, y);
            feats.push(y);
            cur = y;
        }
        feats
    }

    /// Decoder with optional saliency fusion at the third stage (1/4 scale).
    fn seg_decode(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        enc_feats: &[NodeId],
        saliency: Option<&Tensor>,
    ) -> (NodeId, Vec<NodeId>) {
        let mut dec_feats = Vec::with_capacity(4);
        let mut cur = enc_feats[4];
        for (i, block) in self.seg.dec.iter().enumerate() {
            let up = g.upsample_nearest2(cur);
            let skip = enc_feats[3 - i];
            let cat = g.concat(1, &[up, skip]);
            let mut y = block.forward(g, p, cat);
            if i == 2 {
                if let Some(sal) = saliency {
                    let shape = g.value(y).shape().to_vec();
                    let resized = resize_saliency(sal, shape[2], shape[3]);
                    let sal_node = g.constant(resized);
                    let fused = g.concat(1, &[y, sal_node]);
                    y = self.seg.fuse_restore.forward(g, p, fused);
                }
            }
            dec_feats.push(y);
            cur = y;
        }
        let up = g.upsample_nearest2(cur);
        let logits = self.seg.head.forward(g, p, up);
        (logits, dec_feats)
    }

    /// Classification trunk; `gate` carries the attention-ready segmentation
    /// feature at 1/16 scale.
    fn cls_forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        images: NodeId,
        gate: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let stem = self.cls.stem.forward(g, p, images);
        let mut cur = g.max_pool2(stem);
        for (i, (a, b)) in self.cls.stages.iter().enumerate() {
            cur = a.forward(g, p, cur);
            cur = b.forward(g, p, cur);
            if i == 2 {
                if let Some(x_seg) = gate {
                    let m_c = channel_attention(g, p, &self.ias, cur, x_seg)?;
                    let x_m = g.mul(cur, m_c);
                    let m_s = spatial_attention(g, p, &self.ias, x_m)?;
                    cur = g.mul(x_m, m_s);
                }
            }
        }
        let pooled = g.global_avg_pool(cur); // [N, 8C]
        let logits = self.cls.fc.forward(g, p, pooled);
        Ok((pooled, logits))
    }

    /// Detached input-gradient saliency of the argmax-class logit, computed
    /// on its own graph (classification pass of the two-pass evaluation).
    pub fn compute_saliency(&self, images: &Tensor, attention: bool) -> Result<Tensor> {
        self.check_images(images)?;
        saliency_map(images, |g, img| {
            let p = self.store.bind_all(g, false);
            let gate = if attention {
                let feats = self.seg_encode(g, &p, img);
                Some(feats[3])
            } else {
                None
            };
            let (_, logits) = self.cls_forward(g, &p, img, gate)?;
            Ok(logits)
        })
    }

    /// Full joint forward. The segmentation branch runs first; its third
    /// encoder stage feeds attention into the classification branch; with
    /// saliency on, a separate classification pass produces the map fused
    /// into the decoder before the final logits.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, opts: ForwardOpts) -> Result<BranchOutputs> {
        self.check_images(images)?;
        let saliency = if opts.saliency {
            Some(self.compute_saliency(images, opts.attention)?)
        } else {
            None
        };
        let p = self.store.bind_all(g, opts.track);
        let img = g.constant(images.clone());
        let enc = self.seg_encode(g, &p, img);
        let gate = if opts.attention { Some(enc[3]) } else { None };
        let (pooled, cls_logits) = self.cls_forward(g, &p, img, gate)?;
        let (seg_logits, dec) = self.seg_decode(g, &p, &enc, saliency.as_ref());

        // Projection heads. Pixel embeddings come from the third encoder
        // stage (1/16 scale); consistency features from each branch's last
        // encoder features.
        let h = self.heads.pixel_fc1.forward(g, &p, enc[3]);
        let h = g.relu(h);
        let h = self.heads.pixel_fc2.forward(g, &p, h);
        let pixel_embeds = g.l2_normalize(h, 1, 1e-12);

        let h = self.heads.image_fc1.forward(g, &p, pooled);
        let h = g.relu(h);
        let h = self.heads.image_fc2.forward(g, &p, h);
        let image_embed = g.l2_normalize(h, 1, 1e-12);

        let h = self.heads.cons_cls_fc1.forward(g, &p, pooled);
        let h = g.relu(h);
        let h = self.heads.cons_cls_fc2.forward(g, &p, h);
        let f_cls_proj = g.l2_normalize(h, 1, 1e-12);

        let seg_pooled = g.global_avg_pool(enc[4]); // [N, 8W]
        let h = self.heads.cons_seg_fc1.forward(g, &p, seg_pooled);
        let h = g.relu(h);
        let h = self.heads.cons_seg_fc2.forward(g, &p, h);
        let f_seg_proj = g.l2_normalize(h, 1, 1e-12);

        Ok(BranchOutputs {
            seg_logits,
            cls_logits,
            pixel_embeds,
            image_embed,
            f_cls_proj,
            f_seg_proj,
            seg_encoder_feats: enc,
            seg_decoder_feats: dec,
            saliency,
            bound: p,
        })
    }

    /// Segmentation branch alone (no coupling), same code path as the joint
    /// forward with attention and saliency off.
    pub fn forward_seg_only(&self, g: &mut Graph, images: &Tensor, track: bool) -> Result<NodeId> {
        self.check_images(images)?;
        let p = self.store.bind_all(g, track);
        let img = g.constant(images.clone());
        let enc = self.seg_encode(g, &p, img);
        let (logits, _) = self.seg_decode(g, &p, &enc, None);
        Ok(logits)
    }

    /// Classification branch alone (no coupling).
    pub fn forward_cls_only(&self, g: &mut Graph, images: &Tensor, track: bool) -> Result<NodeId> {
        self.check_images(images)?;
        let p = self.store.bind_all(g, track);
        let img = g.constant(images.clone());
        let (_, logits) = self.cls_forward(g, &p, img, None)?;
        Ok(logits)
    }

    /// Seg width (stem channels), cls width.
    pub fn widths(&self) -> (usize, usize) {
        (self.seg.width, self.cls.width)
    }
}

/// RNG stream tag for weight init; batch/augment streams use other tags.
const MODEL_INIT_STREAM: u64 = 0x4d4f44;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Ix2, IxDyn};

    fn small_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.image_size = 32;
        cfg.seg_base_width = 4;
        cfg.cls_base_width = 4;
        cfg.pixel_embed_dim = 16;
        cfg.image_embed_dim = 8;
        cfg.seed = 7;
        cfg
    }

    fn test_images(n: usize, size: usize) -> Tensor {
        Tensor::from_shape_fn(IxDyn(&[n, 3, size, size]), |ix| {
            0.5 + 0.4 * ((ix[0] + 1) as f64 * 0.3 + (ix[2] * size + ix[3]) as f64 * 0.05).sin()
        })
    }

    #[test]
    fn forward_shapes_and_invariants() {
        let cfg = small_cfg();
        let model = HermesModel::new(&cfg).unwrap();
        let images = test_images(2, 32);
        let mut g = Graph::new();
        let out = model
            .forward(&mut g, &images, ForwardOpts { attention: true, saliency: true, track: false })
            .unwrap();
        assert_eq!(g.value(out.seg_logits).shape(), &[2, 2, 32, 32]);
        assert_eq!(g.value(out.cls_logits).shape(), &[2, 2]);
        // Pixel embeddings at 1/16 input resolution.
        assert_eq!(g.value(out.pixel_embeds).shape(), &[2, 16, 2, 2]);
        assert_eq!(g.value(out.image_embed).shape(), &[2, 8]);
        // Unit norms within 1e-5.
        let pe = g.value(out.pixel_embeds);
        for n in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let norm: f64 = (0..16).map(|d| pe[[n, d, y, x]].powi(2)).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-5, "pixel embed norm {norm}");
                }
            }
        }
        for node in [out.image_embed, out.f_cls_proj, out.f_seg_proj] {
            let v = g.value(node).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            for row in v.rows() {
                let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "embed norm {norm}");
            }
        }
        // Softmax maps sum to 1 per location.
        let probs = g.softmax(out.seg_logits, 1);
        let pv = g.value(probs);
        for n in 0..2 {
            for y in 0..32 {
                for x in 0..32 {
                    let s = pv[[n, 0, y, x]] + pv[[n, 1, y, x]];
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
        // Saliency map present, in range, full resolution.
        let sal = out.saliency.as_ref().unwrap();
        assert_eq!(sal.shape(), &[2, 1, 32, 32]);
        assert!(sal.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn decoupled_joint_forward_matches_single_branches_bitwise() {
        let cfg = small_cfg();
        let model = HermesModel::new(&cfg).unwrap();
        let images = test_images(2, 32);
        let opts = ForwardOpts { attention: false, saliency: false, track: false };
        let mut g1 = Graph::new();
        let joint = model.forward(&mut g1, &images, opts).unwrap();
        let mut g2 = Graph::new();
        let seg = model.forward_seg_only(&mut g2, &images, false).unwrap();
        let mut g3 = Graph::new();
        let cls = model.forward_cls_only(&mut g3, &images, false).unwrap();
        assert_eq!(g1.value(joint.seg_logits), g2.value(seg));
        assert_eq!(g1.value(joint.cls_logits), g3.value(cls));
    }

    #[test]
    fn attention_couples_and_saliency_fuses() {
        let cfg = small_cfg();
        let model = HermesModel::new(&cfg).unwrap();
        let images = test_images(1, 32);
        let off = ForwardOpts { attention: false, saliency: false, track: false };
        let on = ForwardOpts { attention: true, saliency: false, track: false };
        let mut g1 = Graph::new();
        let o1 = model.forward(&mut g1, &images, off).unwrap();
        let mut g2 = Graph::new();
        let o2 = model.forward(&mut g2, &images, on).unwrap();
        // Attention changes classification logits but not segmentation ones.
        assert_ne!(g1.value(o1.cls_logits), g2.value(o2.cls_logits));
        assert_eq!(g1.value(o1.seg_logits), g2.value(o2.seg_logits));

        // The neutral-initialized restore conv makes saliency fusion start
        // as a bitwise no-op on segmentation logits.
        let with_sal = ForwardOpts { attention: false, saliency: true, track: false };
        let mut g3 = Graph::new();
        let o3 = model.forward(&mut g3, &images, with_sal).unwrap();
        assert_eq!(g1.value(o1.seg_logits), g3.value(o3.seg_logits));
        assert!(o3.saliency.is_some());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = small_cfg();
        let a = HermesModel::new(&cfg).unwrap();
        let b = HermesModel::new(&cfg).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for id in a.store.ids() {
            assert_eq!(a.store.value(id), b.store.value(id), "{}", a.store.name(id));
        }
        let mut cfg2 = cfg.clone();
        cfg2.seed = 8;
        let c = HermesModel::new(&cfg2).unwrap();
        let differs = a
            .store
            .ids()
            .any(|id| a.store.value(id) != c.store.value(id));
        assert!(differs);
    }

    #[test]
    fn every_parameter_has_exactly_one_owner() {
        let cfg = small_cfg();
        let model = HermesModel::new(&cfg).unwrap();
        let mut seg = 0;
        let mut cls = 0;
        for id in model.store.ids() {
            match model.store.group(id) {
                OptimGroup::SegAdam => seg += 1,
                OptimGroup::ClsSgd => cls += 1,
            }
            let name = model.store.name(id);
            let expect_cls = name.starts_with("cls.") || name.starts_with("ias.");
            assert_eq!(
                matches!(model.store.group(id), OptimGroup::ClsSgd),
                expect_cls,
                "{name} in wrong optimizer group"
            );
        }
        assert!(seg > 0 && cls > 0);
        assert_eq!(seg + cls, model.store.len());
    }
}

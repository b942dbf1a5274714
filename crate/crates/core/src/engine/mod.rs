//! Training loop, evaluation, and persistence.
//!
//! One [`TrainState`] owns the model, both optimizers (momentum SGD for the
//! classification branch plus attention module, Adam for the segmentation
//! branch plus heads), the memory banks, and the RNG streams. Every stream
//! derives from the config seed, so two runs with the same config produce
//! identical metrics.

pub mod plsim;

use crate::config::TrainConfig;
use crate::data::{augment_weak, make_view_pair, Dataset, Sample};
use crate::error::{HermesError, Result};
use crate::losses::{
    self, ImageContrastInputs, LossParts, LossReport,
};
use crate::model::checkpoint::{load_tensors, manifest_path, save_tensors, Manifest};
use crate::model::{ForwardOpts, HermesModel, OptimGroup, ParamId};
use crate::pseudo::{
    dual_threshold_gate, make_pseudo_labels, sample_anchors, AnchorSet, MemoryBank,
};
use crate::schedule::{confidence_threshold, poly_lr, uncertainty_threshold, ScheduleState};
use crate::tensor::{Graph, Tensor};
use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

const STREAM_BATCH: u64 = 0xB1;
const STREAM_AUG: u64 = 0xA2;
const STREAM_ANCHOR: u64 = 0xC3;

/// Per-parameter Adam state (segmentation branch + heads).
struct Adam {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Per-parameter momentum-SGD state (classification branch + attention).
struct Sgd {
    velocity: Vec<Option<Tensor>>,
    momentum: f64,
    weight_decay: f64,
}

pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: HermesModel,
    pub iter: usize,
    pub pixel_bank: MemoryBank,
    pub image_bank: MemoryBank,
    adam: Adam,
    sgd: Sgd,
    rng_aug: ChaCha8Rng,
    rng_anchor: ChaCha8Rng,
}

fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let model = HermesModel::new(&cfg)?;
        let n = model.store.len();
        Ok(TrainState {
            pixel_bank: MemoryBank::new(cfg.bank_capacity_pixel),
            image_bank: MemoryBank::new(cfg.bank_capacity_image),
            adam: Adam {
                m: vec![None; n],
                v: vec![None; n],
                t: 0,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            sgd: Sgd {
                velocity: vec![None; n],
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            rng_aug: stream_rng(cfg.seed, STREAM_AUG),
            rng_anchor: stream_rng(cfg.seed, STREAM_ANCHOR),
            iter: 0,
            model,
            cfg,
        })
    }

    fn apply_gradients(&mut self, grads: &[(ParamId, Tensor)], lr: f64) {
        self.adam.t += 1;
        for (id, grad) in grads {
            let idx = id.index();
            match self.model.store.group(*id) {
                OptimGroup::SegAdam => {
                    let m = self.adam.m[idx]
                        .get_or_insert_with(|| Tensor::zeros(grad.raw_dim()));
                    let v = self.adam.v[idx]
                        .get_or_insert_with(|| Tensor::zeros(grad.raw_dim()));
                    let (b1, b2) = (self.adam.beta1, self.adam.beta2);
                    ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                    });
                    ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                    let bc1 = 1.0 - b1.powi(self.adam.t as i32);
                    let bc2 = 1.0 - b2.powi(self.adam.t as i32);
                    let eps = self.adam.eps;
                    let w = self.model.store.value_mut(*id);
                    ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                        let mh = m / bc1;
                        let vh = v / bc2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    });
                }
                OptimGroup::ClsSgd => {
                    let vel = self.sgd.velocity[idx]
                        .get_or_insert_with(|| Tensor::zeros(grad.raw_dim()));
                    let (mu, wd) = (self.sgd.momentum, self.sgd.weight_decay);
                    let w = self.model.store.value_mut(*id);
                    ndarray::Zip::from(w).and(&mut *vel).and(grad).for_each(
                        |w, vel, &g| {
                            let g = g + wd * *w;
                            *vel = mu * *vel + g;
                            *w -= lr * *vel;
                        },
                    );
                }
            }
        }
    }

    /// One optimization step over half-labeled / half-unlabeled batches.
    /// An empty unlabeled batch trains supervised-only.
    pub fn train_step(
        &mut self,
        labeled: &[Sample],
        unlabeled: &[Sample],
    ) -> Result<LossReport> {
        let cfg = self.cfg.clone();
        let size = cfg.image_size;
        let sched = ScheduleState::new(self.iter, cfg.total_iters)?;
        let kappa = uncertainty_threshold(sched, cfg.eta_min, cfg.eta_max);
        let tau = confidence_threshold(sched);
        let lr = poly_lr(sched, cfg.lr_init);
        let nl = labeled.len();
        let nu = unlabeled.len();
        if nl == 0 {
            return Err(HermesError::Data("empty labeled batch".into()));
        }

        // Weak geometry for labeled samples (masks co-transformed).
        let mut lab_imgs = ArrayD::<f64>::zeros(IxDyn(&[nl, 3, size, size]));
        let mut lab_masks = ArrayD::<f64>::zeros(IxDyn(&[nl, size, size]));
        let mut lab_labels = Vec::with_capacity(nl);
        for (i, s) in labeled.iter().enumerate() {
            if !s.is_labeled() {
                return Err(HermesError::Data(format!("sample {} is unlabeled", s.id)));
            }
            let wv = augment_weak(s, size, &mut self.rng_aug);
            fill_image(&mut lab_imgs, i, &wv.image);
            let mask = wv.mask.expect("labeled sample keeps a mask");
            for y in 0..size {
                for x in 0..size {
                    lab_masks[[i, y, x]] = mask[(y, x)] as f64;
                }
            }
            lab_labels.push(s.class_label.unwrap() as u32);
        }

        // Weak/strong views for unlabeled samples.
        let mut weak_imgs = ArrayD::<f64>::zeros(IxDyn(&[nu, 3, size, size]));
        let mut strong_imgs = ArrayD::<f64>::zeros(IxDyn(&[nu, 3, size, size]));
        for (i, s) in unlabeled.iter().enumerate() {
            let (pair, _) = make_view_pair(s, size, &mut self.rng_aug);
            fill_image(&mut weak_imgs, i, &pair.weak);
            fill_image(&mut strong_imgs, i, &pair.strong);
        }

        // Weak pass: detached probabilities and embeddings.
        let weak = if nu > 0 {
            let mut gw = Graph::new();
            let out = self
                .model
                .forward(&mut gw, &weak_imgs, ForwardOpts::from_config(&cfg, false))?;
            let seg_probs = {
                let p = gw.softmax(out.seg_logits, 1);
                gw.value(p).clone()
            };
            let cls_probs = {
                let p = gw.softmax(out.cls_logits, 1);
                gw.value(p).clone()
            };
            let image_embeds = gw.value(out.image_embed).clone();
            Some((seg_probs, cls_probs, image_embeds))
        } else {
            None
        };

        // Gates and pseudo-labels from the weak view.
        let mut gate_maps = ArrayD::<f64>::zeros(IxDyn(&[nu, size, size]));
        let mut pseudo_masks = ArrayD::<f64>::zeros(IxDyn(&[nu, size, size]));
        let mut img_gate = vec![false; nu];
        let mut pseudo_cls = vec![0u32; nu];
        let mut accepted_pixels = 0usize;
        let mut accepted_images = 0usize;
        if let Some((seg_probs, cls_probs, _)) = &weak {
            for i in 0..nu {
                let per = seg_probs.index_axis(Axis(0), i).to_owned();
                let gate = dual_threshold_gate(&per, kappa, tau, cfg.epsilon)?;
                let pseudo = make_pseudo_labels(&per);
                for y in 0..size {
                    for x in 0..size {
                        if gate.accepted[[y, x]] {
                            gate_maps[[i, y, x]] = 1.0;
                            accepted_pixels += 1;
                        }
                        pseudo_masks[[i, y, x]] = pseudo[[y, x]] as f64;
                    }
                }
                let pc = cls_probs.index_axis(Axis(0), i).to_owned();
                let cgate = dual_threshold_gate(&pc, kappa, tau, cfg.epsilon)?;
                img_gate[i] = cgate.accepted.iter().next().copied().unwrap_or(false);
                if img_gate[i] {
                    accepted_images += 1;
                }
                pseudo_cls[i] = make_pseudo_labels(&pc).iter().next().copied().unwrap_or(0);
            }
        }

        // Training graph: one forward over [labeled; strong].
        let mut g = Graph::new();
        let full_imgs = concat_batches(&lab_imgs, &strong_imgs);
        let out = self
            .model
            .forward(&mut g, &full_imgs, ForwardOpts::from_config(&cfg, true))?;
        let seg_logits_l = g.slice_rows(out.seg_logits, 0, nl);
        let cls_logits_l = g.slice_rows(out.cls_logits, 0, nl);

        let seg_sup = losses::supervised_seg_loss(&mut g, seg_logits_l, &lab_masks, 1.0)?;
        let cls_sup = losses::supervised_cls_loss(&mut g, cls_logits_l, &lab_labels)?;

        let zero = g.constant(crate::tensor::scalar(0.0));
        let mut seg_unsup = zero;
        let mut cls_unsup = zero;
        let mut pixel_contrast = zero;
        let mut image_contrast = zero;
        let mut itc = zero;
        let mut pixel_anchor_set = AnchorSet::default();
        let mut image_anchor_set = AnchorSet::default();
        let mut zero_norm_warnings = 0usize;

        if nu > 0 {
            let seg_logits_s = g.slice_rows(out.seg_logits, nl, nu);
            let cls_logits_s = g.slice_rows(out.cls_logits, nl, nu);
            let strong_fg = losses::foreground_prob(&mut g, seg_logits_s);
            seg_unsup =
                losses::unsup_seg_loss(&mut g, strong_fg, &pseudo_masks, &gate_maps, 1.0)?;
            let img_w: Vec<f64> = img_gate.iter().map(|&b| f64::from(b)).collect();
            cls_unsup = losses::unsup_cls_loss(&mut g, cls_logits_s, &pseudo_cls, &img_w)?;

            if cfg.enable_dtcl {
                // Pixel anchors at the embedding grid (1/16 scale).
                let grid = self.model.embed_grid();
                let strong_seg_pred = argmax_map(g.value(seg_logits_s));
                let gate_ds = downsample_flags(&gate_maps, nu, size, grid);
                let pseudo_ds = downsample_labels(&pseudo_masks, nu, size, grid);
                let strong_ds = downsample_label_maps(&strong_seg_pred, nu, size, grid);
                pixel_anchor_set = sample_anchors(
                    &gate_ds,
                    &pseudo_ds,
                    &pseudo_ds,
                    &strong_ds,
                    cfg.anchors_per_batch,
                    &mut self.rng_anchor,
                );
                if !pixel_anchor_set.is_empty() {
                    let coords: Vec<(usize, usize, usize)> = pixel_anchor_set
                        .iter()
                        .map(|a| {
                            let (n, rem) = (a.pos / (grid * grid), a.pos % (grid * grid));
                            (n, rem / grid, rem % grid)
                        })
                        .collect();
                    let classes: Vec<u32> =
                        pixel_anchor_set.iter().map(|a| a.class).collect();
                    let pixel_embeds_s = g.slice_rows(out.pixel_embeds, nl, nu);
                    let anchors_node = g.gather_pixels(pixel_embeds_s, coords);
                    pixel_contrast = losses::pixel_contrastive_loss(
                        &mut g,
                        anchors_node,
                        &classes,
                        &self.pixel_bank,
                        cfg.temp,
                    )?;
                }

                // Image anchors over the unlabeled batch.
                let strong_cls_pred = argmax_rows(g.value(cls_logits_s));
                let budget = nu + (nu & 1);
                image_anchor_set = sample_anchors(
                    &flat_bools(&img_gate),
                    &flat_u32s(&pseudo_cls),
                    &flat_u32s(&pseudo_cls),
                    &flat_u32s(&strong_cls_pred),
                    budget,
                    &mut self.rng_anchor,
                );
                let (_, _, weak_embeds) = weak.as_ref().expect("weak pass ran");
                let weak_node = g.constant(weak_embeds.clone());
                let strong_node = g.slice_rows(out.image_embed, nl, nu);
                let mut view_rows = Vec::with_capacity(2 * nu);
                for i in 0..nu {
                    view_rows.push(g.gather_rows(weak_node, vec![i]));
                    view_rows.push(g.gather_rows(strong_node, vec![i]));
                }
                if nu > 0 {
                    let embeds_2n = g.concat(0, &view_rows);
                    let anchor_views: Vec<usize> = image_anchor_set
                        .iter()
                        .flat_map(|a| [2 * a.pos, 2 * a.pos + 1])
                        .collect();
                    if !anchor_views.is_empty() {
                        image_contrast = losses::image_contrastive_loss(
                            &mut g,
                            &ImageContrastInputs {
                                embeds: embeds_2n,
                                classes: &pseudo_cls,
                                gates: &img_gate,
                                anchors: Some(&anchor_views),
                                bank: Some(&self.image_bank),
                            },
                            cfg.temp,
                        )?;
                    }
                }
            }

            if cfg.enable_itcl {
                // Consistency alignment rides the image gate: rejected images
                // contribute 0 while still counting in the denominator, the
                // same averaging as the other unsupervised terms.
                let accepted_rows: Vec<usize> = (0..nu).filter(|&i| img_gate[i]).collect();
                if !accepted_rows.is_empty() {
                    let f_cls_s = g.slice_rows(out.f_cls_proj, nl, nu);
                    let f_seg_s = g.slice_rows(out.f_seg_proj, nl, nu);
                    let f_cls_a = g.gather_rows(f_cls_s, accepted_rows.clone());
                    let f_seg_a = g.gather_rows(f_seg_s, accepted_rows.clone());
                    let (node, warns) =
                        losses::inter_task_consistency_loss(&mut g, f_cls_a, f_seg_a)?;
                    itc = g.scale(node, accepted_rows.len() as f64 / nu as f64);
                    zero_norm_warnings = warns;
                }
            }
        }

        let parts_nodes = LossParts {
            seg_sup,
            cls_sup,
            seg_unsup,
            cls_unsup,
            pixel_contrast,
            image_contrast,
            itc,
        };
        let total = losses::total_loss_node(&mut g, &parts_nodes, &cfg);
        g.backward(total)?;

        // Collect gradients, then step both optimizers at poly_lr(iter).
        let mut grads = Vec::new();
        for id in self.model.store.ids() {
            if let Some(grad) = g.grad(out.bound.node(id)) {
                grads.push((id, grad.clone()));
            }
        }
        self.apply_gradients(&grads, lr);

        // Bank maintenance after the optimizer step, detached values.
        if cfg.enable_dtcl && nu > 0 {
            if !pixel_anchor_set.is_empty() {
                // Values were computed before the weight update; re-read from
                // the graph (they are already detached copies).
                let grid = self.model.embed_grid();
                let pe = g.value(out.pixel_embeds);
                let pe4 = pe.view().into_dimensionality::<Ix4>().unwrap();
                let d = pe4.dim().1;
                for a in pixel_anchor_set.iter() {
                    let (n, rem) = (a.pos / (grid * grid), a.pos % (grid * grid));
                    let (y, x) = (rem / grid, rem % grid);
                    let v: Vec<f64> = (0..d).map(|j| pe4[(nl + n, j, y, x)]).collect();
                    self.pixel_bank.push(&v, a.class)?;
                }
            }
            let ie = g.value(out.image_embed);
            let ie2 = ie.view().into_dimensionality::<Ix2>().unwrap();
            for (i, &ok) in img_gate.iter().enumerate() {
                if ok {
                    let v: Vec<f64> = ie2.row(nl + i).to_vec();
                    self.image_bank.push(&v, pseudo_cls[i])?;
                }
            }
        }

        self.iter += 1;

        let report = LossReport {
            seg_sup: g.scalar_value(seg_sup),
            cls_sup: g.scalar_value(cls_sup),
            seg_unsup: g.scalar_value(seg_unsup),
            cls_unsup: g.scalar_value(cls_unsup),
            pixel_contrast: g.scalar_value(pixel_contrast),
            image_contrast: g.scalar_value(image_contrast),
            itc: g.scalar_value(itc),
            total: g.scalar_value(total),
            accepted_pixels,
            total_pixels: nu * size * size,
            accepted_images,
            total_images: nu,
            pixel_anchors: pixel_anchor_set.len(),
            image_anchors: image_anchor_set.len(),
            zero_norm_warnings,
        };
        Ok(report)
    }

    /// Writes a checkpoint blob (params + optimizer state + iteration) and
    /// its JSON manifest.
    pub fn save_checkpoint(&self, path: &Path, metrics: serde_json::Value) -> Result<()> {
        let mut entries = Vec::new();
        for id in self.model.store.ids() {
            entries.push((
                format!("param/{}", self.model.store.name(id)),
                self.model.store.value(id).clone(),
            ));
        }
        for id in self.model.store.ids() {
            let idx = id.index();
            if let Some(m) = &self.adam.m[idx] {
                entries.push((format!("adam_m/{}", self.model.store.name(id)), m.clone()));
            }
            if let Some(v) = &self.adam.v[idx] {
                entries.push((format!("adam_v/{}", self.model.store.name(id)), v.clone()));
            }
            if let Some(v) = &self.sgd.velocity[idx] {
                entries.push((format!("sgd_v/{}", self.model.store.name(id)), v.clone()));
            }
        }
        entries.push(("meta/iter".into(), crate::tensor::scalar(self.iter as f64)));
        entries.push(("meta/adam_t".into(), crate::tensor::scalar(self.adam.t as f64)));
        save_tensors(path, &entries)?;
        Manifest {
            config_digest: self.cfg.digest(),
            iteration: self.iter,
            metrics,
        }
        .save(&manifest_path(path))
    }

    /// Restores a state saved by [`TrainState::save_checkpoint`]. The config
    /// must match the manifest's digest (schedules are pure functions of the
    /// restored iteration, so resumed thresholds are exact).
    pub fn load_checkpoint(cfg: TrainConfig, path: &Path) -> Result<TrainState> {
        let manifest = Manifest::load(&manifest_path(path))?;
        if manifest.config_digest != cfg.digest() {
            return Err(HermesError::Checkpoint(format!(
                "config digest mismatch: checkpoint {} vs config {}",
                manifest.config_digest,
                cfg.digest()
            )));
        }
        let mut state = TrainState::new(cfg)?;
        let by_name: std::collections::BTreeMap<String, Tensor> =
            load_tensors(path)?.into_iter().collect();
        for id in state.model.store.ids() {
            let name = state.model.store.name(id).to_string();
            let t = by_name.get(&format!("param/{name}")).ok_or_else(|| {
                HermesError::Checkpoint(format!("checkpoint missing parameter {name}"))
            })?;
            *state.model.store.value_mut(id) = t.clone();
            state.adam.m[id.index()] = by_name.get(&format!("adam_m/{name}")).cloned();
            state.adam.v[id.index()] = by_name.get(&format!("adam_v/{name}")).cloned();
            state.sgd.velocity[id.index()] = by_name.get(&format!("sgd_v/{name}")).cloned();
        }
        state.iter = by_name
            .get("meta/iter")
            .map(|t| t.iter().next().copied().unwrap_or(0.0) as usize)
            .unwrap_or(manifest.iteration);
        state.adam.t = by_name
            .get("meta/adam_t")
            .map(|t| t.iter().next().copied().unwrap_or(0.0) as u64)
            .unwrap_or(0);
        Ok(state)
    }
}

fn fill_image(batch: &mut Tensor, i: usize, img: &ndarray::Array3<f64>) {
    let (c, h, w) = img.dim();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                batch[[i, ci, y, x]] = img[(ci, y, x)];
            }
        }
    }
}

fn concat_batches(a: &Tensor, b: &Tensor) -> Tensor {
    if b.shape()[0] == 0 {
        return a.clone();
    }
    if a.shape()[0] == 0 {
        return b.clone();
    }
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("batch concat")
}

/// Per-pixel argmax over the class axis of [N,2,H,W] logits.
fn argmax_map(logits: &Tensor) -> Vec<ArrayD<u32>> {
    let l = logits.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _c, h, w) = l.dim();
    (0..n)
        .map(|i| {
            ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| {
                u32::from(l[(i, 1, ix[0], ix[1])] > l[(i, 0, ix[0], ix[1])])
            })
        })
        .collect()
}

fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let l = logits.view().into_dimensionality::<Ix2>().unwrap();
    (0..l.dim().0)
        .map(|i| u32::from(l[(i, 1)] > l[(i, 0)]))
        .collect()
}

/// Nearest-neighbor downsample of per-image {0,1} gate maps to the anchor
/// grid, flattened over (image, y, x).
fn downsample_flags(maps: &Tensor, n: usize, size: usize, grid: usize) -> ArrayD<bool> {
    let step = size / grid;
    ArrayD::from_shape_fn(IxDyn(&[n * grid * grid]), |ix| {
        let (i, rem) = (ix[0] / (grid * grid), ix[0] % (grid * grid));
        let (gy, gx) = (rem / grid, rem % grid);
        maps[[i, (gy * step + step / 2).min(size - 1), (gx * step + step / 2).min(size - 1)]]
            > 0.5
    })
}

fn downsample_labels(maps: &Tensor, n: usize, size: usize, grid: usize) -> ArrayD<u32> {
    let step = size / grid;
    ArrayD::from_shape_fn(IxDyn(&[n * grid * grid]), |ix| {
        let (i, rem) = (ix[0] / (grid * grid), ix[0] % (grid * grid));
        let (gy, gx) = (rem / grid, rem % grid);
        maps[[i, (gy * step + step / 2).min(size - 1), (gx * step + step / 2).min(size - 1)]]
            as u32
    })
}

fn downsample_label_maps(maps: &[ArrayD<u32>], n: usize, size: usize, grid: usize) -> ArrayD<u32> {
    let step = size / grid;
    ArrayD::from_shape_fn(IxDyn(&[n * grid * grid]), |ix| {
        let (i, rem) = (ix[0] / (grid * grid), ix[0] % (grid * grid));
        let (gy, gx) = (rem / grid, rem % grid);
        maps[i][[(gy * step + step / 2).min(size - 1), (gx * step + step / 2).min(size - 1)]]
    })
}

fn flat_bools(v: &[bool]) -> ArrayD<bool> {
    ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap()
}

fn flat_u32s(v: &[u32]) -> ArrayD<u32> {
    ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap()
}

/// Per-image Dice statistics, pixel IoU, and classification accuracy.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub accuracy: f64,
    pub n_images: usize,
}

/// Evaluates on labeled samples with no augmentation: argmax mask Dice
/// (smooth 1 on counts) with population standard deviation, per-image IoU,
/// and classification accuracy.
pub fn evaluate(model: &HermesModel, cfg: &TrainConfig, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(HermesError::Data("empty validation set".into()));
    }
    let size = cfg.image_size;
    let mut dices = Vec::with_capacity(samples.len());
    let mut ious = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    for chunk in samples.chunks(8) {
        let n = chunk.len();
        let mut imgs = ArrayD::<f64>::zeros(IxDyn(&[n, 3, size, size]));
        for (i, s) in chunk.iter().enumerate() {
            let resized = crate::data::imgops::resize_bilinear(&s.image, size, size);
            fill_image(&mut imgs, i, &resized);
        }
        let mut g = Graph::new();
        let out = model.forward(&mut g, &imgs, ForwardOpts::inference(cfg))?;
        let preds = argmax_map(g.value(out.seg_logits));
        let cls_pred = argmax_rows(g.value(out.cls_logits));
        for (i, s) in chunk.iter().enumerate() {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| HermesError::Data(format!("val sample {} lacks a mask", s.id)))?;
            let mask = crate::data::imgops::resize_nearest_mask(mask, size, size);
            let (mut inter, mut p_sum, mut t_sum) = (0usize, 0usize, 0usize);
            for y in 0..size {
                for x in 0..size {
                    let p = preds[i][[y, x]] as usize;
                    let t = mask[(y, x)] as usize;
                    inter += p & t;
                    p_sum += p;
                    t_sum += t;
                }
            }
            dices.push((2.0 * inter as f64 + 1.0) / ((p_sum + t_sum) as f64 + 1.0));
            ious.push((inter as f64 + 1.0) / ((p_sum + t_sum - inter) as f64 + 1.0));
            let label = s
                .class_label
                .ok_or_else(|| HermesError::Data(format!("val sample {} lacks a label", s.id)))?;
            if cls_pred[i] == label as u32 {
                correct += 1;
            }
        }
    }
    let n = dices.len() as f64;
    let (dice_mean, dice_std) = mean_and_population_std(&dices);
    Ok(EvalReport {
        dice_mean,
        dice_std,
        iou_mean: ious.iter().sum::<f64>() / n,
        accuracy: correct as f64 / n,
        n_images: samples.len(),
    })
}

#[derive(Serialize)]
struct StepLine<'a> {
    iter: usize,
    lr: f64,
    kappa: f64,
    tau: f64,
    #[serde(flatten)]
    report: &'a LossReport,
    accepted_pixel_fraction: f64,
    accepted_image_fraction: f64,
}

#[derive(Serialize)]
struct EvalLine<'a> {
    iter: usize,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Outcome of a [`fit`]: the best and last evaluation plus artifact paths.
pub struct FitOutcome {
    pub best: EvalReport,
    pub last: EvalReport,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub metrics_lines: usize,
}

/// Runs `total_iters` training steps with periodic evaluation, writing JSONL
/// metrics (one object per step, one per evaluation) and best-Dice plus last
/// checkpoints under `out_dir`. `resume` continues from a saved checkpoint
/// with bit-identical schedules.
pub fn fit(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| HermesError::io(out_dir, e))?;
    let mut state = match resume {
        Some(path) => TrainState::load_checkpoint(cfg.clone(), path)?,
        None => TrainState::new(cfg.clone())?,
    };
    let start_iter = state.iter;
    let metrics_path = out_dir.join("metrics.jsonl");
    let file = if resume.is_some() {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)
    } else {
        std::fs::File::create(&metrics_path)
    }
    .map_err(|e| HermesError::io(&metrics_path, e))?;
    let mut sink = std::io::BufWriter::new(file);
    let mut lines = 0usize;

    let val_samples: Vec<Sample> = data
        .index
        .val
        .iter()
        .map(|id| data.load_full(id))
        .collect::<Result<_>>()?;
    if val_samples.is_empty() {
        return Err(HermesError::Data(
            "fit requires a non-empty validation split".into(),
        ));
    }
    if data.index.labeled.is_empty() {
        return Err(HermesError::Data("fit requires labeled samples".into()));
    }

    let best_ckpt = out_dir.join("best.ckpt");
    let last_ckpt = out_dir.join("last.ckpt");
    let mut rng_batch = stream_rng(cfg.seed, STREAM_BATCH);
    let mut labeled_cycle = IdCycler::new(data.index.labeled.clone());
    let mut unlabeled_cycle = IdCycler::new(data.index.unlabeled.clone());
    let half = cfg.batch_size / 2;

    let mut best: Option<EvalReport> = None;
    let mut last_eval: Option<EvalReport> = None;
    let evaluate_now = |state: &TrainState,
                            sink: &mut std::io::BufWriter<std::fs::File>,
                            lines: &mut usize,
                            best: &mut Option<EvalReport>,
                            last_eval: &mut Option<EvalReport>|
     -> Result<()> {
        let report = evaluate(&state.model, cfg, &val_samples)?;
        let line = serde_json::to_string(&EvalLine {
            iter: state.iter,
            report: &report,
        })
        .expect("eval line");
        writeln!(sink, "{line}").map_err(|e| HermesError::io(&metrics_path, e))?;
        *lines += 1;
        let better = best
            .as_ref()
            .map(|b| report.dice_mean > b.dice_mean)
            .unwrap_or(true);
        if better {
            *best = Some(report.clone());
            state.save_checkpoint(
                &best_ckpt,
                serde_json::to_value(&report).expect("metrics json"),
            )?;
        }
        *last_eval = Some(report);
        Ok(())
    };

    if cfg.total_iters == 0 {
        evaluate_now(&state, &mut sink, &mut lines, &mut best, &mut last_eval)?;
    }

    for iter in start_iter..cfg.total_iters {
        let labeled: Vec<Sample> = (0..half)
            .map(|_| data.load(&labeled_cycle.next(&mut rng_batch)))
            .collect::<Result<_>>()?;
        let unlabeled: Vec<Sample> = if data.index.unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..half)
                .map(|_| data.load(&unlabeled_cycle.next(&mut rng_batch)))
                .collect::<Result<_>>()?
        };
        let sched = ScheduleState::new(iter, cfg.total_iters)?;
        let report = state.train_step(&labeled, &unlabeled)?;
        let line = serde_json::to_string(&StepLine {
            iter,
            lr: poly_lr(sched, cfg.lr_init),
            kappa: uncertainty_threshold(sched, cfg.eta_min, cfg.eta_max),
            tau: confidence_threshold(sched),
            report: &report,
            accepted_pixel_fraction: frac(report.accepted_pixels, report.total_pixels),
            accepted_image_fraction: frac(report.accepted_images, report.total_images),
        })
        .expect("step line");
        writeln!(sink, "{line}").map_err(|e| HermesError::io(&metrics_path, e))?;
        lines += 1;
        if state.iter % cfg.eval_interval == 0 {
            evaluate_now(&state, &mut sink, &mut lines, &mut best, &mut last_eval)?;
        }
        if state.iter % 50 == 0 {
            log::info!(
                "iter {}/{} total {:.4} dice_best {:.4}",
                state.iter,
                cfg.total_iters,
                report.total,
                best.as_ref().map(|b| b.dice_mean).unwrap_or(0.0)
            );
        }
    }
    if cfg.total_iters > 0 && state.iter % cfg.eval_interval != 0 {
        evaluate_now(&state, &mut sink, &mut lines, &mut best, &mut last_eval)?;
    }
    sink.flush().map_err(|e| HermesError::io(&metrics_path, e))?;
    let last = last_eval.expect("at least one evaluation ran");
    state.save_checkpoint(&last_ckpt, serde_json::to_value(&last).expect("metrics json"))?;

    Ok(FitOutcome {
        best: best.expect("at least one evaluation ran"),
        last,
        metrics_path,
        best_checkpoint: best_ckpt,
        last_checkpoint: last_ckpt,
        metrics_lines: lines,
    })
}

/// Mean and population standard deviation.
pub(crate) fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, std)
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Endless per-epoch shuffled id stream.
struct IdCycler {
    ids: Vec<String>,
    order: Vec<usize>,
    pos: usize,
}

impl IdCycler {
    fn new(ids: Vec<String>) -> Self {
        IdCycler {
            order: (0..ids.len()).collect(),
            ids,
            pos: 0,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> String {
        assert!(!self.ids.is_empty(), "cycler over empty id list");
        if self.pos == 0 {
            self.order.shuffle(rng);
        }
        let id = self.ids[self.order[self.pos]].clone();
        self.pos = (self.pos + 1) % self.ids.len();
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use approx::assert_abs_diff_eq;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.image_size = 32;
        cfg.seg_base_width = 4;
        cfg.cls_base_width = 4;
        cfg.pixel_embed_dim = 16;
        cfg.image_embed_dim = 8;
        cfg.anchors_per_batch = 8;
        cfg.bank_capacity_pixel = 32;
        cfg.bank_capacity_image = 16;
        cfg.batch_size = 4;
        cfg.total_iters = 4;
        cfg.eval_interval = 2;
        cfg.seed = 11;
        cfg
    }

    fn tiny_dataset(n: usize, cfg: &TrainConfig, n_labeled: usize, val_frac: f64) -> Dataset {
        let samples = synth_generate(n, cfg.image_size, cfg.seed);
        let mut ds = Dataset::from_samples(samples).unwrap();
        ds.split_labeled(n_labeled, val_frac, cfg.seed).unwrap();
        ds
    }

    fn batch(ds: &Dataset, ids: &[String], k: usize) -> Vec<Sample> {
        ids.iter().take(k).map(|id| ds.load(id).unwrap()).collect()
    }

    fn zero_param(state: &mut TrainState, name: &str) {
        let ids: Vec<_> = state.model.store.ids().collect();
        for id in ids {
            if state.model.store.name(id) == name {
                state.model.store.value_mut(id).fill(0.0);
            }
        }
    }

    #[test]
    fn identical_seeds_give_identical_loss_reports() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(12, &cfg, 4, 0.25);
        let labeled = batch(&ds, &ds.index.labeled, 2);
        let unlabeled = batch(&ds, &ds.index.unlabeled, 2);
        let mut a = TrainState::new(cfg.clone()).unwrap();
        let mut b = TrainState::new(cfg).unwrap();
        let ra = a.train_step(&labeled, &unlabeled).unwrap();
        let rb = b.train_step(&labeled, &unlabeled).unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(ra.seg_sup.to_bits(), rb.seg_sup.to_bits());
        assert_eq!(ra.pixel_contrast.to_bits(), rb.pixel_contrast.to_bits());
        assert_eq!(ra.accepted_pixels, rb.accepted_pixels);
    }

    #[test]
    fn all_rejected_batch_matches_supervised_only_run() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(12, &cfg, 4, 0.25);
        let labeled = batch(&ds, &ds.index.labeled, 2);
        let unlabeled = batch(&ds, &ds.index.unlabeled, 2);

        // Zeroed output layers give exactly uniform probabilities: the
        // confidence gate (tau ~ 0.855) rejects every pixel and image.
        let mut gated = TrainState::new(cfg.clone()).unwrap();
        zero_param(&mut gated, "seg.head.w");
        zero_param(&mut gated, "seg.head.b");
        zero_param(&mut gated, "cls.fc.w");
        zero_param(&mut gated, "cls.fc.b");
        let mut sup_only = TrainState::new(cfg).unwrap();
        zero_param(&mut sup_only, "seg.head.w");
        zero_param(&mut sup_only, "seg.head.b");
        zero_param(&mut sup_only, "cls.fc.w");
        zero_param(&mut sup_only, "cls.fc.b");

        let rg = gated.train_step(&labeled, &unlabeled).unwrap();
        assert_eq!(rg.accepted_pixels, 0, "init model should be rejected");
        assert_eq!(rg.accepted_images, 0);
        let rs = sup_only.train_step(&labeled, &[]).unwrap();
        assert_abs_diff_eq!(rg.total, rs.total, epsilon = 1e-6);
        assert_abs_diff_eq!(rg.seg_sup, rs.seg_sup, epsilon = 1e-9);
        assert_abs_diff_eq!(rg.cls_sup, rs.cls_sup, epsilon = 1e-9);
        assert_eq!(rg.seg_unsup, 0.0);
        assert_eq!(rg.cls_unsup, 0.0);
        assert_eq!(rg.pixel_contrast, 0.0);
        assert_eq!(rg.image_contrast, 0.0);
        assert_eq!(rg.itc, 0.0);
    }

    #[test]
    fn bank_sizes_track_accepted_anchor_pushes() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(12, &cfg, 4, 0.25);
        let labeled = batch(&ds, &ds.index.labeled, 2);
        let unlabeled = batch(&ds, &ds.index.unlabeled, 2);
        let mut state = TrainState::new(cfg).unwrap();
        // Confident-everywhere outputs: bias class 1 strongly on both heads.
        let ids: Vec<_> = state.model.store.ids().collect();
        for id in ids {
            let name = state.model.store.name(id).to_string();
            if name == "seg.head.b" || name == "cls.fc.b" {
                let v = state.model.store.value_mut(id);
                v.fill(0.0);
                let n = v.len();
                v.as_slice_mut().unwrap()[n - 1] = 12.0;
            } else if name == "seg.head.w" || name == "cls.fc.w" {
                state.model.store.value_mut(id).fill(0.0);
            }
        }
        let report = state.train_step(&labeled, &unlabeled).unwrap();
        assert_eq!(report.accepted_images, 2);
        assert!(report.pixel_anchors > 0);
        assert_eq!(state.pixel_bank.len(), report.pixel_anchors);
        assert_eq!(state.image_bank.len(), report.accepted_images);
        // Report recombines to the total with config weights.
        let parts = LossParts {
            seg_sup: report.seg_sup,
            cls_sup: report.cls_sup,
            seg_unsup: report.seg_unsup,
            cls_unsup: report.cls_unsup,
            pixel_contrast: report.pixel_contrast,
            image_contrast: report.image_contrast,
            itc: report.itc,
        };
        assert_abs_diff_eq!(
            losses::total_loss(&parts, &state.cfg),
            report.total,
            epsilon = 1e-6
        );
    }

    #[test]
    fn branch_isolation_under_disabled_coupling() {
        // With IAS and ITCL disabled, a train step moves classification
        // weights identically whether or not the segmentation losses exist:
        // the branches share no parameters and no loss path crosses over.
        let mut cfg = tiny_cfg();
        cfg.enable_ias = false;
        cfg.enable_itcl = false;
        cfg.enable_dtcl = false;
        let ds = tiny_dataset(12, &cfg, 4, 0.25);
        let labeled = batch(&ds, &ds.index.labeled, 2);
        let unlabeled = batch(&ds, &ds.index.unlabeled, 2);
        let mut joint = TrainState::new(cfg.clone()).unwrap();
        joint.train_step(&labeled, &unlabeled).unwrap();

        // Second run: same seed, but segmentation losses are zeroed by
        // setting lambda_seg = 0 (no gradient reaches the seg branch).
        let mut cls_only_cfg = cfg.clone();
        cls_only_cfg.lambda_seg = 0.0;
        let mut cls_only = TrainState::new(cls_only_cfg).unwrap();
        cls_only.train_step(&labeled, &unlabeled).unwrap();

        for id in joint.model.store.ids() {
            let name = joint.model.store.name(id);
            if name.starts_with("cls.") {
                assert_eq!(
                    joint.model.store.value(id),
                    cls_only.model.store.value(id),
                    "classification weight {name} diverged"
                );
            }
        }
    }

    #[test]
    fn evaluate_examples() {
        let (mean, std) = mean_and_population_std(&[0.8, 0.6]);
        assert_abs_diff_eq!(mean, 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(std, 0.1, epsilon = 1e-12);

        // All-background head: Dice per image is smoothing-only.
        let cfg = tiny_cfg();
        let ds = tiny_dataset(8, &cfg, 4, 0.5);
        let mut state = TrainState::new(cfg.clone()).unwrap();
        let ids: Vec<_> = state.model.store.ids().collect();
        for id in ids {
            let name = state.model.store.name(id).to_string();
            if name == "seg.head.b" {
                let v = state.model.store.value_mut(id);
                v.fill(0.0);
                v.as_slice_mut().unwrap()[0] = 12.0; // strong background
            } else if name == "seg.head.w" {
                state.model.store.value_mut(id).fill(0.0);
            }
        }
        let val: Vec<Sample> = ds.index.val.iter().map(|id| ds.load_full(id).unwrap()).collect();
        let report = evaluate(&state.model, &cfg, &val).unwrap();
        assert!(report.dice_mean < 0.05, "dice {}", report.dice_mean);
        assert_eq!(report.n_images, val.len());
        assert!(evaluate(&state.model, &cfg, &[]).is_err());
    }

    #[test]
    fn fit_writes_metrics_checkpoints_and_resumes() {
        let cfg = tiny_cfg();
        let ds = tiny_dataset(12, &cfg, 4, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let out = fit(&cfg, &ds, dir.path(), None).unwrap();
        // 4 steps + evals at iters 2 and 4.
        assert_eq!(out.metrics_lines, cfg.total_iters + 2);
        let text = std::fs::read_to_string(&out.metrics_path).unwrap();
        assert_eq!(text.lines().count(), out.metrics_lines);
        assert!(out.best_checkpoint.exists());
        assert!(out.last_checkpoint.exists());

        // Resume from the last checkpoint: restored iteration and schedules
        // match a fresh run's values exactly.
        let state = TrainState::load_checkpoint(cfg.clone(), &out.last_checkpoint).unwrap();
        assert_eq!(state.iter, cfg.total_iters);
        let sched = ScheduleState::new(state.iter, cfg.total_iters).unwrap();
        assert_eq!(
            uncertainty_threshold(sched, cfg.eta_min, cfg.eta_max),
            cfg.eta_min
        );
        assert_eq!(poly_lr(sched, cfg.lr_init), 0.0);

        // A wrong config digest is refused.
        let mut other = cfg.clone();
        other.seed = 999;
        assert!(TrainState::load_checkpoint(other, &out.last_checkpoint).is_err());
    }

    #[test]
    fn fit_with_zero_iters_evaluates_once() {
        let mut cfg = tiny_cfg();
        cfg.total_iters = 0;
        let ds = tiny_dataset(8, &cfg, 4, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let out = fit(&cfg, &ds, dir.path(), None).unwrap();
        assert_eq!(out.metrics_lines, 1);
    }
}

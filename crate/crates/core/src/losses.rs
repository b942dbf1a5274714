//! Training objectives.
//!
//! Every loss is built from [`crate::tensor::Graph`] ops so one backward pass
//! from the total covers the whole step. Gating is realized as filtering:
//! rejected anchors/pairs are excluded from sums rather than multiplied into
//! log numerators, so losses stay finite for any gate configuration. Any
//! component computed over an empty accepted set reports 0, not NaN.

use crate::config::TrainConfig;
use crate::error::{HermesError, Result};
use crate::pseudo::MemoryBank;
use crate::tensor::{scalar, Graph, NodeId, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};

/// Scalar values of every loss component plus bookkeeping counts.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct LossReport {
    pub seg_sup: f64,
    pub cls_sup: f64,
    pub seg_unsup: f64,
    pub cls_unsup: f64,
    pub pixel_contrast: f64,
    pub image_contrast: f64,
    pub itc: f64,
    pub total: f64,
    pub accepted_pixels: usize,
    pub total_pixels: usize,
    pub accepted_images: usize,
    pub total_images: usize,
    pub pixel_anchors: usize,
    pub image_anchors: usize,
    pub zero_norm_warnings: usize,
}

/// The seven weighted components, generic over scalar values or graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<T> {
    pub seg_sup: T,
    pub cls_sup: T,
    pub seg_unsup: T,
    pub cls_unsup: T,
    pub pixel_contrast: T,
    pub image_contrast: T,
    pub itc: T,
}

/// Total objective: lambda_seg (seg_sup + seg_unsup + alpha pc)
/// + lambda_cls (cls_sup + cls_unsup + beta ic) + gamma itc.
/// Ablation flags zero the corresponding terms before weighting.
pub fn total_loss(parts: &LossParts<f64>, cfg: &TrainConfig) -> f64 {
    let (alpha, beta) = if cfg.enable_dtcl {
        (cfg.alpha, cfg.beta)
    } else {
        (0.0, 0.0)
    };
    let gamma = if cfg.enable_itcl { cfg.gamma } else { 0.0 };
    cfg.lambda_seg * (parts.seg_sup + parts.seg_unsup + alpha * parts.pixel_contrast)
        + cfg.lambda_cls * (parts.cls_sup + parts.cls_unsup + beta * parts.image_contrast)
        + gamma * parts.itc
}

/// Graph-node variant of [`total_loss`] with identical coefficients.
pub fn total_loss_node(g: &mut Graph, parts: &LossParts<NodeId>, cfg: &TrainConfig) -> NodeId {
    let (alpha, beta) = if cfg.enable_dtcl {
        (cfg.alpha, cfg.beta)
    } else {
        (0.0, 0.0)
    };
    let gamma = if cfg.enable_itcl { cfg.gamma } else { 0.0 };
    let pc = g.scale(parts.pixel_contrast, alpha);
    let seg_in = g.add(parts.seg_sup, parts.seg_unsup);
    let seg_in = g.add(seg_in, pc);
    let seg = g.scale(seg_in, cfg.lambda_seg);
    let ic = g.scale(parts.image_contrast, beta);
    let cls_in = g.add(parts.cls_sup, parts.cls_unsup);
    let cls_in = g.add(cls_in, ic);
    let cls = g.scale(cls_in, cfg.lambda_cls);
    let itc = g.scale(parts.itc, gamma);
    let st = g.add(seg, cls);
    g.add(st, itc)
}

fn zero(g: &mut Graph) -> NodeId {
    g.constant(scalar(0.0))
}

/// Soft Dice loss: 1 - (2 sum(p t) + smooth) / (sum(p) + sum(t) + smooth).
///
/// `pred` is a foreground-probability node; `target` a same-shaped {0,1}
/// constant.
pub fn dice_loss(g: &mut Graph, pred: NodeId, target: NodeId, smooth: f64) -> Result<NodeId> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(HermesError::Shape(format!(
            "dice_loss: pred {:?} vs target {:?}",
            g.value(pred).shape(),
            g.value(target).shape()
        )));
    }
    let inter = g.mul(pred, target);
    let inter = g.sum(inter);
    let sp = g.sum(pred);
    let st = g.sum(target);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let den = g.add(sp, st);
    let den = g.add_scalar(den, smooth);
    let dice = g.div(num, den);
    let neg = g.neg(dice);
    Ok(g.add_scalar(neg, 1.0))
}

/// Per-element negative log-likelihood of the target class.
/// logits [N,C] + targets len N -> [N]; logits [N,C,H,W] + targets len N*H*W
/// -> [N,H,W].
pub fn ce_per_element(g: &mut Graph, logits: NodeId, targets: Vec<u32>) -> NodeId {
    let logp = g.log_softmax(logits, 1);
    let picked = g.gather_class(logp, targets);
    g.neg(picked)
}

/// Mean over [N, ...] elements, reduced per image: [N,H,W] -> [N,1].
fn per_image_mean(g: &mut Graph, x: NodeId) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let n = shape[0];
    let per: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[n, per.max(1)]);
    let summed = g.sum_axis_keep(flat, 1);
    g.scale(summed, 1.0 / per.max(1) as f64)
}

/// Per-image foreground-probability map from 2-class seg logits:
/// softmax over the class axis, channel 1. [N,2,H,W] -> [N,H,W].
pub fn foreground_prob(g: &mut Graph, seg_logits: NodeId) -> NodeId {
    let shape = g.value(seg_logits).shape().to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let probs = g.softmax(seg_logits, 1);
    let fg = g.gather_class(probs, vec![1u32; n * h * w]);
    debug_assert_eq!(g.value(fg).shape(), &[n, h, w]);
    fg
}

/// Supervised segmentation loss:
/// mean over the labeled batch of (pixel-mean CE + Dice)/2.
pub fn supervised_seg_loss(
    g: &mut Graph,
    seg_logits: NodeId,
    masks: &ArrayD<f64>,
    smooth: f64,
) -> Result<NodeId> {
    let shape = g.value(seg_logits).shape().to_vec();
    if shape[0] == 0 {
        return Ok(zero(g));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if masks.shape() != [n, h, w] {
        return Err(HermesError::Shape(format!(
            "supervised_seg_loss: masks {:?} vs logits {:?}",
            masks.shape(),
            shape
        )));
    }
    let targets: Vec<u32> = masks.iter().map(|&m| m as u32).collect();
    let ce = ce_per_element(g, seg_logits, targets);
    let ce_per_img = per_image_mean(g, ce); // [N,1]

    let fg = foreground_prob(g, seg_logits);
    let mask_node = g.constant(masks.clone());
    let inter = g.mul(fg, mask_node);
    let inter = per_image_sum(g, inter);
    let sp = per_image_sum(g, fg);
    let st = per_image_sum(g, mask_node);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let den = g.add(sp, st);
    let den = g.add_scalar(den, smooth);
    let dice = g.div(num, den);
    let dneg = g.neg(dice);
    let dice_per_img = g.add_scalar(dneg, 1.0); // [N,1]

    let both = g.add(ce_per_img, dice_per_img);
    let half = g.scale(both, 0.5);
    Ok(g.mean(half))
}

/// Per-image sum: [N,...] -> [N,1].
fn per_image_sum(g: &mut Graph, x: NodeId) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    let n = shape[0];
    let per: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[n, per.max(1)]);
    g.sum_axis_keep(flat, 1)
}

/// Supervised classification loss: mean cross-entropy over the labeled batch.
pub fn supervised_cls_loss(g: &mut Graph, cls_logits: NodeId, labels: &[u32]) -> Result<NodeId> {
    let shape = g.value(cls_logits).shape().to_vec();
    if shape[0] == 0 {
        return Ok(zero(g));
    }
    if labels.len() != shape[0] {
        return Err(HermesError::Shape(format!(
            "supervised_cls_loss: {} labels vs batch {}",
            labels.len(),
            shape[0]
        )));
    }
    let ce = ce_per_element(g, cls_logits, labels.to_vec());
    Ok(g.mean(ce))
}

/// Unsupervised segmentation loss: per-image Dice between the strong-view
/// foreground probability and the weak hard pseudo-mask, both gated by `w`
/// before the Dice formula; mean over the unlabeled batch.
pub fn unsup_seg_loss(
    g: &mut Graph,
    strong_fg_prob: NodeId,
    pseudo_mask: &ArrayD<f64>,
    gate_w: &ArrayD<f64>,
    smooth: f64,
) -> Result<NodeId> {
    let shape = g.value(strong_fg_prob).shape().to_vec();
    if shape[0] == 0 {
        return Ok(zero(g));
    }
    if pseudo_mask.shape() != shape.as_slice() || gate_w.shape() != shape.as_slice() {
        return Err(HermesError::Shape(format!(
            "unsup_seg_loss: pred {:?}, pseudo {:?}, gate {:?}",
            shape,
            pseudo_mask.shape(),
            gate_w.shape()
        )));
    }
    let w = g.constant(gate_w.clone());
    let target = g.constant(pseudo_mask * gate_w);
    let pred = g.mul(strong_fg_prob, w);
    let inter = g.mul(pred, target);
    let inter = per_image_sum(g, inter);
    let sp = per_image_sum(g, pred);
    let st = per_image_sum(g, target);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let den = g.add(sp, st);
    let den = g.add_scalar(den, smooth);
    let dice = g.div(num, den);
    let dneg = g.neg(dice);
    let per_img = g.add_scalar(dneg, 1.0);
    Ok(g.mean(per_img))
}

/// Unsupervised classification loss: mean over the unlabeled batch of
/// w * CE(strong logits, weak pseudo-label). Rejected images contribute 0 to
/// the numerator and still count in the denominator.
pub fn unsup_cls_loss(
    g: &mut Graph,
    strong_logits: NodeId,
    pseudo_labels: &[u32],
    gate_w: &[f64],
) -> Result<NodeId> {
    let shape = g.value(strong_logits).shape().to_vec();
    if shape[0] == 0 {
        return Ok(zero(g));
    }
    if pseudo_labels.len() != shape[0] || gate_w.len() != shape[0] {
        return Err(HermesError::Shape(format!(
            "unsup_cls_loss: batch {} vs {} labels / {} gates",
            shape[0],
            pseudo_labels.len(),
            gate_w.len()
        )));
    }
    let ce = ce_per_element(g, strong_logits, pseudo_labels.to_vec());
    let w = g.constant(
        ArrayD::from_shape_vec(IxDyn(&[gate_w.len()]), gate_w.to_vec()).expect("gate shape"),
    );
    let gated = g.mul(ce, w);
    Ok(g.mean(gated))
}

fn mask_matrix(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Array2::from_shape_fn((rows, cols), |(i, j)| f(i, j)).into_dyn()
}

/// Dual-threshold pixel contrastive loss (InfoNCE).
///
/// Anchors are the sampled accepted embeddings (`embeds` [K,D] with one
/// pseudo-class each). For anchor i: positives are the other sampled
/// embeddings of its class plus same-class bank entries; negatives are
/// different-class sampled embeddings plus different-class bank entries.
/// Each positive contributes -log(exp(s+/t) / (exp(s+/t) + sum_neg exp(s-/t)));
/// anchors without positives are skipped. Returns 0 with no valid anchor.
pub fn pixel_contrastive_loss(
    g: &mut Graph,
    embeds: NodeId,
    classes: &[u32],
    bank: &MemoryBank,
    temp: f64,
) -> Result<NodeId> {
    let shape = g.value(embeds).shape().to_vec();
    let k = shape[0];
    if k != classes.len() {
        return Err(HermesError::Shape(format!(
            "pixel_contrastive_loss: {k} embeddings vs {} classes",
            classes.len()
        )));
    }
    if k == 0 {
        return Ok(zero(g));
    }
    let d = shape[1];
    let bank_entries = bank.snapshot();
    let m = bank_entries.len();
    let cols = k + m;
    let mut all_classes = classes.to_vec();
    all_classes.extend(bank_entries.iter().map(|(_, c)| *c));

    let sims_batch = g.matmul_tb(embeds, embeds); // [K,K]
    let x = if m > 0 {
        let bank_mat = Array2::from_shape_fn((m, d), |(i, j)| bank_entries[i].0[j]).into_dyn();
        let bank_node = g.constant(bank_mat);
        let sims_bank = g.matmul_tb(embeds, bank_node); // [K,M]
        g.concat(1, &[sims_batch, sims_bank])
    } else {
        sims_batch
    };
    let x = g.scale(x, 1.0 / temp);

    let pos = |i: usize, j: usize| -> bool { j != i && all_classes[j] == classes[i] };
    let neg = |i: usize, j: usize| -> bool { all_classes[j] != classes[i] };
    let pos_counts: Vec<usize> = (0..k)
        .map(|i| (0..cols).filter(|&j| pos(i, j)).count())
        .collect();
    let valid = pos_counts.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        return Ok(zero(g));
    }

    let exp_x = g.exp(x);
    let neg_mask = g.constant(mask_matrix(k, cols, |i, j| if neg(i, j) { 1.0 } else { 0.0 }));
    let masked = g.mul(exp_x, neg_mask);
    let neg_sum = g.sum_axis_keep(masked, 1); // [K,1]
    let denom = g.add(exp_x, neg_sum); // per-positive denominator
    let log_denom = g.ln(denom);
    let terms = g.sub(log_denom, x); // -log(exp(x)/denom)
    let weights = g.constant(mask_matrix(k, cols, |i, j| {
        if pos_counts[i] > 0 && pos(i, j) {
            1.0 / (pos_counts[i] as f64 * valid as f64)
        } else {
            0.0
        }
    }));
    let weighted = g.mul(terms, weights);
    Ok(g.sum(weighted))
}

/// Inputs for [`image_contrastive_loss`]: 2N view embeddings ordered as
/// (weak_0, strong_0, weak_1, strong_1, ...), one pseudo-class and gate per
/// image.
pub struct ImageContrastInputs<'a> {
    /// [2N, D] embedding node.
    pub embeds: NodeId,
    /// Pseudo-class per image (len N).
    pub classes: &'a [u32],
    /// Acceptance gate per image (len N).
    pub gates: &'a [bool],
    /// View indices acting as anchors; `None` means every view.
    pub anchors: Option<&'a [usize]>,
    /// Extra negatives (entries with a different class join denominators).
    pub bank: Option<&'a MemoryBank>,
}

/// Dual-threshold image contrastive loss.
///
/// For each anchor view the positive set is its own other view
/// (unconditionally) plus views of other images that share its pseudo-class
/// and are accepted. The denominator sums exp(sim/t) over every other
/// in-batch view, plus different-class bank entries when a bank is supplied.
/// The -log terms are averaged over positives, then over anchors.
pub fn image_contrastive_loss(
    g: &mut Graph,
    inputs: &ImageContrastInputs,
    temp: f64,
) -> Result<NodeId> {
    let shape = g.value(inputs.embeds).shape().to_vec();
    let views = shape[0];
    let n = inputs.classes.len();
    if views != 2 * n || inputs.gates.len() != n {
        return Err(HermesError::Shape(format!(
            "image_contrastive_loss: {views} views vs {n} images / {} gates",
            inputs.gates.len()
        )));
    }
    let anchor_rows: Vec<usize> = match inputs.anchors {
        Some(a) => a.to_vec(),
        None => (0..views).collect(),
    };
    if anchor_rows.is_empty() || n == 0 {
        return Ok(zero(g));
    }
    let d = shape[1];
    let bank_entries = inputs
        .bank
        .map(|b| b.snapshot())
        .unwrap_or_default();
    let m = bank_entries.len();
    let cols = views + m;

    let class_of_view = |v: usize| inputs.classes[v / 2];
    let is_pos = |i: usize, j: usize| -> bool {
        if j >= views {
            return false;
        }
        if j / 2 == i / 2 {
            return j != i; // the other view of the same image
        }
        inputs.gates[j / 2] && class_of_view(j) == class_of_view(i)
    };
    // Denominator: every other in-batch view; bank entries only when their
    // class differs from the anchor's.
    let in_denom = |i: usize, j: usize| -> bool {
        if j < views {
            j != i
        } else {
            bank_entries[j - views].1 != class_of_view(i)
        }
    };

    let sims_batch = g.matmul_tb(inputs.embeds, inputs.embeds);
    let x_full = if m > 0 {
        let bank_mat = Array2::from_shape_fn((m, d), |(i, j)| bank_entries[i].0[j]).into_dyn();
        let bank_node = g.constant(bank_mat);
        let sims_bank = g.matmul_tb(inputs.embeds, bank_node);
        g.concat(1, &[sims_batch, sims_bank])
    } else {
        sims_batch
    };
    let x = g.scale(x_full, 1.0 / temp);
    let exp_x = g.exp(x);
    let denom_mask = g.constant(mask_matrix(views, cols, |i, j| {
        if in_denom(i, j) {
            1.0
        } else {
            0.0
        }
    }));
    let masked = g.mul(exp_x, denom_mask);
    let denom = g.sum_axis_keep(masked, 1); // [2N,1]
    let log_denom = g.ln(denom);
    let terms = g.sub(log_denom, x); // broadcast: ln(d_i) - x_ij

    let mut pos_counts = vec![0usize; views];
    for &i in &anchor_rows {
        pos_counts[i] = (0..views).filter(|&j| is_pos(i, j)).count();
    }
    let n_anchors = anchor_rows.len();
    let weights = g.constant(mask_matrix(views, cols, |i, j| {
        if anchor_rows.contains(&i) && j < views && is_pos(i, j) {
            1.0 / (pos_counts[i] as f64 * n_anchors as f64)
        } else {
            0.0
        }
    }));
    let weighted = g.mul(terms, weights);
    Ok(g.sum(weighted))
}

/// Inter-task consistency: batch mean of 1 - cos(f_cls, f_seg).
///
/// Zero-norm rows are defined as loss 1 (cosine 0) and counted in the second
/// return value; they carry no gradient.
pub fn inter_task_consistency_loss(
    g: &mut Graph,
    f_cls: NodeId,
    f_seg: NodeId,
) -> Result<(NodeId, usize)> {
    let sa = g.value(f_cls).shape().to_vec();
    let sb = g.value(f_seg).shape().to_vec();
    if sa != sb {
        return Err(HermesError::Shape(format!(
            "inter_task_consistency_loss: {sa:?} vs {sb:?}"
        )));
    }
    let n = sa[0];
    if n == 0 {
        return Ok((zero(g), 0));
    }
    let row_ok = |t: &Tensor, i: usize| -> bool {
        let v = t.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        v.row(i).iter().map(|x| x * x).sum::<f64>() > 1e-24
    };
    let mut warnings = 0usize;
    let mut valid = vec![1.0f64; n];
    for i in 0..n {
        if !row_ok(g.value(f_cls), i) || !row_ok(g.value(f_seg), i) {
            valid[i] = 0.0;
            warnings += 1;
        }
    }
    let an = g.l2_normalize(f_cls, 1, 1e-24);
    let bn = g.l2_normalize(f_seg, 1, 1e-24);
    let prod = g.mul(an, bn);
    let cos = g.sum_axis_keep(prod, 1); // [N,1]
    let valid_node = g.constant(
        ArrayD::from_shape_vec(IxDyn(&[n, 1]), valid.clone()).expect("valid mask"),
    );
    // valid rows: 1 - cos; invalid rows: constant 1.
    let cos_masked = g.mul(cos, valid_node);
    let negcos = g.neg(cos_masked);
    let per_img = g.add_scalar(negcos, 1.0);
    Ok((g.mean(per_img), warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2, Array3};

    fn unit_row(d: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    fn embed_node(g: &mut Graph, rows: &[Vec<f64>]) -> NodeId {
        let d = rows[0].len();
        let m = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]).into_dyn();
        g.input(m)
    }

    #[test]
    fn dice_loss_examples() {
        let mut g = Graph::new();
        // Perfect overlap on 4 px.
        let ones = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let tgt = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let l = dice_loss(&mut g, ones, tgt, 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.0, epsilon = 1e-12);

        // Disjoint 4-px prediction vs 4-px target on a 3x3 grid.
        let mut p = ArrayD::zeros(IxDyn(&[3, 3]));
        let mut t = ArrayD::zeros(IxDyn(&[3, 3]));
        for i in 0..4 {
            p[[i / 3, i % 3]] = 1.0;
            t[[2 - i / 3, 2 - i % 3]] = 1.0;
        }
        assert_eq!((&p * &t).sum(), 0.0);
        let mut g = Graph::new();
        let pn = g.constant(p);
        let tn = g.constant(t);
        let l = dice_loss(&mut g, pn, tn, 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 1.0 - 1.0 / 9.0, epsilon = 1e-12);

        // All-background prediction and target: smoothing keeps it at 0.
        let mut g = Graph::new();
        let z1 = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let z2 = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let l = dice_loss(&mut g, z1, z2, 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.0, epsilon = 1e-12);

        // Shape mismatch is an error.
        let mut g = Graph::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[3, 2])));
        assert!(dice_loss(&mut g, a, b, 1.0).is_err());
    }

    #[test]
    fn supervised_cls_examples() {
        let mut g = Graph::new();
        let logits = g.constant(arr2(&[[0.3, 0.3]]).into_dyn());
        let l = supervised_cls_loss(&mut g, logits, &[0]).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), std::f64::consts::LN_2, epsilon = 1e-12);

        let mut g = Graph::new();
        let logits = g.constant(arr2(&[[30.0, -30.0]]).into_dyn());
        let l = supervised_cls_loss(&mut g, logits, &[0]).unwrap();
        assert!(g.scalar_value(l) < 1e-12);

        let mut g = Graph::new();
        let empty = g.constant(ArrayD::zeros(IxDyn(&[0, 2])));
        let l = supervised_cls_loss(&mut g, empty, &[]).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn supervised_seg_halves_the_sum_of_ce_and_dice() {
        // One 2x2 image with a known mask; verify L = (CE + Dice)/2 by
        // recomputing the parts separately.
        let logits_arr = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2, 2]),
            vec![0.7, -0.4, 0.1, 0.9, -0.2, 0.8, 0.3, -0.5],
        )
        .unwrap();
        let mask = ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let logits = g.constant(logits_arr.clone());
        let l = supervised_seg_loss(&mut g, logits, &mask, 1.0).unwrap();
        let got = g.scalar_value(l);

        let mut g = Graph::new();
        let logits = g.constant(logits_arr);
        let targets: Vec<u32> = mask.iter().map(|&m| m as u32).collect();
        let ce = ce_per_element(&mut g, logits, targets);
        let ce = g.mean(ce);
        let fg = foreground_prob(&mut g, logits);
        let fg2 = g.reshape(fg, &[2, 2]);
        let m2 = ArrayD::from_shape_vec(IxDyn(&[2, 2]), mask.iter().copied().collect()).unwrap();
        let mn = g.constant(m2);
        let dice = dice_loss(&mut g, fg2, mn, 1.0).unwrap();
        let want = 0.5 * (g.scalar_value(ce) + g.scalar_value(dice));
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn unsup_seg_gating() {
        let n = 1;
        let (h, w) = (2, 2);
        // All pixels rejected: loss 0.
        let mut g = Graph::new();
        let fg = g.constant(ArrayD::from_elem(IxDyn(&[n, h, w]), 0.9));
        let pseudo = ArrayD::from_elem(IxDyn(&[n, h, w]), 1.0);
        let gate0 = ArrayD::zeros(IxDyn(&[n, h, w]));
        let l = unsup_seg_loss(&mut g, fg, &pseudo, &gate0, 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.0, epsilon = 1e-12);

        // Strong equals the pseudo-mask exactly, all accepted: loss 0.
        let mut g = Graph::new();
        let pm = ArrayD::from_shape_vec(IxDyn(&[n, h, w]), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let fg = g.constant(pm.clone());
        let gate1 = ArrayD::from_elem(IxDyn(&[n, h, w]), 1.0);
        let l = unsup_seg_loss(&mut g, fg, &pm, &gate1, 1.0).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unsup_seg_equals_dice_on_accepted_subset() {
        // Half the pixels gated out; masked Dice must equal a brute-force
        // Dice over just the accepted pixels.
        let vals = [0.9, 0.2, 0.7, 0.4, 0.6, 0.1, 0.8, 0.3];
        let tgts = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let gates = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut g = Graph::new();
        let fg = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 4]), vals.to_vec()).unwrap(),
        );
        let pm = ArrayD::from_shape_vec(IxDyn(&[1, 2, 4]), tgts.to_vec()).unwrap();
        let gw = ArrayD::from_shape_vec(IxDyn(&[1, 2, 4]), gates.to_vec()).unwrap();
        let l = unsup_seg_loss(&mut g, fg, &pm, &gw, 1.0).unwrap();

        let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
        for i in 0..8 {
            if gates[i] > 0.0 {
                inter += vals[i] * tgts[i];
                sp += vals[i];
                st += tgts[i];
            }
        }
        let want = 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
        assert_abs_diff_eq!(g.scalar_value(l), want, epsilon = 1e-9);
    }

    #[test]
    fn unsup_cls_examples() {
        // All rejected.
        let mut g = Graph::new();
        let logits = g.constant(arr2(&[[2.0, -1.0], [0.3, 0.4]]).into_dyn());
        let l = unsup_cls_loss(&mut g, logits, &[0, 1], &[0.0, 0.0]).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        // One accepted image with CE 0.8, one rejected: (0.8 + 0)/2.
        let p: f64 = (-0.8f64).exp();
        let logits_arr = arr2(&[[p.ln(), (1.0 - p).ln()], [0.0, 0.0]]).into_dyn();
        let mut g = Graph::new();
        let logits = g.constant(logits_arr);
        let l = unsup_cls_loss(&mut g, logits, &[0, 0], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.4, epsilon = 1e-12);

        // Accepted image already matching its pseudo-label at probability 1.
        let mut g = Graph::new();
        let logits = g.constant(arr2(&[[40.0, -40.0]]).into_dyn());
        let l = unsup_cls_loss(&mut g, logits, &[0], &[1.0]).unwrap();
        assert!(g.scalar_value(l) < 1e-12);
    }

    #[test]
    fn pixel_contrast_reference_values() {
        // One anchor; bank holds 1 same-class (sim 0) and 3 other-class
        // (sim 0) entries: -log(1/4).
        let mut bank = MemoryBank::new(8);
        bank.push(&unit_row(5, 1), 0).unwrap();
        bank.push(&unit_row(5, 2), 1).unwrap();
        bank.push(&unit_row(5, 3), 1).unwrap();
        bank.push(&unit_row(5, 4), 1).unwrap();
        let mut g = Graph::new();
        let a = embed_node(&mut g, &[unit_row(5, 0)]);
        let l = pixel_contrastive_loss(&mut g, a, &[0], &bank, 0.07).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 4.0f64.ln(), epsilon = 1e-9);

        // Positive at similarity 1 and no negatives: 0.
        let mut bank = MemoryBank::new(8);
        bank.push(&unit_row(4, 2), 3).unwrap();
        let mut g = Graph::new();
        let a = embed_node(&mut g, &[unit_row(4, 2)]);
        let l = pixel_contrastive_loss(&mut g, a, &[3], &bank, 0.07).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.0, epsilon = 1e-9);

        // No anchors at all: 0, not NaN.
        let mut g = Graph::new();
        let a = g.constant(ArrayD::zeros(IxDyn(&[0, 4])));
        let l = pixel_contrastive_loss(&mut g, a, &[], &MemoryBank::new(4), 0.07).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
    }

    #[test]
    fn image_contrast_reference_values() {
        // N=1, two identical views: single positive fills the denominator.
        let mut g = Graph::new();
        let e = embed_node(&mut g, &[unit_row(3, 0), unit_row(3, 0)]);
        let inputs = ImageContrastInputs {
            embeds: e,
            classes: &[0],
            gates: &[false],
            anchors: None,
            bank: None,
        };
        let l = image_contrastive_loss(&mut g, &inputs, 0.07).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.0, epsilon = 1e-9);

        // N=2, mutually orthogonal views, no accepted cross pairs:
        // per-anchor -log(1/3) = ln 3.
        let mut g = Graph::new();
        let e = embed_node(
            &mut g,
            &[unit_row(4, 0), unit_row(4, 1), unit_row(4, 2), unit_row(4, 3)],
        );
        let inputs = ImageContrastInputs {
            embeds: e,
            classes: &[0, 0],
            gates: &[false, false],
            anchors: None,
            bank: None,
        };
        let l = image_contrastive_loss(&mut g, &inputs, 0.07).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 3.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn image_contrast_all_rejected_reduces_to_two_view_loss() {
        // Random-ish unit embeddings, every gate down: must equal the pure
        // two-view contrastive value computed by direct enumeration.
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let a = (i as f64 * 0.7).sin();
                let b = (i as f64 * 1.3).cos();
                let c = (i as f64 * 0.31).sin() + 0.2;
                let n = (a * a + b * b + c * c).sqrt();
                vec![a / n, b / n, c / n]
            })
            .collect();
        let temp = 0.07;
        let mut g = Graph::new();
        let e = embed_node(&mut g, &rows);
        let inputs = ImageContrastInputs {
            embeds: e,
            classes: &[0, 0, 1],
            gates: &[false, false, false],
            anchors: None,
            bank: None,
        };
        let l = image_contrastive_loss(&mut g, &inputs, temp).unwrap();

        let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut want = 0.0;
        for i in 0..6 {
            let p = i ^ 1;
            let mut denom = 0.0;
            for j in 0..6 {
                if j != i {
                    denom += (sim(&rows[i], &rows[j]) / temp).exp();
                }
            }
            want += -((sim(&rows[i], &rows[p]) / temp).exp() / denom).ln();
        }
        want /= 6.0;
        assert_abs_diff_eq!(g.scalar_value(l), want, epsilon = 1e-9);
    }

    #[test]
    fn itc_examples() {
        let mut g = Graph::new();
        let a = g.input(arr2(&[[0.6, 0.8]]).into_dyn());
        let b = g.input(arr2(&[[0.6, 0.8]]).into_dyn());
        let (l, w) = inter_task_consistency_loss(&mut g, a, b).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 0.0, epsilon = 1e-9);
        assert_eq!(w, 0);

        let mut g = Graph::new();
        let a = g.input(arr2(&[[1.0, 0.0]]).into_dyn());
        let b = g.input(arr2(&[[0.0, 1.0]]).into_dyn());
        let (l, _) = inter_task_consistency_loss(&mut g, a, b).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 1.0, epsilon = 1e-9);

        let mut g = Graph::new();
        let a = g.input(arr2(&[[0.0, 2.0]]).into_dyn());
        let b = g.input(arr2(&[[0.0, -3.0]]).into_dyn());
        let (l, _) = inter_task_consistency_loss(&mut g, a, b).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 2.0, epsilon = 1e-9);

        // Zero vector: loss defined as 1, warning counted.
        let mut g = Graph::new();
        let a = g.input(arr2(&[[0.0, 0.0]]).into_dyn());
        let b = g.input(arr2(&[[1.0, 0.0]]).into_dyn());
        let (l, w) = inter_task_consistency_loss(&mut g, a, b).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l), 1.0, epsilon = 1e-9);
        assert_eq!(w, 1);
    }

    #[test]
    fn total_loss_examples() {
        let cfg = TrainConfig::default();
        let zeros = LossParts {
            seg_sup: 0.0,
            cls_sup: 0.0,
            seg_unsup: 0.0,
            cls_unsup: 0.0,
            pixel_contrast: 0.0,
            image_contrast: 0.0,
            itc: 0.0,
        };
        assert_eq!(total_loss(&zeros, &cfg), 0.0);

        let ones = LossParts {
            seg_sup: 1.0,
            cls_sup: 1.0,
            seg_unsup: 1.0,
            cls_unsup: 1.0,
            pixel_contrast: 1.0,
            image_contrast: 1.0,
            itc: 1.0,
        };
        // 0.5 * 2.8 + 1.0 * 2.2 + 0.1 = 3.7 with reference weights.
        assert_abs_diff_eq!(total_loss(&ones, &cfg), 3.7, epsilon = 1e-12);

        let mut no_dtcl = cfg.clone();
        no_dtcl.enable_dtcl = false;
        assert_abs_diff_eq!(total_loss(&ones, &no_dtcl), 0.5 * 2.0 + 2.0 + 0.1, epsilon = 1e-12);

        // Linearity probes: unit vector in each component slot.
        let coef = [0.5, 1.0, 0.5, 1.0, 0.5 * 0.8, 1.0 * 0.2, 0.1];
        for k in 0..7 {
            let mut p = zeros;
            let slot = [
                &mut p.seg_sup,
                &mut p.cls_sup,
                &mut p.seg_unsup,
                &mut p.cls_unsup,
                &mut p.pixel_contrast,
                &mut p.image_contrast,
                &mut p.itc,
            ];
            *slot[k] = 1.0;
            assert_abs_diff_eq!(total_loss(&p, &cfg), coef[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn total_node_matches_scalar_total() {
        let cfg = TrainConfig::default();
        let vals = [0.3, 0.7, 0.2, 0.9, 1.3, 0.4, 0.8];
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = vals.iter().map(|&v| g.constant(scalar(v))).collect();
        let parts_n = LossParts {
            seg_sup: nodes[0],
            cls_sup: nodes[1],
            seg_unsup: nodes[2],
            cls_unsup: nodes[3],
            pixel_contrast: nodes[4],
            image_contrast: nodes[5],
            itc: nodes[6],
        };
        let total = total_loss_node(&mut g, &parts_n, &cfg);
        let parts_v = LossParts {
            seg_sup: vals[0],
            cls_sup: vals[1],
            seg_unsup: vals[2],
            cls_unsup: vals[3],
            pixel_contrast: vals[4],
            image_contrast: vals[5],
            itc: vals[6],
        };
        assert_abs_diff_eq!(
            g.scalar_value(total),
            total_loss(&parts_v, &cfg),
            epsilon = 1e-12
        );
    }

    #[test]
    fn contrastive_losses_invariant_to_embedding_rotation() {
        // A plane rotation applied to all embeddings preserves dot products,
        // so both losses must be unchanged.
        let theta: f64 = 0.83;
        let rot = |v: &[f64]| -> Vec<f64> {
            let mut o = v.to_vec();
            o[0] = theta.cos() * v[0] - theta.sin() * v[1];
            o[1] = theta.sin() * v[0] + theta.cos() * v[1];
            o
        };
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let a = (1.0 + i as f64).sin();
                let b = (2.0 + i as f64).cos();
                let c = 0.3 * i as f64 + 0.1;
                let n = (a * a + b * b + c * c).sqrt();
                vec![a / n, b / n, c / n]
            })
            .collect();
        let classes = [0u32, 1, 0, 1];
        let bank = MemoryBank::new(4);
        let mut g = Graph::new();
        let e = embed_node(&mut g, &rows);
        let l1 = pixel_contrastive_loss(&mut g, e, &classes, &bank, 0.07).unwrap();
        let rotated: Vec<Vec<f64>> = rows.iter().map(|r| rot(r)).collect();
        let e2 = embed_node(&mut g, &rotated);
        let l2 = pixel_contrastive_loss(&mut g, e2, &classes, &bank, 0.07).unwrap();
        assert_abs_diff_eq!(g.scalar_value(l1), g.scalar_value(l2), epsilon = 1e-9);
    }

    #[test]
    fn losses_finite_under_any_gating() {
        let mut g = Graph::new();
        let fg = g.constant(ArrayD::from_elem(IxDyn(&[2, 2, 2]), 0.5));
        let pm = ArrayD::zeros(IxDyn(&[2, 2, 2]));
        for gate_val in [0.0, 1.0] {
            let gw = ArrayD::from_elem(IxDyn(&[2, 2, 2]), gate_val);
            let l = unsup_seg_loss(&mut g, fg, &pm, &gw, 1.0).unwrap();
            assert!(g.scalar_value(l).is_finite());
        }
        let e = g.constant(ArrayD::zeros(IxDyn(&[0, 3])));
        let l = pixel_contrastive_loss(&mut g, e, &[], &MemoryBank::new(2), 0.07).unwrap();
        assert!(g.scalar_value(l).is_finite());
        let _ = arr1(&[0.0]);
        let _ = Array3::<f64>::zeros((1, 1, 1));
    }
}

//! Pseudo-label selection-strategy comparison.
//!
//! Trains three identical small classifiers (shared init, shared data order)
//! that differ only in how pseudo-labels are selected — `none` (every
//! pseudo-label used), `conf` (fixed confidence threshold 0.95), `dual`
//! (scheduled uncertainty + confidence gate) — and records, per epoch, the
//! accuracy of accepted pseudo-labels against hidden ground truth together
//! with the acceptance coverage.

use crate::data::{augment_weak, make_view_pair, Dataset, Sample};
use crate::error::{HermesError, Result};
use crate::losses;
use crate::model::layers::{ConvBlock, Linear};
use crate::model::{OptimGroup, ParamStore};
use crate::pseudo::{dual_threshold_gate, make_pseudo_labels};
use crate::schedule::{confidence_threshold, poly_lr, uncertainty_threshold, ScheduleState};
use crate::tensor::{Graph, NodeId, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pseudo-label selection strategies compared by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Every pseudo-label is used.
    NoGate,
    /// Fixed confidence threshold (0.95), no uncertainty gate.
    ConfOnly,
    /// Scheduled dual-threshold gate.
    Dual,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoGate, Strategy::ConfOnly, Strategy::Dual];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoGate => "none",
            Strategy::ConfOnly => "conf",
            Strategy::Dual => "dual",
        }
    }

    fn accepts(self, probs: &ArrayD<f64>, sched: ScheduleState, opts: &PlSimOptions) -> bool {
        match self {
            Strategy::NoGate => true,
            Strategy::ConfOnly => {
                probs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) >= opts.conf_threshold
            }
            Strategy::Dual => {
                let kappa = uncertainty_threshold(sched, opts.eta_min, opts.eta_max);
                let tau = confidence_threshold(sched);
                dual_threshold_gate(probs, kappa, tau, 1e-8)
                    .map(|g| g.accepted.iter().next().copied().unwrap_or(false))
                    .unwrap_or(false)
            }
        }
    }
}

/// Experiment knobs; the defaults match the scaled reference setup
/// (2000 samples, 50 labeled, 40 epochs).
#[derive(Debug, Clone)]
pub struct PlSimOptions {
    pub n_samples: usize,
    pub n_labeled: usize,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr: f64,
    pub unsup_weight: f64,
    /// Decoupled weight decay of the classifier optimizer.
    pub weight_decay: f64,
    /// Base channel width of the small classifier (stages w, 2w, 4w).
    pub width: usize,
    pub conf_threshold: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    pub seed: u64,
}

impl Default for PlSimOptions {
    fn default() -> Self {
        PlSimOptions {
            n_samples: 2000,
            n_labeled: 50,
            image_size: 24,
            epochs: 40,
            batch_labeled: 16,
            batch_unlabeled: 48,
            lr: 2e-3,
            unsup_weight: 1.0,
            weight_decay: 2e-3,
            width: 8,
            conf_threshold: 0.95,
            eta_min: 0.25,
            eta_max: 0.75,
            seed: 0,
        }
    }
}

/// One CSV row: `epoch,strategy,pl_accuracy,coverage`.
#[derive(Debug, Clone)]
pub struct PlSimRow {
    pub epoch: usize,
    pub strategy: Strategy,
    pub pl_accuracy: f64,
    pub coverage: f64,
}

pub fn rows_to_csv(rows: &[PlSimRow]) -> String {
    let mut out = String::from("epoch,strategy,pl_accuracy,coverage\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.epoch,
            r.strategy.name(),
            r.pl_accuracy,
            r.coverage
        ));
    }
    out
}

/// Small 3-stage classifier used by the experiment.
struct SmallCnn {
    store: ParamStore,
    b1: ConvBlock,
    b2: ConvBlock,
    b3: ConvBlock,
    fc: Linear,
}

impl SmallCnn {
    fn new(seed: u64, width: usize) -> SmallCnn {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x504c53);
        let g = OptimGroup::ClsSgd; // single optimizer; group tag unused here
        let b1 = ConvBlock::new(&mut store, "b1", g, 3, width, 3, 2, &mut rng);
        let b2 = ConvBlock::new(&mut store, "b2", g, width, 2 * width, 3, 2, &mut rng);
        let b3 = ConvBlock::new(&mut store, "b3", g, 2 * width, 4 * width, 3, 2, &mut rng);
        let fc = Linear::new(&mut store, "fc", g, 4 * width, 2, &mut rng);
        SmallCnn {
            store,
            b1,
            b2,
            b3,
            fc,
        }
    }

    fn forward(&self, g: &mut Graph, images: &Tensor, track: bool) -> (NodeId, crate::model::BoundParams) {
        let p = self.store.bind_all(g, track);
        let img = g.constant(images.clone());
        let y = self.b1.forward(g, &p, img);
        let y = self.b2.forward(g, &p, y);
        let y = self.b3.forward(g, &p, y);
        let pooled = g.global_avg_pool(y);
        let logits = self.fc.forward(g, &p, pooled);
        (logits, p)
    }
}

/// Adam with decoupled weight decay on weight tensors (norm scales and
/// biases excluded); decay keeps the classifier calibrated instead of
/// letting logits saturate.
struct FlatAdam {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
    weight_decay: f64,
}

impl FlatAdam {
    fn new(n: usize, weight_decay: f64) -> Self {
        FlatAdam {
            m: vec![None; n],
            v: vec![None; n],
            t: 0,
            weight_decay,
        }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Tensor)], lr: f64) {
        self.t += 1;
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1_pow(b1, self.t);
        let bc2 = 1.0 - b1_pow(b2, self.t);
        for (idx, grad) in grads {
            let m = self.m[*idx].get_or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            let v = self.v[*idx].get_or_insert_with(|| Tensor::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m)
                .and(grad)
                .for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v)
                .and(grad)
                .for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let id = crate::model::ParamId::from_index(*idx);
            let decay = if store.name(id).ends_with(".w") {
                self.weight_decay
            } else {
                0.0
            };
            let w = store.value_mut(id);
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|w, &m, &v| {
                *w -= lr * ((m / bc1) / ((v / bc2).sqrt() + eps) + decay * *w);
            });
        }
    }
}

fn b1_pow(b: f64, t: u64) -> f64 {
    b.powi(t as i32)
}

fn batch_tensor(samples: &[&Sample], size: usize) -> Tensor {
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[samples.len(), 3, size, size]));
    for (i, s) in samples.iter().enumerate() {
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    out[[i, c, y, x]] = s.image[(c, y, x)];
                }
            }
        }
    }
    out
}

fn images_tensor(images: &[ndarray::Array3<f64>]) -> Tensor {
    let size = images[0].dim().1;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[images.len(), 3, size, size]));
    for (i, img) in images.iter().enumerate() {
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    out[[i, c, y, x]] = img[(c, y, x)];
                }
            }
        }
    }
    out
}

fn softmax_rows(logits: &Tensor) -> Vec<ArrayD<f64>> {
    let l = logits.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    (0..l.dim().0)
        .map(|i| {
            let a = l[(i, 0)];
            let b = l[(i, 1)];
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            let z = ea + eb;
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![ea / z, eb / z]).unwrap()
        })
        .collect()
}

/// Runs the experiment for one strategy, returning per-epoch rows.
fn run_strategy(
    data: &Dataset,
    strategy: Strategy,
    opts: &PlSimOptions,
) -> Result<Vec<PlSimRow>> {
    let size = opts.image_size;
    let mut model = SmallCnn::new(opts.seed, opts.width);
    let mut adam = FlatAdam::new(model.store.len(), opts.weight_decay);

    let labeled: Vec<Sample> = data
        .index
        .labeled
        .iter()
        .map(|id| data.load(id))
        .collect::<Result<_>>()?;
    let unlabeled_ids = data.index.unlabeled.clone();
    if labeled.is_empty() || unlabeled_ids.is_empty() {
        return Err(HermesError::Data(
            "pl-sim needs labeled and unlabeled samples".into(),
        ));
    }
    // Hidden ground truth for scoring only.
    let hidden: Vec<(Sample, u32)> = unlabeled_ids
        .iter()
        .map(|id| {
            let full = data.load_full(id)?;
            let truth = full.class_label.unwrap() as u32;
            Ok((full.stripped(), truth))
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = unlabeled_ids.len().div_ceil(opts.batch_unlabeled);
    let total_iters = opts.epochs * steps_per_epoch;
    let mut rng_batch = ChaCha8Rng::seed_from_u64(opts.seed);
    rng_batch.set_stream(0xB0);
    let mut rng_aug = ChaCha8Rng::seed_from_u64(opts.seed);
    rng_aug.set_stream(0xA0);

    let mut lab_order: Vec<usize> = (0..labeled.len()).collect();
    let mut lab_pos = 0usize;
    let mut unl_order: Vec<usize> = (0..hidden.len()).collect();
    let mut unl_pos = 0usize;

    let mut rows = Vec::with_capacity(opts.epochs);
    let mut iter = 0usize;
    for epoch in 1..=opts.epochs {
        for _ in 0..steps_per_epoch {
            let sched = ScheduleState::new(iter.min(total_iters), total_iters)?;
            // Labeled batch with weak augmentation.
            let mut lab_imgs = Vec::with_capacity(opts.batch_labeled);
            let mut lab_targets = Vec::with_capacity(opts.batch_labeled);
            for _ in 0..opts.batch_labeled {
                if lab_pos == 0 {
                    lab_order.shuffle(&mut rng_batch);
                }
                let s = &labeled[lab_order[lab_pos]];
                lab_pos = (lab_pos + 1) % labeled.len();
                let wv = augment_weak(s, size, &mut rng_aug);
                lab_imgs.push(wv.image);
                lab_targets.push(s.class_label.unwrap() as u32);
            }
            // Unlabeled batch: weak view decides, strong view trains.
            let mut weak_imgs = Vec::with_capacity(opts.batch_unlabeled);
            let mut strong_imgs = Vec::with_capacity(opts.batch_unlabeled);
            for _ in 0..opts.batch_unlabeled {
                if unl_pos == 0 {
                    unl_order.shuffle(&mut rng_batch);
                }
                let (s, _) = &hidden[unl_order[unl_pos]];
                unl_pos = (unl_pos + 1) % hidden.len();
                let (pair, _) = make_view_pair(s, size, &mut rng_aug);
                weak_imgs.push(pair.weak);
                strong_imgs.push(pair.strong);
            }

            // Weak pass, no gradients.
            let weak_batch = images_tensor(&weak_imgs);
            let mut gw = Graph::new();
            let (weak_logits, _) = model.forward(&mut gw, &weak_batch, false);
            let weak_probs = softmax_rows(gw.value(weak_logits));
            let pseudo: Vec<u32> = weak_probs
                .iter()
                .map(|p| make_pseudo_labels(p).iter().next().copied().unwrap_or(0))
                .collect();
            let gates: Vec<f64> = weak_probs
                .iter()
                .map(|p| f64::from(strategy.accepts(p, sched, opts)))
                .collect();

            // Training graph: labeled CE + gated unsupervised CE.
            let mut g = Graph::new();
            let all_imgs = {
                let mut v = lab_imgs.clone();
                v.extend(strong_imgs.iter().cloned());
                images_tensor(&v)
            };
            let (logits, bound) = model.forward(&mut g, &all_imgs, true);
            let logits_l = g.slice_rows(logits, 0, lab_imgs.len());
            let logits_u = g.slice_rows(logits, lab_imgs.len(), strong_imgs.len());
            let sup = losses::supervised_cls_loss(&mut g, logits_l, &lab_targets)?;
            let unsup = losses::unsup_cls_loss(&mut g, logits_u, &pseudo, &gates)?;
            let unsup_w = g.scale(unsup, opts.unsup_weight);
            let total = g.add(sup, unsup_w);
            g.backward(total)?;
            let mut grads = Vec::new();
            for id in model.store.ids() {
                if let Some(grad) = g.grad(bound.node(id)) {
                    grads.push((id.index(), grad.clone()));
                }
            }
            adam.step(&mut model.store, &grads, poly_lr(sched, opts.lr));
            iter += 1;
        }

        // Epoch scoring: accepted-pseudo-label accuracy over the full
        // unlabeled pool, un-augmented, at the current thresholds.
        let sched = ScheduleState::new(iter.min(total_iters), total_iters)?;
        let mut accepted = 0usize;
        let mut correct = 0usize;
        for chunk in hidden.chunks(64) {
            let refs: Vec<&Sample> = chunk.iter().map(|(s, _)| s).collect();
            let batch = batch_tensor(&refs, size);
            let mut g = Graph::new();
            let (logits, _) = model.forward(&mut g, &batch, false);
            let probs = softmax_rows(g.value(logits));
            for (p, (_, truth)) in probs.iter().zip(chunk.iter()) {
                if strategy.accepts(p, sched, opts) {
                    accepted += 1;
                    let label = make_pseudo_labels(p).iter().next().copied().unwrap_or(0);
                    if label == *truth {
                        correct += 1;
                    }
                }
            }
        }
        let coverage = accepted as f64 / hidden.len() as f64;
        let pl_accuracy = if accepted == 0 {
            0.0
        } else {
            correct as f64 / accepted as f64
        };
        rows.push(PlSimRow {
            epoch,
            strategy,
            pl_accuracy,
            coverage,
        });
        log::info!(
            "pl-sim {} epoch {epoch}: accuracy {pl_accuracy:.4} coverage {coverage:.4}",
            strategy.name()
        );
    }
    Ok(rows)
}

/// Runs all three strategies on one synthetic dataset (identical init and
/// data order) and returns the combined per-epoch rows.
pub fn pl_accuracy_experiment(opts: &PlSimOptions) -> Result<Vec<PlSimRow>> {
    let samples = crate::data::synth_generate(opts.n_samples, opts.image_size, opts.seed);
    let mut data = Dataset::from_samples(samples)?;
    data.split_labeled(opts.n_labeled, 0.0, opts.seed)?;
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        rows.extend(run_strategy(&data, strategy, opts)?);
    }
    Ok(rows)
}

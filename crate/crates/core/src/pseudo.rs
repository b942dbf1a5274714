//! Dual-threshold pseudo-label selection, anchor sampling, and the
//! contrastive memory bank.
//!
//! The gate and sampling operations are pure; [`MemoryBank`] is single-writer
//! within a training step.

use crate::error::{HermesError, Result};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

/// Per-element (pixel or image) gate outcome.
///
/// `accepted[k] = 1  <=>  uncertainty[k] <= kappa  AND  confidence[k] >= tau`.
/// Shapes follow the input with the class axis removed: a `[C]` probability
/// vector yields 0-dim decisions, a `[C,H,W]` map yields `[H,W]` maps.
#[derive(Debug, Clone)]
pub struct GateDecision {
    /// Max softmax probability per element.
    pub confidence: ArrayD<f64>,
    /// Entropy in nats per element (clamped at 0).
    pub uncertainty: ArrayD<f64>,
    pub accepted: ArrayD<bool>,
}

impl GateDecision {
    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    pub fn accepted_fraction(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted_count() as f64 / self.accepted.len() as f64
    }
}

fn validate_probs(probs: &ArrayD<f64>) -> Result<()> {
    if probs.ndim() == 0 {
        return Err(HermesError::Shape(
            "probabilities need a class axis (axis 0)".into(),
        ));
    }
    if probs.iter().any(|&p| p < 0.0) {
        return Err(HermesError::Data("negative probability entry".into()));
    }
    Ok(())
}

/// Shannon entropy in nats, stabilized by `epsilon` inside the log.
///
/// `u(p) = -sum_k p_k ln(p_k + eps)`; exact zeros contribute nothing and the
/// result is clamped at 0 (the stabilizer makes one-hot inputs slightly
/// negative otherwise).
///
/// The class axis is axis 0; the output drops it.
pub fn entropy(probs: &ArrayD<f64>, epsilon: f64) -> Result<ArrayD<f64>> {
    validate_probs(probs)?;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&probs.shape()[1..]));
    for p_slice in probs.axis_iter(Axis(0)) {
        ndarray::Zip::from(&mut out).and(&p_slice).for_each(|u, &p| {
            if p > 0.0 {
                *u -= p * (p + epsilon).ln();
            }
        });
    }
    out.mapv_inplace(|u| u.max(0.0));
    Ok(out)
}

/// Elementwise dual-threshold gate over weak-view probabilities (class axis 0).
pub fn dual_threshold_gate(
    weak_probs: &ArrayD<f64>,
    kappa: f64,
    tau: f64,
    epsilon: f64,
) -> Result<GateDecision> {
    validate_probs(weak_probs)?;
    let uncertainty = entropy(weak_probs, epsilon)?;
    let confidence = weak_probs.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
    let accepted = ndarray::Zip::from(&uncertainty)
        .and(&confidence)
        .map_collect(|&u, &c| u <= kappa && c >= tau);
    Ok(GateDecision {
        confidence,
        uncertainty,
        accepted,
    })
}

/// Hard pseudo-labels: argmax over the class axis, ties broken toward the
/// lower class index.
pub fn make_pseudo_labels(weak_probs: &ArrayD<f64>) -> ArrayD<u32> {
    let c = weak_probs.shape()[0];
    let mut best = weak_probs.index_axis(Axis(0), 0).to_owned();
    let mut labels = ArrayD::<u32>::zeros(IxDyn(&weak_probs.shape()[1..]));
    for k in 1..c {
        ndarray::Zip::from(&mut labels)
            .and(&mut best)
            .and(&weak_probs.index_axis(Axis(0), k))
            .for_each(|l, b, &p| {
                if p > *b {
                    *b = p;
                    *l = k as u32;
                }
            });
    }
    labels
}

/// One sampled anchor: flattened position within the gate maps plus its
/// pseudo-class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub pos: usize,
    pub class: u32,
}

/// Hard (weak/strong disagreement) and simple (agreement) anchors, all drawn
/// from accepted positions.
#[derive(Debug, Clone, Default)]
pub struct AnchorSet {
    pub hard: Vec<Anchor>,
    pub simple: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.hard.len() + self.simple.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty() && self.simple.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.hard.iter().chain(self.simple.iter())
    }
}

/// Samples up to `n` anchors from accepted positions: n/2 from the hard pool
/// (weak/strong prediction disagreement) and n/2 from the simple pool, each
/// uniformly without replacement. A short pool is taken whole and the budget
/// backfilled from the other pool.
pub fn sample_anchors(
    accepted: &ArrayD<bool>,
    pseudo: &ArrayD<u32>,
    weak_pred: &ArrayD<u32>,
    strong_pred: &ArrayD<u32>,
    n: usize,
    rng: &mut impl Rng,
) -> AnchorSet {
    assert_eq!(accepted.shape(), pseudo.shape());
    assert_eq!(accepted.shape(), weak_pred.shape());
    assert_eq!(accepted.shape(), strong_pred.shape());
    assert!(n % 2 == 0, "anchor budget must be even");
    let mut hard_pool = Vec::new();
    let mut simple_pool = Vec::new();
    for (pos, (((&ok, &cls), &wp), &sp)) in accepted
        .iter()
        .zip(pseudo.iter())
        .zip(weak_pred.iter())
        .zip(strong_pred.iter())
        .enumerate()
    {
        if !ok {
            continue;
        }
        let anchor = Anchor { pos, class: cls };
        if wp != sp {
            hard_pool.push(anchor);
        } else {
            simple_pool.push(anchor);
        }
    }
    hard_pool.shuffle(rng);
    simple_pool.shuffle(rng);
    let half = n / 2;
    let take_hard = hard_pool.len().min(half);
    let take_simple = simple_pool.len().min(half);
    // Backfill whichever pool still has candidates.
    let shortfall = n - take_hard - take_simple;
    let extra_hard = (hard_pool.len() - take_hard).min(shortfall);
    let extra_simple = (simple_pool.len() - take_simple).min(shortfall - extra_hard);
    hard_pool.truncate(take_hard + extra_hard);
    simple_pool.truncate(take_simple + extra_simple);
    AnchorSet {
        hard: hard_pool,
        simple: simple_pool,
    }
}

/// Fixed-capacity FIFO store of class-tagged unit embeddings used as
/// contrastive negatives.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    capacity: usize,
    entries: Vec<(Vec<f64>, u32)>,
    write_cursor: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        MemoryBank {
            capacity,
            entries: Vec::new(),
            write_cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an embedding, overwriting the oldest entry once at capacity.
    /// Rejects embeddings that are not unit-norm within 1e-4.
    pub fn push(&mut self, embedding: &[f64], class_tag: u32) -> Result<()> {
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(HermesError::Data(format!(
                "memory bank rejects non-unit embedding (norm {norm:.6})"
            )));
        }
        let entry = (embedding.to_vec(), class_tag);
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            self.entries[self.write_cursor] = entry;
        }
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
        Ok(())
    }

    pub fn push_all<'a>(
        &mut self,
        embeddings: impl IntoIterator<Item = (&'a [f64], u32)>,
    ) -> Result<()> {
        for (e, c) in embeddings {
            self.push(e, c)?;
        }
        Ok(())
    }

    /// Entries oldest-first (insertion order), as a list-based FIFO would
    /// hold them.
    pub fn iter_fifo(&self) -> impl Iterator<Item = (&[f64], u32)> {
        let split = if self.entries.len() == self.capacity {
            self.write_cursor
        } else {
            0
        };
        self.entries[split..]
            .iter()
            .chain(self.entries[..split].iter())
            .map(|(e, c)| (e.as_slice(), *c))
    }

    /// All stored embeddings whose class differs from `anchor_class`,
    /// oldest-first.
    pub fn negatives(&self, anchor_class: u32) -> Vec<&[f64]> {
        self.iter_fifo()
            .filter(|&(_, c)| c != anchor_class)
            .map(|(e, _)| e)
            .collect()
    }

    /// (embedding, class) pairs oldest-first; the contrastive losses consume
    /// this to build their candidate pools.
    pub fn snapshot(&self) -> Vec<(Vec<f64>, u32)> {
        self.iter_fifo().map(|(e, c)| (e.to_vec(), c)).collect()
    }
}

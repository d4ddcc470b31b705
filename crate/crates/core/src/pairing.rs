//! Pseudo-labels, per-class source queues and source-target pair assembly.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A target row whose top softmax probability reached the threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcceptedTarget {
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub accepted: Vec<AcceptedTarget>,
    pub n_rejected: usize,
}

/// Argmax class per row with its softmax probability; rows below
/// `threshold` are dropped and counted. Ties go to the smaller class.
pub fn pseudo_label(target_logits: &ArrayView2<f64>, threshold: f64) -> PseudoLabels {
    let mut accepted = Vec::new();
    let mut n_rejected = 0;
    for (index, row) in target_logits.rows().into_iter().enumerate() {
        let (mut class, mut best) = (0, f64::NEG_INFINITY);
        for (k, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                class = k;
            }
        }
        let z: f64 = row.iter().map(|v| (v - best).exp()).sum();
        let confidence = 1.0 / z;
        if confidence >= threshold {
            accepted.push(AcceptedTarget { index, class, confidence });
        } else {
            n_rejected += 1;
        }
    }
    PseudoLabels { accepted, n_rejected }
}

/// Detached snapshot of a source embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub embedding: Array1<f64>,
    /// Step at which the entry was pushed.
    pub age: u64,
}

/// Bounded FIFO of source embeddings per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PairQueueSet {
    queues: Vec<VecDeque<QueueEntry>>,
    capacity: usize,
}

impl PairQueueSet {
    pub fn new(num_classes: usize, capacity: usize) -> Self {
        Self {
            queues: vec![VecDeque::with_capacity(capacity); num_classes],
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    /// Oldest first.
    pub fn queue(&self, class: usize) -> &VecDeque<QueueEntry> {
        &self.queues[class]
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(|q| q.is_empty())
    }

    /// Appends a copy of each row to its class queue, evicting the oldest
    /// entries beyond capacity.
    pub fn update_queues(&mut self, embeddings: &ArrayView2<f64>, labels: &[usize], step: u64) -> Result<()> {
        if labels.len() != embeddings.nrows() {
            return Err(Error::DimensionMismatch {
                axis: "labels".into(),
                expected: embeddings.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.queues.len()) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0,{})", self.queues.len())));
        }
        for (row, &label) in embeddings.rows().into_iter().zip(labels) {
            let q = &mut self.queues[label];
            q.push_back(QueueEntry {
                embedding: row.to_owned(),
                age: step,
            });
            while q.len() > self.capacity {
                q.pop_front();
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PairSource {
    /// Row of the current source batch; receives gradient.
    InBatch(usize),
    /// Copy of a queued snapshot; receives no gradient.
    Queued(Array1<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub source: PairSource,
    /// Row of the current target batch.
    pub target: usize,
    pub pseudo_class: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
    pub n_skipped_targets: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn n_in_batch(&self) -> usize {
        self.pairs
            .iter()
            .filter(|p| matches!(p.source, PairSource::InBatch(_)))
            .count()
    }

    pub fn n_queued(&self) -> usize {
        self.len() - self.n_in_batch()
    }

    pub fn is_sufficient(&self) -> bool {
        self.pairs.len() >= 2
    }

    /// Fails when fewer than two pairs are available.
    pub fn require_sufficient(&self) -> Result<()> {
        if self.is_sufficient() {
            Ok(())
        } else {
            Err(Error::InsufficientPairs { pairs: self.pairs.len() })
        }
    }

    /// Paired `(source, target)` feature matrices, one row per pair.
    pub fn gather(&self, source: &ArrayView2<f64>, target: &ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = source.ncols();
        let mut s = Array2::zeros((self.pairs.len(), d));
        let mut t = Array2::zeros((self.pairs.len(), target.ncols()));
        for (n, pair) in self.pairs.iter().enumerate() {
            match &pair.source {
                PairSource::InBatch(i) => s.row_mut(n).assign(&source.row(*i)),
                PairSource::Queued(e) => s.row_mut(n).assign(e),
            }
            t.row_mut(n).assign(&target.row(pair.target));
        }
        (s, t)
    }

    /// Sums per-pair gradients back onto batch rows. Queued sources drop
    /// their share.
    pub fn scatter(
        &self,
        grad_pairs_source: &ArrayView2<f64>,
        grad_pairs_target: &ArrayView2<f64>,
        grad_source: &mut Array2<f64>,
        grad_target: &mut Array2<f64>,
    ) {
        for (n, pair) in self.pairs.iter().enumerate() {
            if let PairSource::InBatch(i) = pair.source {
                let mut row = grad_source.row_mut(i);
                row += &grad_pairs_source.row(n);
            }
            let mut row = grad_target.row_mut(pair.target);
            row += &grad_pairs_target.row(n);
        }
    }
}

/// Pairs each accepted target with same-class in-batch sources in batch
/// order, then tops up from that class's queue newest first, up to
/// `pairs_per_target`. Targets with no match at all are skipped.
pub fn build_pairs(
    accepted: &[AcceptedTarget],
    source_labels: &[usize],
    queues: &PairQueueSet,
    pairs_per_target: usize,
) -> Result<PairBatch> {
    if pairs_per_target == 0 {
        return Err(Error::InvalidArgument("pairs_per_target must be >= 1".into()));
    }
    let mut out = PairBatch::default();
    for t in accepted {
        if t.class >= queues.num_classes() {
            return Err(Error::InvalidArgument(format!("pseudo class {} outside [0,{})", t.class, queues.num_classes())));
        }
        let before = out.pairs.len();
        let in_batch = source_labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == t.class)
            .map(|(i, _)| PairSource::InBatch(i));
        let queued = queues
            .queue(t.class)
            .iter()
            .rev()
            .map(|e| PairSource::Queued(e.embedding.clone()));
        for source in in_batch.chain(queued).take(pairs_per_target) {
            out.pairs.push(Pair {
                source,
                target: t.index,
                pseudo_class: t.class,
            });
        }
        if out.pairs.len() == before {
            out.n_skipped_targets += 1;
        }
    }
    Ok(out)
}

/// Per-step pairing counters, summed per epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingStats {
    pub accepted_targets: usize,
    pub rejected_targets: usize,
    pub skipped_targets: usize,
    pub in_batch_pairs: usize,
    pub queue_pairs: usize,
    pub ib_steps: usize,
    pub ib_skipped_steps: usize,
}

impl PairingStats {
    pub fn add(&mut self, other: &PairingStats) {
        self.accepted_targets += other.accepted_targets;
        self.rejected_targets += other.rejected_targets;
        self.skipped_targets += other.skipped_targets;
        self.in_batch_pairs += other.in_batch_pairs;
        self.queue_pairs += other.queue_pairs;
        self.ib_steps += other.ib_steps;
        self.ib_skipped_steps += other.ib_skipped_steps;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pseudo_label_threshold() {
        let logits = array![[100.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0]];
        let out = pseudo_label(&logits.view(), 0.8);
        assert_eq!(out.accepted.len(), 1);
        assert_eq!(out.accepted[0].class, 0);
        assert!((out.accepted[0].confidence - 1.0).abs() < 1e-12);
        assert_eq!(out.n_rejected, 1);
    }

    #[test]
    fn fifo_eviction() {
        let mut q = PairQueueSet::new(2, 2);
        let e = array![[1.0], [2.0], [3.0]];
        q.update_queues(&e.view(), &[1, 1, 1], 0).unwrap();
        let got: Vec<f64> = q.queue(1).iter().map(|x| x.embedding[0]).collect();
        assert_eq!(got, vec![2.0, 3.0]);
        assert_eq!(q.len(0), 0);
    }

    #[test]
    fn in_batch_then_queue() {
        let mut q = PairQueueSet::new(3, 4);
        q.update_queues(&array![[9.0]].view(), &[2], 0).unwrap();
        let t = [AcceptedTarget { index: 0, class: 2, confidence: 0.9 }];
        let batch = build_pairs(&t, &[2, 2, 0], &q, 4).unwrap();
        assert_eq!(batch.len(), 3);
        assert_eq!(batch.n_in_batch(), 2);
        assert_eq!(batch.n_queued(), 1);
        assert_eq!(batch.pairs[0].source, PairSource::InBatch(0));
        assert_eq!(batch.pairs[1].source, PairSource::InBatch(1));
    }

    #[test]
    fn skipped_and_capped() {
        let q = PairQueueSet::new(3, 4);
        let t = [AcceptedTarget { index: 0, class: 1, confidence: 0.9 }];
        let batch = build_pairs(&t, &[2, 0], &q, 4).unwrap();
        assert!(batch.is_empty());
        assert_eq!(batch.n_skipped_targets, 1);
        assert!(matches!(batch.require_sufficient(), Err(Error::InsufficientPairs { pairs: 0 })));

        let mut q = PairQueueSet::new(3, 4);
        q.update_queues(&array![[9.0]].view(), &[1], 0).unwrap();
        let batch = build_pairs(&t, &[1, 0], &q, 1).unwrap();
        assert_eq!(batch.pairs, vec![Pair { source: PairSource::InBatch(0), target: 0, pseudo_class: 1 }]);
    }
}

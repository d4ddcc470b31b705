use ndarray::Array2;
use proptest::prelude::*;
use viewbridge::gradcheck::numeric_gradient;
use viewbridge::objectives::ib_loss;
use viewbridge::pairing::{build_pairs, pseudo_label, AcceptedTarget, PairQueueSet, PairSource};
use viewbridge::reference;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_labels_match_reference(
        (logits, threshold) in (1usize..12, 2usize..6).prop_flat_map(|(n, k)| {
            (prop::collection::vec(prop::collection::vec(-4.0..4.0f64, k), n), 0.0..1.0f64)
        })
    ) {
        let flat: Vec<f64> = logits.iter().flatten().copied().collect();
        let m = Array2::from_shape_vec((logits.len(), logits[0].len()), flat).unwrap();
        let got = pseudo_label(&m.view(), threshold);
        let pairs: Vec<(usize, usize)> = got.accepted.iter().map(|a| (a.index, a.class)).collect();
        let want = reference::pseudo_labels(&logits, threshold);
        prop_assert_eq!(&pairs, &want);
        prop_assert_eq!(got.n_rejected, logits.len() - want.len());
    }

    /// A queue set behaves like keeping the last `capacity` pushes per class.
    #[test]
    fn queues_keep_the_most_recent_entries(
        capacity in 1usize..6,
        pushes in prop::collection::vec(prop::collection::vec(0usize..3, 0..5), 1..12),
    ) {
        let mut queues = PairQueueSet::new(3, capacity);
        let mut history: Vec<Vec<(u64, f64)>> = vec![Vec::new(); 3];
        let mut counter = 0.0;
        for (step, labels) in pushes.iter().enumerate() {
            let emb = Array2::from_shape_fn((labels.len(), 2), |(i, j)| counter + i as f64 + 0.5 * j as f64);
            for (i, &l) in labels.iter().enumerate() {
                history[l].push((step as u64, counter + i as f64));
            }
            counter += 100.0;
            queues.update_queues(&emb.view(), labels, step as u64).unwrap();
        }
        for class in 0..3 {
            let h = &history[class];
            let want = &h[h.len().saturating_sub(capacity)..];
            let got: Vec<(u64, f64)> = queues.queue(class).iter().map(|e| (e.age, e.embedding[0])).collect();
            prop_assert_eq!(got.as_slice(), want);
        }
    }

    #[test]
    fn pairs_take_batch_sources_first_then_newest_queued(
        source_labels in prop::collection::vec(0usize..3, 0..8),
        targets in prop::collection::vec(0usize..3, 1..6),
        queued in prop::collection::vec(0usize..3, 0..10),
        ppt in 1usize..5,
    ) {
        let mut queues = PairQueueSet::new(3, 4);
        let emb = Array2::from_shape_fn((queued.len(), 1), |(i, _)| i as f64);
        queues.update_queues(&emb.view(), &queued, 0).unwrap();
        let accepted: Vec<AcceptedTarget> = targets
            .iter()
            .enumerate()
            .map(|(index, &class)| AcceptedTarget { index, class, confidence: 1.0 })
            .collect();
        let batch = build_pairs(&accepted, &source_labels, &queues, ppt).unwrap();

        let mut want = Vec::new();
        let mut skipped = 0;
        for t in &accepted {
            let mut cands: Vec<PairSource> = Vec::new();
            for (i, &l) in source_labels.iter().enumerate() {
                if l == t.class {
                    cands.push(PairSource::InBatch(i));
                }
            }
            for e in queues.queue(t.class).iter().rev() {
                cands.push(PairSource::Queued(e.embedding.clone()));
            }
            cands.truncate(ppt);
            if cands.is_empty() {
                skipped += 1;
            }
            want.extend(cands.into_iter().map(|s| (s, t.index)));
        }
        let got: Vec<(PairSource, usize)> = batch.pairs.iter().map(|p| (p.source.clone(), p.target)).collect();
        prop_assert_eq!(got, want);
        prop_assert_eq!(batch.n_skipped_targets, skipped);
        prop_assert!(batch.pairs.iter().all(|p| p.pseudo_class == targets[p.target]));
    }
}

/// Gradient reaches in-batch sources and targets, never queued copies; the
/// scattered gradient equals a finite-difference derivative of the paired
/// loss with respect to batch rows.
#[test]
fn gradient_flows_only_to_batch_rows() {
    let n_src = 4;
    let d = 3;
    let source = Array2::from_shape_fn((n_src, d), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.3 - 0.8 + 0.05 * (i * j) as f64);
    let target = Array2::from_shape_fn((3, d), |(i, j)| ((i * 2 + j * 5) % 6) as f64 * 0.25 - 0.5 + 0.03 * i as f64);
    let source_labels = [0, 1, 0, 1];
    let mut queues = PairQueueSet::new(2, 4);
    let old = Array2::from_shape_fn((3, d), |(i, j)| (i as f64 - j as f64) * 0.7 + 0.1);
    queues.update_queues(&old.view(), &[0, 1, 1], 0).unwrap();
    let accepted = [
        AcceptedTarget { index: 0, class: 0, confidence: 0.9 },
        AcceptedTarget { index: 1, class: 1, confidence: 0.95 },
        AcceptedTarget { index: 2, class: 0, confidence: 0.99 },
    ];
    let batch = build_pairs(&accepted, &source_labels, &queues, 3).unwrap();
    assert!(batch.n_queued() > 0 && batch.n_in_batch() > 0);

    let loss_of = |s: &Array2<f64>, t: &Array2<f64>| {
        let (ps, pt) = batch.gather(&s.view(), &t.view());
        ib_loss(&ps.view(), &pt.view(), 5e-3).unwrap().loss.value
    };
    let (ps, pt) = batch.gather(&source.view(), &target.view());
    let ib = ib_loss(&ps.view(), &pt.view(), 5e-3).unwrap();
    let mut gs = Array2::zeros(source.dim());
    let mut gt = Array2::zeros(target.dim());
    batch.scatter(&ib.grad_source.view(), &ib.grad_target.view(), &mut gs, &mut gt);

    let num_s = numeric_gradient(source.as_slice().unwrap(), |x| {
        loss_of(&Array2::from_shape_vec(source.dim(), x.to_vec()).unwrap(), &target)
    });
    let num_t = numeric_gradient(target.as_slice().unwrap(), |x| {
        loss_of(&source, &Array2::from_shape_vec(target.dim(), x.to_vec()).unwrap())
    });
    for (a, n) in gs.iter().zip(&num_s).chain(gt.iter().zip(&num_t)) {
        assert!((a - n).abs() < 1e-6, "{a} vs {n}");
    }
    let queued_before = queues.clone();
    let _ = loss_of(&source, &target);
    assert_eq!(queues, queued_before);
}

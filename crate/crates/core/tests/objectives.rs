use ndarray::{Array1, Array2};
use proptest::prelude::*;
use viewbridge::objectives::{cross_entropy, ib_loss, supcon_loss};
use viewbridge::reference;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap() * scale)
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn normalized(mut a: Array2<f64>) -> Array2<f64> {
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r /= n;
    }
    a
}

fn pair_batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (3usize..10, 1usize..6).prop_flat_map(|(n, d)| (matrix(n, d, 2.0), matrix(n, d, 2.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ce_matches_reference_and_gradient_rows_sum_to_zero(
        (logits, labels) in (1usize..8, 2usize..6).prop_flat_map(|(b, k)| {
            (matrix(b, k, 6.0), prop::collection::vec(0..k, b))
        })
    ) {
        let ce = cross_entropy(&logits.view(), &labels).unwrap();
        prop_assert!((ce.loss.value - reference::cross_entropy(&rows(&logits), &labels)).abs() < 1e-9);
        for r in ce.grad.rows() {
            prop_assert!(r.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn ce_is_shift_invariant_per_row(logits in matrix(4, 5, 3.0), shift in -50.0..50.0f64) {
        let labels = [0, 1, 2, 4];
        let a = cross_entropy(&logits.view(), &labels).unwrap().loss.value;
        let b = cross_entropy(&(&logits + shift).view(), &labels).unwrap().loss.value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn supcon_matches_reference_and_ignores_row_order(
        (p, labels, tau, perm) in (2usize..8, 1usize..6).prop_flat_map(|(b, d)| {
            (
                matrix(b, d, 1.0),
                prop::collection::vec(0usize..3, b),
                0.05..1.0f64,
                Just((0..b).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    ) {
        prop_assume!(p.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        let p = normalized(p);
        let got = match reference::supcon(&rows(&p), &labels, tau) {
            Some(want) => {
                let got = supcon_loss(&p.view(), &labels, tau).unwrap();
                prop_assert!((got.loss.value - want).abs() < 1e-9);
                got
            }
            None => {
                prop_assert!(supcon_loss(&p.view(), &labels, tau).is_err());
                return Ok(());
            }
        };
        let p2 = p.select(ndarray::Axis(0), &perm);
        let labels2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let again = supcon_loss(&p2.view(), &labels2, tau).unwrap();
        prop_assert!((got.loss.value - again.loss.value).abs() < 1e-9);
    }

    #[test]
    fn ib_matches_reference((s, t) in pair_batch(), lambda in 0.0..0.1f64) {
        let got = ib_loss(&s.view(), &t.view(), lambda).unwrap().loss.value;
        prop_assert!((got - reference::ib(&rows(&s), &rows(&t), lambda)).abs() < 1e-9);
    }

    #[test]
    fn ib_is_invariant_to_per_dim_affine_maps(
        (s, t) in pair_batch(),
        scales in prop::collection::vec(0.1..10.0f64, 6),
        shifts in prop::collection::vec(-5.0..5.0f64, 6),
    ) {
        let d = s.ncols();
        let a = Array1::from_vec(scales[..d].to_vec());
        let c = Array1::from_vec(shifts[..d].to_vec());
        let base = ib_loss(&s.view(), &t.view(), 5e-3).unwrap().loss.value;
        let moved = &s * &a + &c;
        let got = ib_loss(&moved.view(), &t.view(), 5e-3).unwrap().loss.value;
        prop_assert!((base - got).abs() < 1e-9, "{} vs {}", base, got);
    }

    #[test]
    fn ib_ignores_pair_order_and_side(
        ((s, t), perm) in pair_batch().prop_flat_map(|(s, t)| {
            let n = s.nrows();
            (Just((s, t)), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
    ) {
        let base = ib_loss(&s.view(), &t.view(), 5e-3).unwrap().loss.value;
        let sp = s.select(ndarray::Axis(0), &perm);
        let tp = t.select(ndarray::Axis(0), &perm);
        let permuted = ib_loss(&sp.view(), &tp.view(), 5e-3).unwrap().loss.value;
        let swapped = ib_loss(&t.view(), &s.view(), 5e-3).unwrap().loss.value;
        prop_assert!((base - permuted).abs() < 1e-9);
        prop_assert!((base - swapped).abs() < 1e-9);
    }

    #[test]
    fn ib_correlation_entries_are_bounded((s, t) in pair_batch()) {
        let ib = ib_loss(&s.view(), &t.view(), 0.0).unwrap();
        prop_assert!(ib.corr.c.iter().all(|v| v.abs() <= 1.0 + 1e-9));
        prop_assert!(ib.loss.value >= 0.0);
    }
}

#[test]
fn ib_of_a_batch_with_itself_has_unit_diagonal() {
    let s = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64 + 0.1 * j as f64);
    let ib = ib_loss(&s.view(), &s.view(), 0.0).unwrap();
    for k in 0..3 {
        assert!((ib.corr.c[[k, k]] - 1.0).abs() < 1e-12);
    }
    assert!(ib.loss.value.abs() < 1e-12);
}

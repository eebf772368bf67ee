mod common;

use ctcprobe::ctc::{collapse, ctc_loss, ctc_loss_brute_force, min_frames};
use ctcprobe::gradcheck::finite_diff_check;
use ctcprobe::param::{ParamStore, Parameter, UpdateMask};
use ctcprobe::tensor::Tensor;
use proptest::prelude::*;

/// Sums path probabilities over all `C^T` frame paths that collapse to `labels`.
fn enumerate(lp: &Tensor, labels: &[usize]) -> f64 {
    let (t, c) = (lp.rows(), lp.cols());
    let mut total = 0.0;
    for code in 0..c.pow(t as u32) {
        let mut rest = code;
        let mut path = Vec::with_capacity(t);
        for _ in 0..t {
            path.push(rest % c);
            rest /= c;
        }
        let mut out: Vec<usize> = Vec::new();
        let mut prev = None;
        for &s in &path {
            if s != 0 && Some(s) != prev {
                out.push(s);
            }
            prev = Some(s);
        }
        if out == labels {
            total += path.iter().enumerate().map(|(i, &s)| lp.get(i, s)).sum::<f64>().exp();
        }
    }
    -total.ln()
}

fn instance() -> impl Strategy<Value = (usize, usize, Vec<usize>, u64)> {
    (1usize..=5, 2usize..=3, 0usize..=3, any::<u64>()).prop_flat_map(|(t, c, l, seed)| {
        (
            Just(t),
            Just(c),
            proptest::collection::vec(1..c, l),
            Just(seed),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dp_matches_enumeration((t, c, labels, seed) in instance()) {
        let lp = common::random_log_probs(&mut common::rng(seed), t, c);
        let oracle = enumerate(&lp, &labels);
        let brute = ctc_loss_brute_force(&lp, &labels, 0).unwrap();
        if min_frames(&labels) > t {
            prop_assert!(oracle.is_infinite());
            prop_assert!(brute.is_infinite());
            prop_assert!(ctc_loss(&lp, &labels, 0).is_err());
        } else {
            let nll = ctc_loss(&lp, &labels, 0).unwrap().neg_log_likelihood;
            prop_assert!((nll - oracle).abs() <= 1e-9, "dp {nll} enumeration {oracle}");
            prop_assert!((brute - oracle).abs() <= 1e-9);
        }
    }

    #[test]
    fn feasibility_is_monotone_in_frames(labels in proptest::collection::vec(1usize..4, 0..6), t in 1usize..12) {
        let lp = common::random_log_probs(&mut common::rng(t as u64), t, 4);
        let lp_longer = common::random_log_probs(&mut common::rng(t as u64 + 1), t + 1, 4);
        if ctc_loss(&lp, &labels, 0).is_ok() {
            prop_assert!(ctc_loss(&lp_longer, &labels, 0).is_ok());
        }
    }

    #[test]
    fn relabeling_leaves_nll_unchanged(seed in any::<u64>(), len in 1usize..4) {
        let mut rng = common::rng(seed);
        let (t, c) = (7, 5);
        let lp = common::random_log_probs(&mut rng, t, c);
        let labels: Vec<usize> = (0..len).map(|_| rng.int_inclusive(1, c - 1)).collect();
        let mut perm: Vec<usize> = (1..c).collect();
        rng.shuffle(&mut perm);
        let map = |k: usize| if k == 0 { 0 } else { perm[k - 1] };
        let mut permuted = Tensor::zeros(&[t, c]);
        for r in 0..t {
            for k in 0..c {
                permuted.set(r, map(k), lp.get(r, k));
            }
        }
        let relabeled: Vec<usize> = labels.iter().map(|&k| map(k)).collect();
        let a = ctc_loss(&lp, &labels, 0).unwrap().neg_log_likelihood;
        let b = ctc_loss(&permuted, &relabeled, 0).unwrap().neg_log_likelihood;
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn collapse_matches_rule(path in proptest::collection::vec(0usize..4, 6)) {
        let mut expected = Vec::new();
        for (i, &s) in path.iter().enumerate() {
            if s != 0 && (i == 0 || path[i - 1] != s) {
                expected.push(s);
            }
        }
        prop_assert_eq!(collapse(&path, 0), expected);
    }
}

#[test]
fn gradient_passes_finite_differences() {
    let mut rng = common::rng(11);
    for (t, c, labels) in [(6, 4, vec![1, 2, 1]), (5, 3, vec![2, 2]), (8, 5, vec![4, 1, 3, 3])] {
        let lp = common::random_log_probs(&mut rng, t, c);
        let mut store = ParamStore::new();
        let id = store.add(Parameter::new("lp", lp, UpdateMask::ALL));
        let res = ctc_loss(store.value(id), &labels, 0).unwrap();
        store.get_mut(id).grad = res.grad;
        let labels2 = labels.clone();
        let report = finite_diff_check(
            move |p| Ok(ctc_loss(p.value(id), &labels2, 0)?.neg_log_likelihood),
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}

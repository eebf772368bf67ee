mod common;

use ctcprobe::graph::Graph;
use ctcprobe::probe::{attention_context, head_posterior};
use ctcprobe::regularizer::{
    attention_probability, focus_logits, per_head_logits, regularization_loss, regularizer_graph, FocusLogits,
    HeadLogits,
};
use ctcprobe::tensor::Tensor;
use proptest::prelude::*;

fn heads_from(values: &[Vec<f64>], rows: usize, cols: usize) -> Vec<HeadLogits> {
    values
        .iter()
        .enumerate()
        .map(|(k, v)| HeadLogits {
            layer: k / 2,
            head: k % 2,
            logits: Tensor::matrix(rows, cols, v.clone()),
        })
        .collect()
}

proptest! {
    #[test]
    fn q_is_a_distribution_without_blank(values in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let focus = FocusLogits { values: Tensor::matrix(3, 4, values), provenance: vec![(0, 0); 12] };
        let q = attention_probability(&focus, 0).unwrap();
        for row in q.iter_rows() {
            prop_assert_eq!(row[0], 0.0);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn focus_is_brute_force_max_and_shift_stable(
        values in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 6), 1..5),
        shift in -100.0f64..100.0,
    ) {
        let heads = heads_from(&values, 2, 3);
        let focus = focus_logits(&heads).unwrap();
        for k in 0..6 {
            let best = (0..values.len()).fold(0, |b, h| if values[h][k] > values[b][k] { h } else { b });
            prop_assert_eq!(focus.values.data()[k], values[best][k]);
            prop_assert_eq!(focus.provenance[k], (best / 2, best % 2));
        }
        let shifted: Vec<Vec<f64>> = values.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
        let moved = focus_logits(&heads_from(&shifted, 2, 3)).unwrap();
        prop_assert_eq!(moved.provenance, focus.provenance);
    }

    #[test]
    fn loss_is_monotone_in_target_probability(base in proptest::collection::vec(-3.0f64..3.0, 5), bump in 0.0f64..4.0) {
        let target = 2;
        let mut raised = base.clone();
        raised[target] += bump;
        let loss = |v: &Vec<f64>| {
            let f = FocusLogits { values: Tensor::matrix(1, 5, v.clone()), provenance: vec![(0, 0); 5] };
            regularization_loss(&attention_probability(&f, 0).unwrap(), &[target], 0.3).unwrap()
        };
        prop_assert!(loss(&raised) <= loss(&base) + 1e-15);
    }
}

#[test]
fn one_by_four_matches_direct_evaluation() {
    let v = [0.9, -0.4, 2.2, 0.05];
    let f = FocusLogits {
        values: Tensor::matrix(1, 4, v.to_vec()),
        provenance: vec![(0, 0); 4],
    };
    let q = attention_probability(&f, 0).unwrap();
    let z: f64 = v[1..].iter().map(|x| x.exp()).sum();
    for k in 1..4 {
        assert!((q.get(0, k) - v[k].exp() / z).abs() < 1e-15);
    }
}

#[test]
fn per_head_logits_compose_probe_pieces() {
    let c = common::small_config();
    let model = common::model(&c, 31);
    let u = common::random_utterance(&mut common::rng(31), &c, 9, 3);
    let fwd = model.forward(&u.features, &u.tokens).unwrap();
    let cls = model.ctc_classifier();
    let heads = per_head_logits(&fwd.attention, &fwd.encoder_out, &cls).unwrap();
    assert_eq!(heads.len(), c.dec_layers * c.heads);
    for h in &heads {
        let w = fwd.attention.get(h.layer, h.head);
        for i in 0..w.rows() {
            let d = attention_context(w.row(i), &fwd.encoder_out).unwrap();
            let post = head_posterior(&cls, &d).unwrap();
            let logits = h.logits.row(i);
            // Softmax of the stored logits reproduces the probe posterior.
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            for (k, p) in post.iter().enumerate() {
                assert!(((logits[k] - m).exp() / z - p).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn graph_value_matches_plain_pipeline() {
    let c = common::small_config();
    let model = common::model(&c, 32);
    let u = common::random_utterance(&mut common::rng(32), &c, 11, 4);
    let fwd = model.forward(&u.features, &u.tokens).unwrap();
    let heads = per_head_logits(&fwd.attention, &fwd.encoder_out, &model.ctc_classifier()).unwrap();
    let steps = u.tokens.len();
    let truncated: Vec<HeadLogits> = heads
        .into_iter()
        .map(|h| HeadLogits {
            logits: Tensor::from_rows(&(0..steps).map(|i| h.logits.row(i).to_vec()).collect::<Vec<_>>()).unwrap(),
            ..h
        })
        .collect();
    let q = attention_probability(&focus_logits(&truncated).unwrap(), 0).unwrap();
    let plain = regularization_loss(&q, &u.tokens, 0.2).unwrap();
    let mut g = Graph::new();
    let trace = model.trace(&mut g, &u.features, &u.tokens).unwrap();
    let r = regularizer_graph(&mut g, &model, &trace, &u.tokens, 0.2).unwrap();
    assert!((g.scalar(r) - plain).abs() < 1e-10, "{} vs {plain}", g.scalar(r));
}

#[test]
fn stop_gradient_on_classifier() {
    for seed in 0..5 {
        let c = common::small_config();
        let mut model = common::model(&c, seed);
        let u = common::random_utterance(&mut common::rng(seed), &c, 10, 3);
        let mut g = Graph::new();
        let trace = model.trace(&mut g, &u.features, &u.tokens).unwrap();
        let r = regularizer_graph(&mut g, &model, &trace, &u.tokens, 1.0).unwrap();
        model.params.zero_grad();
        g.backward_into(r, 1.0, &mut model.params);
        let (w, b) = model.ctc_param_ids();
        assert!(model.params.get(w).grad.data().iter().all(|&x| x == 0.0));
        assert!(model.params.get(b).grad.data().iter().all(|&x| x == 0.0));
        let moved = model
            .params
            .iter()
            .filter(|p| p.name.contains("src_attn"))
            .any(|p| p.grad.data().iter().any(|g| g.abs() > 1e-8));
        assert!(moved);
    }
}

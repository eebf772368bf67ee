//! CTC-guided regularization of source-target attention.
//!
//! Every head's context vector is scored by the CTC classifier; the focus
//! for step `i` and token `c` is the largest such logit over all decoder
//! layers and heads. A softmax over the non-blank tokens turns focus into
//! `q`, and the loss is `-lambda * sum_i ln q[i, y_i]`. The classifier
//! itself is read as a constant on this path, so it only ever learns from
//! the CTC loss.

use crate::ctc::CtcClassifier;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{AttentionRecord, EncoderOutput, Model, Trace};
use crate::param::LossTerm;
use crate::probe::attention_context;
use crate::tensor::Tensor;

/// Probabilities below this are clamped before the log; their gradient is zero.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub lambda: f64,
    pub enabled: bool,
}

impl RegConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            lambda,
            enabled: lambda > 0.0,
        })
    }

    /// Weight actually applied to the loss.
    pub fn effective_lambda(&self) -> f64 {
        if self.enabled {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits {
    pub layer: usize,
    pub head: usize,
    /// `L_out x C`
    pub logits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocusLogits {
    /// `L_out x C`
    pub values: Tensor,
    /// `(layer, head)` attaining each entry, row-major like `values`.
    pub provenance: Vec<(usize, usize)>,
}

impl FocusLogits {
    pub fn provenance_at(&self, step: usize, token: usize) -> (usize, usize) {
        self.provenance[step * self.values.cols() + token]
    }
}

/// CTC logits of every head's context vector at every step.
pub fn per_head_logits(
    attention: &AttentionRecord,
    encoder_out: &EncoderOutput,
    classifier: &CtcClassifier,
) -> Result<Vec<HeadLogits>> {
    attention
        .iter()
        .map(|(layer, head, w)| {
            let mut data = Vec::with_capacity(w.rows() * classifier.vocab_size());
            for row in w.iter_rows() {
                let d = attention_context(row, encoder_out)?;
                data.extend(classifier.logits(&d.d)?);
            }
            Ok(HeadLogits {
                layer,
                head,
                logits: Tensor::matrix(w.rows(), classifier.vocab_size(), data),
            })
        })
        .collect()
}

/// Elementwise maximum over heads; ties resolve to the earliest head in
/// `heads` order (layer-major when produced by [`per_head_logits`]).
pub fn focus_logits(heads: &[HeadLogits]) -> Result<FocusLogits> {
    let first = heads
        .first()
        .ok_or_else(|| Error::invalid("focus over zero heads"))?;
    let shape = first.logits.shape().to_vec();
    if heads.iter().any(|h| h.logits.shape() != shape.as_slice()) {
        return Err(Error::invalid("head logits disagree on shape"));
    }
    let mut values = first.logits.clone();
    let mut provenance = vec![(first.layer, first.head); values.len()];
    for h in &heads[1..] {
        for (k, (cur, &cand)) in values.data_mut().iter_mut().zip(h.logits.data()).enumerate() {
            if cand > *cur {
                *cur = cand;
                provenance[k] = (h.layer, h.head);
            }
        }
    }
    Ok(FocusLogits { values, provenance })
}

fn exclusive_softmax(focus: &Tensor, blank_id: usize) -> Result<Tensor> {
    let c = focus.cols();
    if c < 2 || blank_id >= c {
        return Err(Error::invalid("need a blank plus at least one other token"));
    }
    let mut q = focus.clone();
    for r in 0..q.rows() {
        let row = q.row_mut(r);
        let m = row
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != blank_id)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (k, v) in row.iter_mut().enumerate() {
            *v = if k == blank_id { 0.0 } else { (*v - m).exp() };
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(q)
}

/// Softmax of the focus over all tokens except the blank; the blank column is zero.
pub fn attention_probability(focus: &FocusLogits, blank_id: usize) -> Result<Tensor> {
    exclusive_softmax(&focus.values, blank_id)
}

fn check_targets(q: &Tensor, targets: &[usize], blank_id: Option<usize>) -> Result<()> {
    if q.rows() != targets.len() {
        return Err(Error::invalid(format!(
            "{} rows of q for {} targets",
            q.rows(),
            targets.len()
        )));
    }
    for &t in targets {
        if t >= q.cols() || Some(t) == blank_id {
            return Err(Error::invalid(format!("target {t} is blank or outside vocab")));
        }
    }
    Ok(())
}

/// `-lambda * sum_i ln max(q[i, y_i], PROB_FLOOR)`.
pub fn regularization_loss(q: &Tensor, targets: &[usize], lambda: f64) -> Result<f64> {
    check_targets(q, targets, None)?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let nll: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| -q.get(i, y).max(PROB_FLOOR).ln())
        .sum();
    Ok(lambda * nll)
}

/// Value and gradient (with respect to focus) of the unweighted loss.
fn loss_and_focus_grad(focus: &Tensor, targets: &[usize], blank_id: usize) -> Result<(f64, Tensor)> {
    let q = exclusive_softmax(focus, blank_id)?;
    check_targets(&q, targets, Some(blank_id))?;
    let mut grad = Tensor::zeros(q.shape());
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let p = q.get(i, y);
        loss -= p.max(PROB_FLOOR).ln();
        if p < PROB_FLOOR {
            continue;
        }
        for c in 0..q.cols() {
            if c == blank_id {
                continue;
            }
            let indicator = if c == y { 1.0 } else { 0.0 };
            grad.set(i, c, q.get(i, c) - indicator);
        }
    }
    Ok((loss, grad))
}

/// Builds `L_reg` on the graph from a teacher-forced trace. Only the first
/// `targets.len()` decoder steps (the real tokens, not the end token) are
/// regularized.
pub fn regularizer_graph(
    g: &mut Graph,
    model: &Model,
    trace: &Trace,
    targets: &[usize],
    lambda: f64,
) -> Result<Var> {
    let (w_id, b_id) = model.ctc_param_ids();
    let w = g.param(&model.params, w_id, LossTerm::Regularizer);
    let b = g.param(&model.params, b_id, LossTerm::Regularizer);
    let steps = targets.len();
    let mut heads = Vec::new();
    for layer in &trace.attention {
        for &att in layer {
            let rows = g.slice_rows(att, 0, steps);
            let d = g.matmul(rows, trace.h);
            heads.push(g.linear(d, w, b));
        }
    }
    let (focus, _) = g.max_n(&heads);
    let (loss, grad) = loss_and_focus_grad(g.value(focus), targets, crate::data::BLANK_ID)?;
    Ok(g.scalar_with_grad(focus, lambda * loss, grad.map(|v| v * lambda)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(layer: usize, head: usize, data: Vec<f64>, cols: usize) -> HeadLogits {
        let rows = data.len() / cols;
        HeadLogits {
            layer,
            head,
            logits: Tensor::matrix(rows, cols, data),
        }
    }

    #[test]
    fn focus_single_and_ties() {
        let a = head(0, 0, vec![1.0, 2.0, 3.0, 4.0], 2);
        let f = focus_logits(std::slice::from_ref(&a)).unwrap();
        assert_eq!(f.values, a.logits);
        let b = head(0, 1, vec![1.0, 2.0, 3.0, 4.0], 2);
        let f = focus_logits(&[a.clone(), b]).unwrap();
        assert!(f.provenance.iter().all(|&p| p == (0, 0)));
        let c = head(1, 0, vec![0.0, 5.0, 3.5, -1.0], 2);
        let f = focus_logits(&[a, c]).unwrap();
        assert_eq!(f.values.data(), &[1.0, 5.0, 3.5, 4.0]);
        assert_eq!(f.provenance_at(0, 1), (1, 0));
        assert_eq!(f.provenance_at(1, 1), (0, 0));
        assert!(focus_logits(&[]).is_err());
    }

    #[test]
    fn q_excludes_blank() {
        let f = FocusLogits {
            values: Tensor::matrix(1, 4, vec![1e6, 0.5, 0.5, 0.5]),
            provenance: vec![(0, 0); 4],
        };
        let q = attention_probability(&f, 0).unwrap();
        assert_eq!(q.get(0, 0), 0.0);
        for c in 1..4 {
            assert!((q.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        let f = FocusLogits {
            values: Tensor::matrix(1, 4, vec![-3.0, 0.2, 1.7, -0.4]),
            provenance: vec![(0, 0); 4],
        };
        let q = attention_probability(&f, 0).unwrap();
        let z = 0.2f64.exp() + 1.7f64.exp() + (-0.4f64).exp();
        assert!((q.get(0, 2) - 1.7f64.exp() / z).abs() < 1e-15);
        assert!((q.get(0, 1) - 0.2f64.exp() / z).abs() < 1e-15);
    }

    #[test]
    fn loss_cases() {
        let q = Tensor::matrix(2, 3, vec![0.0, 0.25, 0.75, 0.0, 0.6, 0.4]);
        assert_eq!(regularization_loss(&q, &[2, 1], 0.0).unwrap(), 0.0);
        let v = regularization_loss(&q, &[2, 1], 0.3).unwrap();
        assert!((v + 0.3 * (0.75f64.ln() + 0.6f64.ln())).abs() < 1e-15);
        let perfect = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(regularization_loss(&perfect, &[1, 2], 0.5).unwrap(), 0.0);
        let floored = regularization_loss(&perfect, &[2, 2], 1.0).unwrap();
        assert!((floored + PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(regularization_loss(&q, &[1], 0.1).is_err());
    }

    #[test]
    fn focus_grad_matches_differences() {
        let focus = Tensor::matrix(2, 4, vec![0.3, -1.0, 0.8, 0.1, 2.0, 0.5, -0.2, 0.4]);
        let targets = [2, 3];
        let (_, grad) = loss_and_focus_grad(&focus, &targets, 0).unwrap();
        let h = 1e-6;
        for k in 0..focus.len() {
            let mut p = focus.clone();
            p.data_mut()[k] += h;
            let mut m = focus.clone();
            m.data_mut()[k] -= h;
            let num = (loss_and_focus_grad(&p, &targets, 0).unwrap().0
                - loss_and_focus_grad(&m, &targets, 0).unwrap().0)
                / (2.0 * h);
            assert!((num - grad.data()[k]).abs() < 1e-8);
        }
        assert_eq!(grad.get(0, 0), 0.0);
    }

    #[test]
    fn lambda_validation() {
        assert!(RegConfig::new(-0.1).is_err());
        assert!(!RegConfig::new(0.0).unwrap().enabled);
        assert_eq!(RegConfig::new(0.2).unwrap().effective_lambda(), 0.2);
    }
}

//! CTC head: the single linear classifier over encoder frames, the
//! log-space forward-backward loss, best-path decoding, and an exhaustive
//! alignment enumerator used as a test oracle.

use crate::error::{Error, Result};
use crate::model::EncoderOutput;
use crate::tensor::{argmax, linear_map, log_add_exp, Tensor};

/// Linear layer `W h + b` over encoder frames with a designated blank token.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
    pub blank_id: usize,
}

impl CtcClassifier {
    pub fn new(weight: Tensor, bias: Tensor, blank_id: usize) -> Result<Self> {
        let c = weight.rows();
        if weight.shape().len() != 2 || bias.len() != c {
            return Err(Error::invalid(format!(
                "classifier weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if blank_id >= c {
            return Err(Error::invalid(format!("blank id {blank_id} >= vocab {c}")));
        }
        Ok(Self {
            weight,
            bias,
            blank_id,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weight.rows()
    }

    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    /// Logits for a single vector.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        linear_map(&self.weight, self.bias.data(), x)
    }
}

/// Per-frame classifier logits, `T x C`.
pub fn frame_logits(classifier: &CtcClassifier, frames: &EncoderOutput) -> Result<Tensor> {
    let h = &frames.h;
    if h.cols() != classifier.width() {
        return Err(Error::invalid(format!(
            "frame width {} but classifier expects {}",
            h.cols(),
            classifier.width()
        )));
    }
    let c = classifier.vocab_size();
    let mut data = Vec::with_capacity(h.rows() * c);
    for row in h.iter_rows() {
        data.extend(classifier.logits(row)?);
    }
    Ok(Tensor::matrix(h.rows(), c, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcLossResult {
    /// `-ln P(labels | log_probs)` in nats.
    pub neg_log_likelihood: f64,
    /// `d NLL / d log_probs`, same shape as the input.
    pub grad: Tensor,
}

/// Fewest frames that can emit `labels`: one per label plus a blank
/// between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_labels(labels: &[usize], vocab: usize, blank_id: usize) -> Result<()> {
    for &l in labels {
        if l == blank_id {
            return Err(Error::invalid("blank token in CTC labels"));
        }
        if l >= vocab {
            return Err(Error::invalid(format!("label {l} outside vocab {vocab}")));
        }
    }
    Ok(())
}

/// CTC negative log-likelihood and its gradient with respect to the
/// per-frame log-probabilities (`T x C`).
pub fn ctc_loss(log_probs: &Tensor, labels: &[usize], blank_id: usize) -> Result<CtcLossResult> {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    if log_probs.shape().len() != 2 || frames == 0 {
        return Err(Error::invalid("log_probs must be a non-empty T x C matrix"));
    }
    if blank_id >= vocab {
        return Err(Error::invalid("blank id outside vocab"));
    }
    check_labels(labels, vocab, blank_id)?;
    let required = min_frames(labels);
    if required > frames {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            required,
            frames,
        });
    }

    // Blank-interleaved label sequence: ε l1 ε l2 ... lL ε
    let s_len = 2 * labels.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank_id } else { labels[s / 2] })
        .collect();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank_id && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = log_probs.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = log_probs.get(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut v = prev[s];
            if s >= 1 {
                v = log_add_exp(v, prev[s - 1]);
            }
            if can_skip(s) {
                v = log_add_exp(v, prev[s - 2]);
            }
            cur[s] = v + log_probs.get(t, ext[s]);
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = log_probs.get(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = log_probs.get(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut v = next[s];
            if s + 1 < s_len {
                v = log_add_exp(v, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                v = log_add_exp(v, next[s + 2]);
            }
            cur[s] = v + log_probs.get(t, ext[s]);
        }
    }

    let tail = &alpha[last..];
    let log_p = if s_len > 1 {
        log_add_exp(tail[s_len - 1], tail[s_len - 2])
    } else {
        tail[0]
    };
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment {
            labels: labels.len(),
            required,
            frames,
        });
    }

    // Occupancy: alpha and beta both include the emission at t.
    let mut grad = Tensor::zeros(&[frames, vocab]);
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occ = (a + b - log_probs.get(t, ext[s]) - log_p).exp();
            let c = ext[s];
            grad.set(t, c, grad.get(t, c) - occ);
        }
    }
    Ok(CtcLossResult {
        neg_log_likelihood: -log_p,
        grad,
    })
}

/// Removes adjacent repeats, then blanks.
pub fn collapse(path: &[usize], blank_id: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank_id {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Exhaustive CTC likelihood: sums the probability of every length-`T`
/// path that collapses to `labels`. Returns `+inf` when no path does.
pub fn ctc_loss_brute_force(log_probs: &Tensor, labels: &[usize], blank_id: usize) -> Result<f64> {
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    let count = (vocab as f64).powi(frames as i32);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!("{vocab}^{frames} paths")));
    }
    let mut path = vec![0usize; frames];
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path, blank_id) == labels {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &c)| log_probs.get(t, c))
                .sum();
            total = log_add_exp(total, lp);
        }
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == frames {
                return Ok(-total);
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Best-path decode: per-frame argmax (lowest index on ties), then collapse.
pub fn greedy_collapse_decode(log_probs: &Tensor, blank_id: usize) -> Vec<usize> {
    let path: Vec<usize> = log_probs.iter_rows().map(argmax).collect();
    collapse(&path, blank_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_softmax_rows;

    fn lp(rows: &[&[f64]]) -> Tensor {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_frame_single_label() {
        let m = lp(&[&[0.2, 0.5, 0.3]]);
        let r = ctc_loss(&m, &[1], 0).unwrap();
        assert!((r.neg_log_likelihood + 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label() {
        let p1 = [0.2, 0.5, 0.3];
        let p2 = [0.6, 0.1, 0.3];
        let m = lp(&[&p1, &p2]);
        let expect = -(p1[1] * p2[1] + p1[0] * p2[1] + p1[1] * p2[0]).ln();
        let r = ctc_loss(&m, &[1], 0).unwrap();
        assert!((r.neg_log_likelihood - expect).abs() < 1e-12);
        let bf = ctc_loss_brute_force(&m, &[1], 0).unwrap();
        assert!((bf - expect).abs() < 1e-12);
    }

    #[test]
    fn repeat_needs_separator() {
        let m = lp(&[&[0.2, 0.5, 0.3], &[0.4, 0.4, 0.2]]);
        assert!(matches!(
            ctc_loss(&m, &[1, 1], 0),
            Err(Error::InfeasibleAlignment { required: 3, .. })
        ));
        let p = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.3, 0.3, 0.4]];
        let m = lp(&[&p[0], &p[1], &p[2]]);
        let expect = -(p[0][1] * p[1][0] * p[2][1]).ln();
        assert!((ctc_loss(&m, &[1, 1], 0).unwrap().neg_log_likelihood - expect).abs() < 1e-12);
        assert!((ctc_loss_brute_force(&m, &[1, 1], 0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn brute_force_unreachable_is_infinite() {
        let m = lp(&[&[0.5, 0.5]]);
        assert_eq!(ctc_loss_brute_force(&m, &[1, 1], 0).unwrap(), f64::INFINITY);
        let big = Tensor::zeros(&[20, 5]);
        assert!(matches!(
            ctc_loss_brute_force(&big, &[1], 0),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn blank_in_labels_rejected() {
        let m = lp(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(matches!(ctc_loss(&m, &[0], 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_labels_is_all_blank() {
        let m = lp(&[&[0.7, 0.3], &[0.6, 0.4]]);
        let r = ctc_loss(&m, &[], 0).unwrap();
        assert!((r.neg_log_likelihood + (0.7f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_match_input() {
        let logits = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let m = log_softmax_rows(&logits);
        let r = ctc_loss(&m, &[1, 2], 0).unwrap();
        assert_eq!(r.grad.shape(), m.shape());
        // Occupancies over each frame sum to one.
        for row in r.grad.iter_rows() {
            assert!((row.iter().sum::<f64>() + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_decode_rules() {
        let onehot = |ids: &[usize]| {
            let rows: Vec<Vec<f64>> = ids
                .iter()
                .map(|&i| (0..3).map(|c| if c == i { 0.0 } else { -5.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        assert_eq!(greedy_collapse_decode(&onehot(&[1, 1, 0, 1]), 0), vec![1, 1]);
        assert!(greedy_collapse_decode(&onehot(&[0, 0, 0]), 0).is_empty());
        assert_eq!(greedy_collapse_decode(&onehot(&[2, 1, 1, 0, 2, 2]), 0), vec![2, 1, 2]);
        // Tie: lowest index wins, here the blank.
        let tie = Tensor::matrix(1, 3, vec![0.0, 0.0, -1.0]);
        assert!(greedy_collapse_decode(&tie, 0).is_empty());
    }

    #[test]
    fn frame_logits_identity() {
        let h = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]);
        let enc = EncoderOutput { h: h.clone() };
        let clf = CtcClassifier::new(Tensor::identity(3), Tensor::zeros(&[3]), 0).unwrap();
        assert_eq!(frame_logits(&clf, &enc).unwrap(), h);
        assert!(CtcClassifier::new(Tensor::identity(3), Tensor::zeros(&[3]), 3).is_err());
    }

    #[test]
    fn frame_logits_rowwise() {
        let w = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 1.3).cos()).collect());
        let b = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]);
        let clf = CtcClassifier::new(w.clone(), b.clone(), 0).unwrap();
        let h = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.4).sin()).collect());
        let out = frame_logits(&clf, &EncoderOutput { h: h.clone() }).unwrap();
        for t in 0..4 {
            for c in 0..4 {
                let mut e = b.data()[c];
                for d in 0..3 {
                    e += w.get(c, d) * h.get(t, d);
                }
                assert!((out.get(t, c) - e).abs() < 1e-14);
            }
        }
        let bad = EncoderOutput { h: Tensor::zeros(&[2, 5]) };
        assert!(frame_logits(&clf, &bad).is_err());
    }
}

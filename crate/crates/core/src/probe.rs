//! Reads source-target attention heads through the CTC classifier.
//!
//! For each decoder layer, head and output step the attention weights are
//! applied to the raw encoder frames (no value projection), the result is
//! classified by the CTC layer, and the winning token is placed relative to
//! the current step in the reference transcript.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::ctc::CtcClassifier;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, ForwardOutput};
use crate::tensor::{argmax, softmax_row};

/// Tolerance on `sum(weights) == 1` accepted by [`attention_context`].
pub const WEIGHT_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Epsilon,
    /// Token of a later step.
    Forward,
    /// Token of the current step.
    Present,
    /// Token of an earlier step.
    Backward,
    /// Token absent from the transcript.
    OffTarget,
}

impl Category {
    pub fn marker(self) -> char {
        match self {
            Category::Epsilon => '.',
            Category::Forward => 'F',
            Category::Present => 'P',
            Category::Backward => 'B',
            Category::OffTarget => 'O',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadClassification {
    pub layer: usize,
    pub head: usize,
    pub step: usize,
    pub token: usize,
    pub posterior: f64,
    pub category: Category,
    pub matched_position: Option<usize>,
}

/// `d = sum_t w_t h_t` for one head and step.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding {
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub utterance_id: String,
    pub targets: Vec<usize>,
    /// Teacher-forced decoder argmax per step.
    pub predictions: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    /// Step-major, then layer, then head.
    pub cells: Vec<HeadClassification>,
}

impl ProbeReport {
    pub fn cell(&self, step: usize, layer: usize, head: usize) -> &HeadClassification {
        &self.cells[(step * self.layers + layer) * self.heads + head]
    }

    pub fn steps(&self) -> usize {
        self.targets.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub mean: f64,
    /// Population standard deviation over utterances.
    pub std: f64,
}

pub fn attention_context(weights_row: &[f64], encoder_out: &EncoderOutput) -> Result<ContextEmbedding> {
    let h = &encoder_out.h;
    if weights_row.len() != h.rows() {
        return Err(Error::invalid(format!(
            "{} weights for {} frames",
            weights_row.len(),
            h.rows()
        )));
    }
    let sum: f64 = weights_row.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL || weights_row.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::invalid(format!(
            "attention weights must be non-negative and sum to 1 (sum = {sum})"
        )));
    }
    let mut d = vec![0.0; h.cols()];
    for (w, row) in weights_row.iter().zip(h.iter_rows()) {
        for (acc, v) in d.iter_mut().zip(row) {
            *acc += w * v;
        }
    }
    Ok(ContextEmbedding { d })
}

pub fn head_posterior(classifier: &CtcClassifier, d: &ContextEmbedding) -> Result<Vec<f64>> {
    softmax_row(&classifier.logits(&d.d)?)
}

/// Argmax token (lowest id on ties) and its probability.
pub fn classify_head(posterior: &[f64]) -> (usize, f64) {
    let k = argmax(posterior);
    (k, posterior[k])
}

/// Places `token` relative to `step` using the nearest occurrence in
/// `targets`; equidistant occurrences resolve to the later position.
pub fn categorize_prediction(
    token: usize,
    step: usize,
    targets: &[usize],
    blank_id: usize,
) -> (Category, Option<usize>) {
    if token == blank_id {
        return (Category::Epsilon, None);
    }
    let nearest = targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == token)
        .map(|(j, _)| j)
        .min_by_key(|&j| (j.abs_diff(step), std::cmp::Reverse(j)));
    match nearest {
        None => (Category::OffTarget, None),
        Some(j) if j > step => (Category::Forward, Some(j)),
        Some(j) if j == step => (Category::Present, Some(j)),
        Some(j) => (Category::Backward, Some(j)),
    }
}

/// Classifies every (step, layer, head) of a teacher-forced pass over `targets`.
pub fn probe_utterance(
    utterance_id: &str,
    forward: &ForwardOutput,
    classifier: &CtcClassifier,
    targets: &[usize],
) -> Result<ProbeReport> {
    if targets.is_empty() {
        return Err(Error::invalid("probe needs a non-empty transcript"));
    }
    let record = &forward.attention;
    let (layers, heads) = (record.layers(), record.heads());
    if layers == 0 || heads == 0 {
        return Err(Error::invalid("forward output carries no attention"));
    }
    for (l, h, w) in record.iter() {
        if w.rows() < targets.len() {
            return Err(Error::invalid(format!(
                "layer {l} head {h} has {} steps for {} targets",
                w.rows(),
                targets.len()
            )));
        }
    }
    let mut cells = Vec::with_capacity(targets.len() * layers * heads);
    for step in 0..targets.len() {
        for layer in 0..layers {
            for head in 0..heads {
                let w = record.get(layer, head).row(step);
                let d = attention_context(w, &forward.encoder_out)?;
                let post = head_posterior(classifier, &d)?;
                let (token, posterior) = classify_head(&post);
                let (category, matched_position) =
                    categorize_prediction(token, step, targets, classifier.blank_id);
                cells.push(HeadClassification {
                    layer,
                    head,
                    step,
                    token,
                    posterior,
                    category,
                    matched_position,
                });
            }
        }
    }
    let logits = &forward.decoder_logits;
    let predictions = (0..targets.len().min(logits.rows()))
        .map(|i| argmax(logits.row(i)))
        .collect();
    Ok(ProbeReport {
        utterance_id: utterance_id.to_string(),
        targets: targets.to_vec(),
        predictions,
        layers,
        heads,
        cells,
    })
}

/// Distinct argmax tokens (blank included) found by each layer across all
/// heads and steps of one utterance.
pub fn unique_tokens_per_layer(report: &ProbeReport) -> Vec<usize> {
    let mut sets = vec![BTreeSet::new(); report.layers];
    for c in &report.cells {
        sets[c.layer].insert(c.token);
    }
    sets.iter().map(BTreeSet::len).collect()
}

/// Mean and population standard deviation of [`unique_tokens_per_layer`]
/// over utterances.
pub fn layer_unique_token_stats(reports: &[ProbeReport]) -> Result<Vec<LayerStats>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no probe reports"))?;
    let layers = first.layers;
    if reports.iter().any(|r| r.layers != layers) {
        return Err(Error::invalid("reports disagree on layer count"));
    }
    let counts: Vec<Vec<usize>> = reports.iter().map(unique_tokens_per_layer).collect();
    let n = reports.len() as f64;
    Ok((0..layers)
        .map(|layer| {
            let mean = counts.iter().map(|c| c[layer] as f64).sum::<f64>() / n;
            let var = counts
                .iter()
                .map(|c| (c[layer] as f64 - mean).powi(2))
                .sum::<f64>()
                / n;
            LayerStats {
                layer,
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

/// Share of cells in `category` across `reports`.
pub fn category_fraction(reports: &[ProbeReport], category: Category) -> f64 {
    let total: usize = reports.iter().map(|r| r.cells.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = reports
        .iter()
        .flat_map(|r| &r.cells)
        .filter(|c| c.category == category)
        .count();
    hits as f64 / total as f64
}

/// Tab-separated grid with one row per target step.
///
/// Columns: `step`, `truth`, `prediction`, one `L{layer}H{head}` column per
/// head (layer-major), then `categories`, which holds one marker per head
/// column (`.` blank, `F` forward, `P` present, `B` backward, `O` off-target,
/// `-` below `posterior_threshold`). Blank cells and cells whose posterior
/// is below the threshold are empty.
pub fn render_report(report: &ProbeReport, vocab: &Vocab, posterior_threshold: f64) -> Result<String> {
    if !(0.0..=1.0).contains(&posterior_threshold) {
        return Err(Error::invalid("posterior threshold must lie in [0, 1]"));
    }
    let mut out = String::from("step\ttruth\tprediction");
    for l in 0..report.layers {
        for h in 0..report.heads {
            let _ = write!(out, "\tL{l}H{h}");
        }
    }
    out.push_str("\tcategories\n");
    for step in 0..report.steps() {
        let pred = report
            .predictions
            .get(step)
            .map_or("", |&p| vocab.name(p));
        let _ = write!(out, "{step}\t{}\t{pred}", vocab.name(report.targets[step]));
        let mut markers = String::with_capacity(report.layers * report.heads);
        for l in 0..report.layers {
            for h in 0..report.heads {
                let c = report.cell(step, l, h);
                let shown = c.category != Category::Epsilon && c.posterior >= posterior_threshold;
                out.push('\t');
                if shown {
                    out.push_str(vocab.name(c.token));
                }
                markers.push(if c.category != Category::Epsilon && !shown {
                    '-'
                } else {
                    c.category.marker()
                });
            }
        }
        let _ = writeln!(out, "\t{markers}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::frame_logits;
    use crate::data::BLANK_ID;
    use crate::model::AttentionRecord;
    use crate::tensor::Tensor;

    fn enc() -> EncoderOutput {
        EncoderOutput {
            h: Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]),
        }
    }

    #[test]
    fn context_selection_and_mean() {
        let e = enc();
        assert_eq!(attention_context(&[0.0, 1.0, 0.0], &e).unwrap().d, vec![-1.0, 0.5]);
        let u = attention_context(&[1.0 / 3.0; 3], &e).unwrap().d;
        assert!((u[0] - 1.0).abs() < 1e-15 && (u[1] - 0.5 / 3.0).abs() < 1e-15);
        let w = [0.2, 0.5, 0.3];
        let d = attention_context(&w, &e).unwrap().d;
        let expect = [0.2 - 0.5 + 0.9, 0.4 + 0.25 - 0.6];
        assert!((d[0] - expect[0]).abs() < 1e-15 && (d[1] - expect[1]).abs() < 1e-15);
        assert!(attention_context(&[0.5, 0.4, 0.0], &e).is_err());
        assert!(attention_context(&[1.5, -0.5, 0.0], &e).is_err());
        assert!(attention_context(&[1.0, 0.0], &e).is_err());
    }

    #[test]
    fn posterior_cases() {
        let zero = CtcClassifier::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[4]), 0).unwrap();
        let p = head_posterior(&zero, &ContextEmbedding { d: vec![3.0, -1.0] }).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(classify_head(&p), (0, 0.25));
        assert_eq!(classify_head(&[0.1, 0.7, 0.2]), (1, 0.7));

        let clf = CtcClassifier::new(
            Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.8]),
            Tensor::vector(vec![0.1, 0.0, -0.2]),
            0,
        )
        .unwrap();
        let e = enc();
        let frames = frame_logits(&clf, &e).unwrap();
        for t in 0..3 {
            let mut w = [0.0; 3];
            w[t] = 1.0;
            let d = attention_context(&w, &e).unwrap();
            let p = head_posterior(&clf, &d).unwrap();
            let direct = softmax_row(frames.row(t)).unwrap();
            assert_eq!(p, direct);
        }
        assert!(head_posterior(&clf, &ContextEmbedding { d: vec![1.0] }).is_err());
    }

    #[test]
    fn taxonomy_exemplars() {
        let vocab = Vocab::from_tokens(&["_i", "_know", "_they", "_are", "_bless", "_them", "ed"]);
        let targets = vocab
            .encode(&["_i", "_know", "_they", "_are", "_bless", "_them"])
            .unwrap();
        let id = |n: &str| vocab.id(n).unwrap();
        assert_eq!(
            categorize_prediction(id("_know"), 0, &targets, BLANK_ID),
            (Category::Forward, Some(1))
        );
        assert_eq!(
            categorize_prediction(id("_are"), 3, &targets, BLANK_ID),
            (Category::Present, Some(3))
        );
        assert_eq!(
            categorize_prediction(id("_i"), 2, &targets, BLANK_ID),
            (Category::Backward, Some(0))
        );
        assert_eq!(
            categorize_prediction(BLANK_ID, 2, &targets, BLANK_ID),
            (Category::Epsilon, None)
        );
        assert_eq!(
            categorize_prediction(id("ed"), 0, &targets, BLANK_ID),
            (Category::OffTarget, None)
        );
    }

    #[test]
    fn nearest_occurrence_ties_go_forward() {
        let targets = [5, 7, 5];
        assert_eq!(categorize_prediction(5, 1, &targets, 0), (Category::Forward, Some(2)));
        assert_eq!(categorize_prediction(5, 0, &targets, 0), (Category::Present, Some(0)));
    }

    fn report_with_tokens(tokens_per_layer: &[Vec<usize>]) -> ProbeReport {
        // one step, many heads per layer
        let heads = tokens_per_layer[0].len();
        let mut cells = Vec::new();
        for (layer, toks) in tokens_per_layer.iter().enumerate() {
            for (head, &token) in toks.iter().enumerate() {
                cells.push(HeadClassification {
                    layer,
                    head,
                    step: 0,
                    token,
                    posterior: 1.0,
                    category: if token == 0 { Category::Epsilon } else { Category::OffTarget },
                    matched_position: None,
                });
            }
        }
        ProbeReport {
            utterance_id: "u".into(),
            targets: vec![9],
            predictions: vec![9],
            layers: tokens_per_layer.len(),
            heads,
            cells,
        }
    }

    #[test]
    fn unique_counts() {
        let r = report_with_tokens(&[vec![4, 4, 0, 5], vec![0, 0, 0, 0]]);
        assert_eq!(unique_tokens_per_layer(&r), vec![3, 1]);
        let r2 = report_with_tokens(&[vec![4, 5, 6, 7], vec![0, 0, 0, 0]]);
        let stats = layer_unique_token_stats(&[r, r2]).unwrap();
        assert_eq!(stats[0].mean, 3.5);
        assert_eq!(stats[0].std, 0.5);
        assert_eq!(stats[1].mean, 1.0);
        assert_eq!(stats[1].std, 0.0);
        assert!(layer_unique_token_stats(&[]).is_err());
    }

    #[test]
    fn render_all_blank() {
        let vocab = Vocab::synthetic(4);
        let e = enc();
        let fwd = ForwardOutput {
            decoder_logits: Tensor::zeros(&[3, 7]),
            attention: AttentionRecord {
                weights: vec![vec![Tensor::full(&[3, 3], 1.0 / 3.0); 2]],
            },
            encoder_out: e,
        };
        let mut bias = vec![0.0; 7];
        bias[0] = 100.0;
        let clf = CtcClassifier::new(Tensor::zeros(&[7, 2]), Tensor::vector(bias), 0).unwrap();
        let report = probe_utterance("u0", &fwd, &clf, &[3, 4]).unwrap();
        let text = render_report(&report, &vocab, 0.0).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step\ttruth\tprediction\tL0H0\tL0H1\tcategories");
        assert_eq!(lines[1], "0\ta\t<blank>\t\t\t..");
        assert_eq!(lines.len(), 3);
        assert_eq!(text, render_report(&report, &vocab, 0.0).unwrap());
        assert!(render_report(&report, &vocab, 1.5).is_err());
    }
}

//! Joint CTC / attention / regularizer objective, the optimizer, the
//! training loop and greedy-decoding evaluation.

use log::{info, warn};

use crate::ctc::{ctc_loss, min_frames};
use crate::data::{token_error_rate, Dataset, Utterance, EOS_ID};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::model::{Dropout, Model, ModelConfig};
use crate::param::{LossTerm, ParamStore};
use crate::regularizer::regularizer_graph;
use crate::rng::{Purpose, RngState, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the CTC loss; the attention loss gets `1 - alpha`.
    pub alpha: f64,
    /// Weight of the attention regularizer.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Dropout on embeddings and sublayer outputs during training.
    pub dropout: f64,
    /// Probability of replacing each teacher-forced decoder input token.
    pub token_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            lambda: 0.0,
            epochs: 100,
            batch_size: 8,
            peak_lr: 1e-2,
            warmup_steps: 400,
            clip_norm: 5.0,
            dropout: 0.1,
            token_dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.token_dropout) {
            return Err(Error::invalid(format!(
                "token_dropout {} outside [0, 1)",
                self.token_dropout
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::invalid("peak_lr must be positive"));
        }
        Ok(())
    }
}

/// Batch-mean loss components.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ctc: f64,
    pub attention: f64,
    pub reg: f64,
    pub utterances: usize,
    /// Target tokens plus one end token per utterance used.
    pub tokens: usize,
    pub skipped: Vec<String>,
}

fn nll_pick(g: &mut Graph, log_probs: Var, targets: &[usize]) -> Var {
    let lp = g.value(log_probs);
    let mut grad = Tensor::zeros(lp.shape());
    let mut value = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        value -= lp.get(i, y);
        grad.set(i, y, -1.0);
    }
    g.scalar_with_grad(log_probs, value, grad)
}

struct UtteranceLoss {
    graph: Graph,
    total: Var,
    ctc: f64,
    attention: f64,
    reg: f64,
}

/// `reg_model` supplies the classifier read by the regularizer; it shares
/// the trunk of `model` and differs only when checking the stop-gradient
/// against finite differences.
fn utterance_loss(
    model: &Model,
    reg_model: &Model,
    utt: &Utterance,
    cfg: &TrainConfig,
    drop: &mut Dropout,
) -> Result<UtteranceLoss> {
    let mut g = Graph::new();
    let trace = model.trace_with_dropout(&mut g, &utt.features, &utt.tokens, drop)?;

    let ctc_logits = model.ctc_logits_graph(&mut g, trace.h, LossTerm::Ctc);
    let ctc_lp = g.log_softmax_rows(ctc_logits);
    let ctc = ctc_loss(g.value(ctc_lp), &utt.tokens, crate::data::BLANK_ID)?;
    let ctc_var = g.scalar_with_grad(ctc_lp, ctc.neg_log_likelihood, ctc.grad);

    let dec_lp = g.log_softmax_rows(trace.decoder_logits);
    let mut outputs = utt.tokens.clone();
    outputs.push(EOS_ID);
    let att_var = nll_pick(&mut g, dec_lp, &outputs);

    let mut terms = vec![(ctc_var, cfg.alpha), (att_var, 1.0 - cfg.alpha)];
    let mut reg = 0.0;
    if cfg.lambda > 0.0 {
        let reg_var = regularizer_graph(&mut g, reg_model, &trace, &utt.tokens, cfg.lambda)?;
        reg = g.scalar(reg_var);
        terms.push((reg_var, 1.0));
    }
    let total = g.weighted_sum(&terms);
    let attention = g.scalar(att_var);
    Ok(UtteranceLoss {
        graph: g,
        total,
        ctc: ctc.neg_log_likelihood,
        attention,
        reg,
    })
}

fn feasible(model: &Model, utt: &Utterance) -> bool {
    let frames = utt.features.rows().div_ceil(model.config().downsample);
    !utt.tokens.is_empty() && min_frames(&utt.tokens) <= frames
}

/// Mean over utterances of `alpha * L_ctc + (1 - alpha) * L_att + L_reg`.
/// Parameter gradients are reset and then filled with the gradient of
/// that mean. Utterances too short for their transcript are skipped with a
/// warning.
pub fn joint_loss(batch: &[&Utterance], model: &mut Model, cfg: &TrainConfig) -> Result<LossBreakdown> {
    joint_loss_with_dropout(batch, model, cfg, &mut Dropout::off())
}

/// [`joint_loss`] on dropout-perturbed graphs, as used during training.
pub fn joint_loss_with_dropout(
    batch: &[&Utterance],
    model: &mut Model,
    cfg: &TrainConfig,
    drop: &mut Dropout,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    model.params.zero_grad();
    let mut out = LossBreakdown::default();
    let used: Vec<&Utterance> = batch
        .iter()
        .copied()
        .filter(|u| {
            let ok = feasible(model, u);
            if !ok {
                warn!(
                    "skipping `{}`: {} tokens cannot align to {} frames",
                    u.id,
                    u.tokens.len(),
                    u.features.rows()
                );
                out.skipped.push(u.id.clone());
            }
            ok
        })
        .collect();
    if used.is_empty() {
        return Err(Error::invalid("batch has no usable utterances"));
    }
    let scale = 1.0 / used.len() as f64;
    for utt in &used {
        let loss = utterance_loss(model, model, utt, cfg, drop)?;
        loss.graph.backward_into(loss.total, scale, &mut model.params);
        out.total += loss.graph.scalar(loss.total);
        out.ctc += loss.ctc;
        out.attention += loss.attention;
        out.reg += loss.reg;
        out.tokens += utt.tokens.len() + 1;
    }
    out.utterances = used.len();
    out.total *= scale;
    out.ctc *= scale;
    out.attention *= scale;
    out.reg *= scale;
    Ok(out)
}

/// Loss value only, for finite-difference checks. The regularizer reads
/// the classifier of `frozen` (same configuration as `model`), so the
/// difference quotient sees exactly the stop-gradient routing of
/// [`joint_loss`].
pub fn joint_loss_value(
    batch: &[&Utterance],
    model: &Model,
    frozen: &Model,
    cfg: &TrainConfig,
) -> Result<f64> {
    let used: Vec<&&Utterance> = batch.iter().filter(|u| feasible(model, u)).collect();
    let mut total = 0.0;
    for utt in &used {
        let loss = utterance_loss(model, frozen, utt, cfg, &mut Dropout::off())?;
        total += loss.graph.scalar(loss.total);
    }
    Ok(total / used.len().max(1) as f64)
}

/// Adam with linear warmup followed by inverse-square-root decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, peak_lr: f64, warmup_steps: usize) -> Self {
        Self {
            peak_lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }

    pub fn step(&mut self, params: &mut ParamStore) {
        self.step += 1;
        let lr = self.learning_rate(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean joint loss per utterance.
    pub loss: f64,
    /// Summed joint loss divided by output tokens (including end tokens).
    pub loss_per_token: f64,
    pub ctc: f64,
    pub attention: f64,
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub steps: u64,
    pub rng_state: RngState,
}

/// Trains a fresh model on `dataset`. Fully determined by `cfg.seed`.
pub fn train(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    train_model(dataset, model, cfg)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_model(dataset: &Dataset, mut model: Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if dataset.feature_dim != model.config().feature_dim || dataset.vocab_size > model.config().vocab_size {
        return Err(Error::invalid(format!(
            "dataset (F={}, C={}) does not fit model (F={}, C={})",
            dataset.feature_dim,
            dataset.vocab_size,
            model.config().feature_dim,
            model.config().vocab_size
        )));
    }
    let mut shuffle = SeededRng::stream(cfg.seed, Purpose::Shuffle);
    let mut drop = Dropout::new(cfg.dropout, cfg.token_dropout, SeededRng::stream(cfg.seed, Purpose::Dropout))?;
    let mut opt = Adam::new(&model.params, cfg.peak_lr, cfg.warmup_steps);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut sums = EpochStats {
            epoch,
            loss: 0.0,
            loss_per_token: 0.0,
            ctc: 0.0,
            attention: 0.0,
            reg: 0.0,
        };
        let (mut utts, mut tokens) = (0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &dataset.utterances[i]).collect();
            let b = match joint_loss_with_dropout(&batch, &mut model, cfg, &mut drop) {
                Ok(b) => b,
                Err(Error::InvalidArgument(msg)) if msg.contains("no usable") => continue,
                Err(e) => return Err(e),
            };
            if !b.total.is_finite() {
                return Err(Error::NonFinite {
                    step: opt.steps_taken(),
                    detail: format!(
                        "epoch {epoch}: ctc {} attention {} reg {}",
                        b.ctc, b.attention, b.reg
                    ),
                });
            }
            clip_grad_norm(&mut model.params, cfg.clip_norm);
            opt.step(&mut model.params);
            let n = b.utterances as f64;
            sums.loss += b.total * n;
            sums.ctc += b.ctc * n;
            sums.attention += b.attention * n;
            sums.reg += b.reg * n;
            utts += b.utterances;
            tokens += b.tokens;
        }
        let n = utts.max(1) as f64;
        sums.loss_per_token = sums.loss / tokens.max(1) as f64;
        sums.loss /= n;
        sums.ctc /= n;
        sums.attention /= n;
        sums.reg /= n;
        info!(
            "epoch {epoch}: loss {:.4} ({:.4}/token) ctc {:.4} att {:.4} reg {:.4}",
            sums.loss, sums.loss_per_token, sums.ctc, sums.attention, sums.reg
        );
        history.push(sums);
    }
    Ok(TrainOutcome {
        model,
        history,
        steps: opt.steps_taken(),
        rng_state: shuffle.state(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceEval {
    pub id: String,
    pub hypothesis: Vec<usize>,
    pub ter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_ter: f64,
    pub utterances: Vec<UtteranceEval>,
}

/// Greedy-decodes every utterance and scores it against its transcript.
pub fn evaluate(dataset: &Dataset, model: &Model) -> Result<EvalReport> {
    let mut utterances = Vec::with_capacity(dataset.len());
    for u in &dataset.utterances {
        let enc = model.encode(&u.features)?;
        let max_len = enc.frames().min(model.config().max_tokens).max(1);
        let hypothesis = model.decode_greedy(&enc, max_len)?;
        let ter = token_error_rate(&hypothesis, &u.tokens);
        utterances.push(UtteranceEval {
            id: u.id.clone(),
            hypothesis,
            ter,
        });
    }
    let mean_ter = if utterances.is_empty() {
        0.0
    } else {
        utterances.iter().map(|u| u.ter).sum::<f64>() / utterances.len() as f64
    };
    Ok(EvalReport { mean_ter, utterances })
}

/// Configuration of the built-in gradient check: a two-head model of
/// width 8 with one encoder and one decoder layer.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 7,
        feature_dim: 5,
        max_frames: 32,
        max_tokens: 8,
        downsample: 1,
    }
}

/// Finite-difference check of the joint loss (alpha 0.3, lambda 0.1) on a
/// random six-frame, three-token utterance.
pub fn gradient_suite(seed: u64, step: f64) -> Result<GradCheckReport> {
    let cfg = gradcheck_model_config();
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = SeededRng::stream(seed, Purpose::Test);
    let features = Tensor::matrix(
        6,
        cfg.feature_dim,
        (0..6 * cfg.feature_dim).map(|_| rng.normal()).collect(),
    );
    let tokens: Vec<usize> = (0..3)
        .map(|_| rng.int_inclusive(crate::data::RESERVED, cfg.vocab_size - 1))
        .collect();
    let utt = Utterance {
        id: "gradcheck".into(),
        features,
        tokens,
    };
    let train_cfg = TrainConfig {
        alpha: 0.3,
        lambda: 0.1,
        ..TrainConfig::default()
    };
    joint_loss(&[&utt], &mut model, &train_cfg)?;
    let template = model.clone();
    let mut params = model.params.clone();
    finite_diff_check(
        |p| {
            let mut m = template.clone();
            m.params = p.clone();
            joint_loss_value(&[&utt], &m, &template, &train_cfg)
        },
        &mut params,
        step,
    )
}

/// Probes every utterance of `dataset` with teacher forcing.
pub fn probe_dataset(model: &Model, dataset: &Dataset) -> Result<Vec<crate::probe::ProbeReport>> {
    let classifier = model.ctc_classifier();
    dataset
        .utterances
        .iter()
        .map(|u| {
            let fwd = model.forward(&u.features, &u.tokens)?;
            crate::probe::probe_utterance(&u.id, &fwd, &classifier, &u.tokens)
        })
        .collect()
}


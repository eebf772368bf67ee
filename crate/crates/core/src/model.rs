//! Toy pre-norm transformer encoder-decoder with a CTC head on the encoder
//! output. Every forward pass keeps the source-target attention weights of
//! each decoder layer and head.

use crate::ctc::CtcClassifier;
use crate::data::{EOS_ID, RESERVED, SOS_ID};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{LossTerm, ParamId, ParamStore, Parameter, UpdateMask};
use crate::rng::{Purpose, SeededRng};
use crate::tensor::{argmax, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Trunk parameters admit every loss term; the binding term only matters
/// for the CTC classifier.
const TRUNK: LossTerm = LossTerm::Attention;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Includes the blank, start and end tokens.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    /// Input frames averaged per encoder frame.
    pub downsample: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab_size: 15,
            feature_dim: 16,
            max_frames: 512,
            max_tokens: 64,
            downsample: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        // blank, sos, eos and at least one real token
        if self.vocab_size < 4 {
            return Err(Error::invalid("vocab_size must be at least 4"));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::invalid("need at least one encoder and decoder layer"));
        }
        if self.d_ff == 0 || self.feature_dim == 0 || self.downsample == 0 {
            return Err(Error::invalid("d_ff, feature_dim and downsample must be positive"));
        }
        if self.max_frames == 0 || self.max_tokens == 0 {
            return Err(Error::invalid("max_frames and max_tokens must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Encoder frame representations `h_1..h_T` as a `T x D` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub h: Tensor,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.h.rows()
    }
}

/// Source-target attention weights, `weights[layer][head]` is `L_out x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub weights: Vec<Vec<Tensor>>,
}

impl AttentionRecord {
    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn heads(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn get(&self, layer: usize, head: usize) -> &Tensor {
        &self.weights[layer][head]
    }

    /// `(layer, head, matrix)` in layer-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &Tensor)> {
        self.weights
            .iter()
            .enumerate()
            .flat_map(|(l, hs)| hs.iter().enumerate().map(move |(h, w)| (l, h, w)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub decoder_logits: Tensor,
    pub attention: AttentionRecord,
    pub encoder_out: EncoderOutput,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Debug, Clone, Copy)]
struct FfIds {
    up: LinearIds,
    down: LinearIds,
}

#[derive(Debug, Clone)]
struct EncBlock {
    ln_attn: NormIds,
    attn: AttnIds,
    ln_ff: NormIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct DecBlock {
    ln_self: NormIds,
    self_attn: AttnIds,
    ln_src: NormIds,
    src_attn: AttnIds,
    ln_ff: NormIds,
    ff: FfIds,
}

#[derive(Debug, Clone)]
struct Layout {
    input: LinearIds,
    enc: Vec<EncBlock>,
    enc_norm: NormIds,
    ctc: LinearIds,
    embed: ParamId,
    dec: Vec<DecBlock>,
    dec_norm: NormIds,
    out: LinearIds,
}

/// Graph handles produced by one teacher-forced pass.
#[derive(Debug)]
pub struct Trace {
    pub h: Var,
    pub decoder_logits: Var,
    /// `attention[layer][head]`, each `L_out x T`.
    pub attention: Vec<Vec<Var>>,
}

/// Inverted dropout for training graphs. Attention weights themselves are
/// never dropped, so the recorded attention stays row-normalized.
///
/// A separate token rate replaces teacher-forced decoder inputs with random
/// non-reserved tokens.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    token_rate: f64,
    rng: Option<SeededRng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            token_rate: 0.0,
            rng: None,
        }
    }

    pub fn new(rate: f64, token_rate: f64, rng: SeededRng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !(0.0..1.0).contains(&token_rate) {
            return Err(Error::invalid(format!("token dropout rate {token_rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            token_rate,
            rng: (rate > 0.0 || token_rate > 0.0).then_some(rng),
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn token_rate(&self) -> f64 {
        self.token_rate
    }

    pub fn rng_state(&self) -> Option<crate::rng::RngState> {
        self.rng.as_ref().map(SeededRng::state)
    }

    pub(crate) fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else {
            return x;
        };
        let keep = 1.0 - self.rate;
        let shape = g.value(x).shape().to_vec();
        let mut mask = Tensor::zeros(&shape);
        for m in mask.data_mut() {
            if rng.uniform(0.0, 1.0) < keep {
                *m = 1.0 / keep;
            }
        }
        g.mask(x, mask)
    }

    fn corrupt_tokens(&mut self, tokens: &mut [usize], vocab_size: usize) {
        let Some(rng) = self.rng.as_mut().filter(|_| self.token_rate > 0.0) else {
            return;
        };
        for t in tokens {
            if rng.uniform(0.0, 1.0) < self.token_rate {
                *t = rng.int_inclusive(RESERVED, vocab_size - 1);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut SeededRng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, input: usize, output: usize) -> LinearIds {
        self.linear_masked(name, input, output, UpdateMask::ALL)
    }

    fn linear_masked(&mut self, name: &str, input: usize, output: usize, mask: UpdateMask) -> LinearIds {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| self.rng.uniform(-bound, bound))
            .collect();
        let w = self.store.add(Parameter::new(
            format!("{name}.weight"),
            Tensor::matrix(output, input, data),
            mask,
        ));
        let b = self.store.add(Parameter::new(
            format!("{name}.bias"),
            Tensor::zeros(&[output]),
            mask,
        ));
        LinearIds { w, b }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormIds {
        let g = self.store.add(Parameter::new(
            format!("{name}.gain"),
            Tensor::full(&[width], 1.0),
            UpdateMask::ALL,
        ));
        let b = self.store.add(Parameter::new(
            format!("{name}.bias"),
            Tensor::zeros(&[width]),
            UpdateMask::ALL,
        ));
        NormIds { g, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn ff(&mut self, name: &str, d: usize, d_ff: usize) -> FfIds {
        FfIds {
            up: self.linear(&format!("{name}.up"), d, d_ff),
            down: self.linear(&format!("{name}.down"), d_ff, d),
        }
    }
}

/// Sinusoidal position table, `len x width`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, width]);
    for pos in 0..len {
        for i in 0..width {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let angle = pos as f64 / rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Averages each run of `factor` consecutive frames; a short final run is
/// averaged over the frames it has.
pub fn downsample(features: &Tensor, factor: usize) -> Tensor {
    if factor <= 1 {
        return features.clone();
    }
    let (rows, cols) = (features.rows(), features.cols());
    let out_rows = rows.div_ceil(factor);
    let mut out = Tensor::zeros(&[out_rows, cols]);
    for r in 0..out_rows {
        let span = (r * factor)..((r + 1) * factor).min(rows);
        let n = span.len() as f64;
        for src in span {
            for (o, v) in out.row_mut(r).iter_mut().zip(features.row(src)) {
                *o += v / n;
            }
        }
    }
    out
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::stream(seed, Purpose::Init);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let d = config.d_model;
        let input = b.linear("enc.input", config.feature_dim, d);
        let enc = (0..config.enc_layers)
            .map(|l| EncBlock {
                ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln_ff: b.norm(&format!("enc.{l}.ln_ff"), d),
                ff: b.ff(&format!("enc.{l}.ff"), d, config.d_ff),
            })
            .collect();
        let enc_norm = b.norm("enc.norm", d);
        let ctc = b.linear_masked("ctc", d, config.vocab_size, UpdateMask::CTC_ONLY);
        let embed_data = (0..config.vocab_size * d).map(|_| b.rng.normal()).collect();
        let embed = b.store.add(Parameter::new(
            "dec.embed",
            Tensor::matrix(config.vocab_size, d, embed_data),
            UpdateMask::ALL,
        ));
        let dec = (0..config.dec_layers)
            .map(|l| DecBlock {
                ln_self: b.norm(&format!("dec.{l}.ln_self"), d),
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
                ln_src: b.norm(&format!("dec.{l}.ln_src"), d),
                src_attn: b.attn(&format!("dec.{l}.src_attn"), d),
                ln_ff: b.norm(&format!("dec.{l}.ln_ff"), d),
                ff: b.ff(&format!("dec.{l}.ff"), d, config.d_ff),
            })
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let out = b.linear("dec.out", d, config.vocab_size);
        let params = b.store;
        Ok(Self {
            config,
            params,
            layout: Layout {
                input,
                enc,
                enc_norm,
                ctc,
                embed,
                dec,
                dec_norm,
                out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ctc_param_ids(&self) -> (ParamId, ParamId) {
        (self.layout.ctc.w, self.layout.ctc.b)
    }

    /// Every parameter that only the attention decoder reads.
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with("dec."))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn ctc_classifier(&self) -> CtcClassifier {
        CtcClassifier {
            weight: self.params.value(self.layout.ctc.w).clone(),
            bias: self.params.value(self.layout.ctc.b).clone(),
            blank_id: crate::data::BLANK_ID,
        }
    }

    fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(&self.params, id, TRUNK)
    }

    fn linear(&self, g: &mut Graph, x: Var, ids: LinearIds) -> Var {
        let w = self.bind(g, ids.w);
        let b = self.bind(g, ids.b);
        g.linear(x, w, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, ids: NormIds) -> Var {
        let gain = self.bind(g, ids.g);
        let bias = self.bind(g, ids.b);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn ff(&self, g: &mut Graph, x: Var, ids: FfIds) -> Var {
        let up = self.linear(g, x, ids.up);
        let act = g.gelu(up);
        self.linear(g, act, ids.down)
    }

    /// Multi-head scaled dot-product attention; returns the output
    /// projection and the per-head weight matrices.
    fn attention(
        &self,
        g: &mut Graph,
        ids: AttnIds,
        queries: Var,
        memory: Var,
        causal: bool,
    ) -> (Var, Vec<Var>) {
        let q = self.linear(g, queries, ids.q);
        let k = self.linear(g, memory, ids.k);
        let v = self.linear(g, memory, ids.v);
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(self.config.heads);
        let mut weights = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let scores = g.matmul_bt(qh, kh);
            let scores = g.scale(scores, scale);
            let w = g.softmax_rows(scores, causal);
            contexts.push(g.matmul(w, vh));
            weights.push(w);
        }
        let joined = g.concat_cols(&contexts);
        (self.linear(g, joined, ids.o), weights)
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.shape().len() != 2 || features.rows() == 0 {
            return Err(Error::invalid("features must be a non-empty T x F matrix"));
        }
        if features.cols() != self.config.feature_dim {
            return Err(Error::invalid(format!(
                "feature width {} but model expects {}",
                features.cols(),
                self.config.feature_dim
            )));
        }
        let frames = features.rows().div_ceil(self.config.downsample);
        if frames > self.config.max_frames {
            return Err(Error::invalid(format!(
                "{frames} frames exceeds max_frames {}",
                self.config.max_frames
            )));
        }
        Ok(())
    }

    pub(crate) fn encode_graph(&self, g: &mut Graph, features: &Tensor, drop: &mut Dropout) -> Result<Var> {
        self.check_features(features)?;
        let x = downsample(features, self.config.downsample);
        let frames = x.rows();
        let x = g.constant(x);
        let x = self.linear(g, x, self.layout.input);
        let pe = g.constant(positional_encoding(frames, self.config.d_model));
        let x = g.add(x, pe);
        let mut x = drop.apply(g, x);
        for block in &self.layout.enc {
            let n = self.norm(g, x, block.ln_attn);
            let (a, _) = self.attention(g, block.attn, n, n, false);
            let a = drop.apply(g, a);
            x = g.add(x, a);
            let n = self.norm(g, x, block.ln_ff);
            let f = self.ff(g, n, block.ff);
            let f = drop.apply(g, f);
            x = g.add(x, f);
        }
        Ok(self.norm(g, x, self.layout.enc_norm))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("decoder input is empty"));
        }
        if tokens.len() > self.config.max_tokens + 1 {
            return Err(Error::invalid(format!(
                "{} decoder steps exceeds max_tokens {} + 1",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token {t} outside vocab")));
        }
        Ok(())
    }

    /// Decoder over `inputs` (starting with the start token), attending to `h`.
    pub(crate) fn decode_graph(
        &self,
        g: &mut Graph,
        h: Var,
        inputs: &[usize],
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        self.check_tokens(inputs)?;
        if inputs[0] != SOS_ID {
            return Err(Error::invalid("decoder input must begin with the start token"));
        }
        let embed = self.bind(g, self.layout.embed);
        let x = g.gather_rows(embed, inputs);
        let pe = g.constant(positional_encoding(inputs.len(), self.config.d_model));
        let x = g.add(x, pe);
        let mut x = drop.apply(g, x);
        let mut record = Vec::with_capacity(self.layout.dec.len());
        for block in &self.layout.dec {
            let n = self.norm(g, x, block.ln_self);
            let (a, _) = self.attention(g, block.self_attn, n, n, true);
            let a = drop.apply(g, a);
            x = g.add(x, a);
            let n = self.norm(g, x, block.ln_src);
            let (a, w) = self.attention(g, block.src_attn, n, h, false);
            record.push(w);
            let a = drop.apply(g, a);
            x = g.add(x, a);
            let n = self.norm(g, x, block.ln_ff);
            let f = self.ff(g, n, block.ff);
            let f = drop.apply(g, f);
            x = g.add(x, f);
        }
        let x = self.norm(g, x, self.layout.dec_norm);
        Ok((self.linear(g, x, self.layout.out), record))
    }

    /// Encoder plus teacher-forced decoder over `[sos] + tokens`.
    pub fn trace(&self, g: &mut Graph, features: &Tensor, tokens: &[usize]) -> Result<Trace> {
        self.trace_with_dropout(g, features, tokens, &mut Dropout::off())
    }

    /// [`Model::trace`] with dropout on embeddings and sublayer outputs.
    pub fn trace_with_dropout(
        &self,
        g: &mut Graph,
        features: &Tensor,
        tokens: &[usize],
        drop: &mut Dropout,
    ) -> Result<Trace> {
        let h = self.encode_graph(g, features, drop)?;
        let mut inputs = Vec::with_capacity(tokens.len() + 1);
        inputs.push(SOS_ID);
        inputs.extend_from_slice(tokens);
        self.check_tokens(&inputs)?;
        drop.corrupt_tokens(&mut inputs[1..], self.config.vocab_size);
        let (decoder_logits, attention) = self.decode_graph(g, h, &inputs, drop)?;
        Ok(Trace {
            h,
            decoder_logits,
            attention,
        })
    }

    /// CTC logits for the encoder output `h`, bound for `term`.
    pub fn ctc_logits_graph(&self, g: &mut Graph, h: Var, term: LossTerm) -> Var {
        let w = g.param(&self.params, self.layout.ctc.w, term);
        let b = g.param(&self.params, self.layout.ctc.b, term);
        g.linear(h, w, b)
    }

    pub fn encode(&self, features: &Tensor) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let h = self.encode_graph(&mut g, features, &mut Dropout::off())?;
        Ok(EncoderOutput {
            h: g.value(h).clone(),
        })
    }

    /// Source-target attention of decoder layer `layer` applied to
    /// precomputed `queries` (`L_out x D`).
    pub fn source_target_attention(
        &self,
        layer: usize,
        queries: &Tensor,
        encoder_out: &EncoderOutput,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let block = self
            .layout
            .dec
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no decoder layer {layer}")))?;
        let d = self.config.d_model;
        if queries.cols() != d || encoder_out.h.cols() != d {
            return Err(Error::invalid("query / encoder width mismatch"));
        }
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let h = g.constant(encoder_out.h.clone());
        let (ctx, w) = self.attention(&mut g, block.src_attn, q, h, false);
        Ok((
            g.value(ctx).clone(),
            w.into_iter().map(|v| g.value(v).clone()).collect(),
        ))
    }

    /// Teacher-forced decoding; `shifted_targets` must start with the start token.
    pub fn decode_teacher_forced(
        &self,
        encoder_out: &EncoderOutput,
        shifted_targets: &[usize],
    ) -> Result<ForwardOutput> {
        if encoder_out.h.cols() != self.config.d_model {
            return Err(Error::invalid("encoder width mismatch"));
        }
        let mut g = Graph::new();
        let h = g.constant(encoder_out.h.clone());
        let (logits, record) = self.decode_graph(&mut g, h, shifted_targets, &mut Dropout::off())?;
        Ok(ForwardOutput {
            decoder_logits: g.value(logits).clone(),
            attention: AttentionRecord {
                weights: record
                    .iter()
                    .map(|hs| hs.iter().map(|v| g.value(*v).clone()).collect())
                    .collect(),
            },
            encoder_out: encoder_out.clone(),
        })
    }

    /// Encodes `features` and decodes `[sos] + tokens` with teacher forcing.
    pub fn forward(&self, features: &Tensor, tokens: &[usize]) -> Result<ForwardOutput> {
        let enc = self.encode(features)?;
        let mut inputs = vec![SOS_ID];
        inputs.extend_from_slice(tokens);
        self.decode_teacher_forced(&enc, &inputs)
    }

    /// Autoregressive argmax decoding until the end token or `max_len` tokens.
    pub fn decode_greedy(&self, encoder_out: &EncoderOutput, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let max_len = max_len.min(self.config.max_tokens);
        let mut prefix = vec![SOS_ID];
        while prefix.len() <= max_len {
            let out = self.decode_teacher_forced(encoder_out, &prefix)?;
            let last = out.decoder_logits.row(out.decoder_logits.rows() - 1);
            let next = argmax(last);
            if next == EOS_ID {
                break;
            }
            prefix.push(next);
        }
        prefix.remove(0);
        Ok(prefix)
    }

    /// Copies parameter values from `other`; shapes and names must agree.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in values {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{name}`")))?;
            let expected = self.params.get(id).value.shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(Error::Shape {
                    tensor: name.clone(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
        }
        for p in self.params.iter() {
            if !values.iter().any(|(n, _)| n == &p.name) {
                return Err(Error::MissingTensor(p.name.clone()));
            }
        }
        for (name, t) in values {
            let id = self.params.find(name).expect("checked above");
            self.params.get_mut(id).value = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 2,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 7,
            feature_dim: 4,
            max_frames: 64,
            max_tokens: 16,
            downsample: 1,
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = SeededRng::stream(seed, Purpose::Test);
        Tensor::matrix(t, f, (0..t * f).map(|_| rng.normal()).collect())
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.heads = 3;
        assert!(Model::new(c, 0).is_err());
        let mut c = tiny();
        c.vocab_size = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_dropout_keeps_start_and_vocab() {
        let mut d = Dropout::new(0.0, 0.5, SeededRng::stream(3, Purpose::Dropout)).unwrap();
        let original = vec![3usize; 200];
        let mut tokens = original.clone();
        d.corrupt_tokens(&mut tokens, 7);
        assert!(tokens.iter().all(|&t| (RESERVED..7).contains(&t)));
        assert!(tokens != original);
        let mut g = Graph::new();
        let m = Model::new(tiny(), 1).unwrap();
        let x = features(5, 4, 4);
        let a = m.trace_with_dropout(&mut g, &x, &[3, 4, 5], &mut d).unwrap();
        assert_eq!(g.value(a.decoder_logits).rows(), 4);
        assert!(Dropout::new(0.0, 1.0, SeededRng::stream(3, Purpose::Dropout)).is_err());
    }

    #[test]
    fn encode_deterministic_and_shaped() {
        let m = Model::new(tiny(), 5).unwrap();
        let x = features(6, 4, 1);
        let a = m.encode(&x).unwrap();
        let b = Model::new(tiny(), 5).unwrap().encode(&x).unwrap();
        assert_eq!(a.h.shape(), &[6, 8]);
        assert!(a.h.data().iter().zip(b.h.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        assert_eq!(m.encode(&features(1, 4, 2)).unwrap().h.shape(), &[1, 8]);
        assert!(m.encode(&Tensor::zeros(&[0, 4])).is_err());
    }

    #[test]
    fn downsampling_shapes() {
        let mut c = tiny();
        c.downsample = 2;
        let m = Model::new(c, 0).unwrap();
        assert_eq!(m.encode(&features(5, 4, 3)).unwrap().frames(), 3);
        let x = Tensor::matrix(3, 1, vec![1.0, 3.0, 5.0]);
        assert_eq!(downsample(&x, 2).data(), &[2.0, 5.0]);
    }

    #[test]
    fn single_key_attention() {
        let m = Model::new(tiny(), 1).unwrap();
        let enc = m.encode(&features(1, 4, 4)).unwrap();
        let q = features(3, 8, 5);
        let (ctx, w) = m.source_target_attention(0, &q, &enc).unwrap();
        for head in &w {
            assert!(head.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        }
        // Every row's context is the projected value of the only frame.
        for r in 1..3 {
            assert!(ctx
                .row(r)
                .iter()
                .zip(ctx.row(0))
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let m = Model::new(tiny(), 1).unwrap();
        let row = features(1, 8, 9);
        let h = Tensor::matrix(4, 8, row.data().repeat(4));
        let enc = EncoderOutput { h };
        let (_, w) = m.source_target_attention(1, &features(2, 8, 6), &enc).unwrap();
        for head in &w {
            assert!(head.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
        }
    }

    #[test]
    fn causal_decoder() {
        let m = Model::new(tiny(), 2).unwrap();
        let enc = m.encode(&features(7, 4, 7)).unwrap();
        let a = m.decode_teacher_forced(&enc, &[SOS_ID, 3, 4, 5, 6]).unwrap();
        let b = m.decode_teacher_forced(&enc, &[SOS_ID, 3, 4, 6, 3]).unwrap();
        assert_eq!(a.decoder_logits.shape(), &[5, 7]);
        for i in 0..3 {
            assert_eq!(a.decoder_logits.row(i), b.decoder_logits.row(i));
        }
        assert_ne!(a.decoder_logits.row(3), b.decoder_logits.row(3));
        for (_, _, w) in a.attention.iter() {
            assert_eq!(w.shape(), &[5, 7]);
            for r in w.iter_rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(m.decode_teacher_forced(&enc, &[3, 4]).is_err());
        let too_long = vec![SOS_ID; 20];
        assert!(m.decode_teacher_forced(&enc, &too_long).is_err());
    }

    #[test]
    fn greedy_matches_teacher_forced_argmax() {
        let m = Model::new(tiny(), 11).unwrap();
        let enc = m.encode(&features(6, 4, 8)).unwrap();
        let hyp = m.decode_greedy(&enc, 5).unwrap();
        let mut prefix = vec![SOS_ID];
        prefix.extend(&hyp);
        let tf = m.decode_teacher_forced(&enc, &prefix).unwrap();
        for (i, &tok) in hyp.iter().enumerate() {
            assert_eq!(argmax(tf.decoder_logits.row(i)), tok);
        }
        assert!(m.decode_greedy(&enc, 0).is_err());
    }

    #[test]
    fn eos_biased_model_emits_nothing() {
        let mut m = Model::new(tiny(), 3).unwrap();
        let out_b = m.layout.out.b;
        m.params.get_mut(out_b).value.data_mut()[EOS_ID] = 1e3;
        let enc = m.encode(&features(4, 4, 1)).unwrap();
        assert!(m.decode_greedy(&enc, 8).unwrap().is_empty());
    }

    #[test]
    fn ctc_params_masked() {
        let m = Model::new(tiny(), 0).unwrap();
        let (w, b) = m.ctc_param_ids();
        for id in [w, b] {
            let mask = m.params.get(id).update_mask;
            assert!(mask.admits(LossTerm::Ctc));
            assert!(!mask.admits(LossTerm::Regularizer));
        }
    }
}

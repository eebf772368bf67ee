#![allow(dead_code)]

use ctcprobe::data::{Utterance, RESERVED};
use ctcprobe::model::{Model, ModelConfig};
use ctcprobe::rng::{Purpose, SeededRng};
use ctcprobe::tensor::Tensor;

pub fn rng(seed: u64) -> SeededRng {
    SeededRng::stream(seed, Purpose::Test)
}

pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
}

/// Row-normalized log-probabilities drawn from random logits.
pub fn random_log_probs(rng: &mut SeededRng, t: usize, c: usize) -> Tensor {
    let mut lp = gaussian(rng, t, c);
    for r in 0..t {
        let row = lp.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.iter_mut().for_each(|v| *v -= z);
    }
    lp
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 7,
        feature_dim: 5,
        max_frames: 64,
        max_tokens: 16,
        downsample: 1,
    }
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 7,
        feature_dim: 5,
        max_frames: 64,
        max_tokens: 16,
        downsample: 1,
    }
}

pub fn random_tokens(rng: &mut SeededRng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.int_inclusive(RESERVED, vocab - 1)).collect()
}

pub fn random_utterance(rng: &mut SeededRng, cfg: &ModelConfig, frames: usize, len: usize) -> Utterance {
    Utterance {
        id: "u".into(),
        features: gaussian(rng, frames, cfg.feature_dim),
        tokens: random_tokens(rng, len, cfg.vocab_size),
    }
}

pub fn model(cfg: &ModelConfig, seed: u64) -> Model {
    Model::new(cfg.clone(), seed).unwrap()
}

//! `ACPR` checkpoint files: magic, version, a length-prefixed `key=value`
//! config block, then named row-major `f32` tensors until end of file.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::model::{Model, ModelConfig};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACPR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

impl Checkpoint {
    /// Snapshot of `model`, quantized to the on-disk precision.
    pub fn from_model(model: &Model, step: u64, rng: RngState) -> Self {
        Self {
            config: model.config().clone(),
            step,
            rng,
            tensors: model
                .params
                .iter()
                .map(|p| (p.name.clone(), quantize(&p.value)))
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), 0)?;
        model.load_values(&self.tensors)?;
        Ok(model)
    }
}

fn config_block(ck: &Checkpoint) -> String {
    let c = &ck.config;
    let pairs: [(&str, String); 14] = [
        ("enc_layers", c.enc_layers.to_string()),
        ("dec_layers", c.dec_layers.to_string()),
        ("heads", c.heads.to_string()),
        ("d_model", c.d_model.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("feature_dim", c.feature_dim.to_string()),
        ("max_frames", c.max_frames.to_string()),
        ("max_tokens", c.max_tokens.to_string()),
        ("downsample", c.downsample.to_string()),
        ("step", ck.step.to_string()),
        ("rng_seed", ck.rng.seed.to_string()),
        ("rng_stream", ck.rng.stream.to_string()),
        ("rng_word_pos", ck.rng.word_pos.to_string()),
    ];
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_config_block(text: &str) -> Result<(ModelConfig, u64, RngState)> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line `{line}` lacks `=`")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
        let raw = map
            .get(key)
            .ok_or_else(|| Error::Format(format!("config block is missing `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("config `{key}` has bad value `{raw}`")))
    }
    let config = ModelConfig {
        enc_layers: get(&map, "enc_layers")?,
        dec_layers: get(&map, "dec_layers")?,
        heads: get(&map, "heads")?,
        d_model: get(&map, "d_model")?,
        d_ff: get(&map, "d_ff")?,
        vocab_size: get(&map, "vocab_size")?,
        feature_dim: get(&map, "feature_dim")?,
        max_frames: get(&map, "max_frames")?,
        max_tokens: get(&map, "max_tokens")?,
        downsample: get(&map, "downsample")?,
    };
    let rng = RngState {
        seed: get(&map, "rng_seed")?,
        stream: get(&map, "rng_stream")?,
        word_pos: get(&map, "rng_word_pos")?,
    };
    Ok((config, get(&map, "step")?, rng))
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.string(&config_block(ck));
    for (name, t) in &ck.tensors {
        w.string(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        for &v in t.data() {
            w.f32(v as f32);
        }
    }
    w.into_inner()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)
        .map_err(|e| Error::Format(format!("not a checkpoint: {e}")))?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (config, step, rng) = parse_config_block(&r.string()?)?;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    while !r.is_at_end() {
        let name = r.string().map_err(|e| match tensors.last() {
            Some((prev, _)) => Error::Format(format!("truncated after tensor `{prev}`: {e}")),
            None => Error::Format(format!("truncated before the first tensor: {e}")),
        })?;
        let truncated = |e: Error| Error::Format(format!("truncated tensor `{name}`: {e}"));
        let rank = r.u32().map_err(truncated)? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().map_err(truncated)? as usize);
        }
        let n = shape.iter().product();
        let data = r.f32s(n).map_err(truncated)?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let ck = Checkpoint {
        config,
        step,
        rng,
        tensors,
    };
    // Surfaces missing tensors and shape mismatches against the embedded config.
    ck.to_model()?;
    Ok(ck)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

//! Vocabulary, synthetic speech-like utterances, the dataset file format
//! and token error rate.
//!
//! Dataset files are little-endian:
//!
//! ```text
//! "ACPD" | version u32 | manifest_len u32 | manifest (UTF-8 key=value lines)
//! per utterance:
//!   id_len u32 | id bytes | n_tokens u32 | token u32 * n_tokens
//!   | T u32 | F u32 | f32 * T * F (row-major)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::rng::{Purpose, SeededRng};
use crate::tensor::Tensor;

pub const BLANK_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const RESERVED: usize = 3;

pub const DATASET_MAGIC: &[u8; 4] = b"ACPD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
}

impl Vocab {
    /// Reserved tokens followed by `tokens`.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut names = vec!["<blank>".to_string(), "<sos>".into(), "<eos>".into()];
        names.extend(tokens.iter().map(|s| s.as_ref().to_string()));
        Self { names }
    }

    /// `n` real tokens named `a`, `b`, ... (then `t26`, `t27`, ...).
    pub fn synthetic(n: usize) -> Self {
        let names: Vec<String> = (0..n)
            .map(|i| {
                if i < 26 {
                    ((b'a' + i as u8) as char).to_string()
                } else {
                    format!("t{i}")
                }
            })
            .collect();
        Self::from_tokens(&names)
    }

    /// Vocabulary of total size `size` including the reserved ids.
    pub fn with_size(size: usize) -> Self {
        Self::synthetic(size.saturating_sub(RESERVED))
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, id: usize) -> &str {
        self.names.get(id).map_or("<unk>", String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED
    }

    /// Ids of `names`, which must all be in the vocabulary.
    pub fn encode(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| self.id(n).ok_or_else(|| Error::invalid(format!("unknown token {n}"))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T x F`
    pub features: Tensor,
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// First `n` utterances and the rest, sharing vocabulary and width.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.utterances.split_off(n.min(self.utterances.len()));
        let tail = Dataset {
            vocab_size: self.vocab_size,
            feature_dim: self.feature_dim,
            utterances: rest,
        };
        (self, tail)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskConfig {
    /// Real (non-reserved) tokens.
    pub tokens: usize,
    pub utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub noise_std: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            tokens: 12,
            utterances: 250,
            min_len: 3,
            max_len: 8,
            min_frames_per_token: 2,
            max_frames_per_token: 5,
            noise_std: 0.1,
            feature_dim: 16,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("need at least one token and one feature"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "token length range {}..={} is degenerate",
                self.min_len, self.max_len
            )));
        }
        if self.min_frames_per_token < 2 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(Error::invalid(format!(
                "frames-per-token range {}..={} must start at 2 or more",
                self.min_frames_per_token, self.max_frames_per_token
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens + RESERVED
    }
}

/// Draws one prototype per token, then utterances whose frames repeat each
/// token's prototype for a random duration with additive Gaussian noise.
pub fn generate_synthetic(config: &SyntheticTaskConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = SeededRng::stream(config.seed, Purpose::Data);
    let f = config.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..config.tokens)
        .map(|_| (0..f).map(|_| rng.normal()).collect())
        .collect();
    let width = (config.utterances.max(1) - 1).to_string().len();
    let mut utterances = Vec::with_capacity(config.utterances);
    for u in 0..config.utterances {
        let len = rng.int_inclusive(config.min_len, config.max_len);
        let tokens: Vec<usize> = (0..len)
            .map(|_| RESERVED + rng.int_inclusive(0, config.tokens - 1))
            .collect();
        let mut data = Vec::new();
        let mut frames = 0;
        for &tok in &tokens {
            let dur = rng.int_inclusive(config.min_frames_per_token, config.max_frames_per_token);
            for _ in 0..dur {
                for &p in &prototypes[tok - RESERVED] {
                    let noise = if config.noise_std > 0.0 {
                        config.noise_std * rng.normal()
                    } else {
                        0.0
                    };
                    data.push(p + noise);
                }
            }
            frames += dur;
        }
        utterances.push(Utterance {
            id: format!("utt{u:0width$}"),
            features: Tensor::matrix(frames, f, data),
            tokens,
        });
    }
    Ok(Dataset {
        vocab_size: config.vocab_size(),
        feature_dim: f,
        utterances,
    })
}

pub(crate) fn parse_manifest(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| {
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                return None;
            }
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn encode_dataset(dataset: &Dataset) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    let manifest = format!(
        "vocab_size={}\nfeature_dim={}\nutterances={}\n",
        dataset.vocab_size,
        dataset.feature_dim,
        dataset.utterances.len()
    );
    w.string(&manifest);
    for u in &dataset.utterances {
        w.string(&u.id);
        w.u32(u.tokens.len() as u32);
        for &t in &u.tokens {
            w.u32(t as u32);
        }
        w.u32(u.features.rows() as u32);
        w.u32(u.features.cols() as u32);
        for &v in u.features.data() {
            w.f32(v as f32);
        }
    }
    w.into_inner()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let manifest_at = r.offset();
    let manifest = parse_manifest(&r.string()?);
    let field = |key: &str| -> Result<usize> {
        manifest
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: manifest_at,
                message: format!("manifest lacks a numeric `{key}`"),
            })
    };
    let vocab_size = field("vocab_size")?;
    let feature_dim = field("feature_dim")?;
    let count = field("utterances")?;
    let mut utterances = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.string()?;
        let n = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let at = r.offset();
            let t = r.u32()? as usize;
            if t >= vocab_size {
                return Err(Error::Parse {
                    offset: at,
                    message: format!("token {t} outside vocab {vocab_size}"),
                });
            }
            tokens.push(t);
        }
        let frames = r.u32()? as usize;
        let at = r.offset();
        let f = r.u32()? as usize;
        if f != feature_dim {
            return Err(Error::Parse {
                offset: at,
                message: format!("utterance `{id}` has width {f}, manifest says {feature_dim}"),
            });
        }
        let data = r.f32s(frames * f)?;
        utterances.push(Utterance {
            id,
            features: Tensor::matrix(frames, f, data),
            tokens,
        });
    }
    if !r.is_at_end() {
        return Err(Error::Parse {
            offset: r.offset(),
            message: "trailing bytes after last utterance".into(),
        });
    }
    Ok(Dataset {
        vocab_size,
        feature_dim,
        utterances,
    })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(dataset)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by `max(1, len(reference))`.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    edit_distance(hyp, reference) as f64 / reference.len().max(1) as f64
}

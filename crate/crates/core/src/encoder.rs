//! Sentence encoders: a hashed bag-of-words encoder with a trainable
//! residual layer, and a lookup table of precomputed embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuralcore::layers::Linear;
use crate::neuralcore::{Graph, Mode, NnError, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_ENCODER_DIM: usize = 768;
pub const DEFAULT_VOCAB_HASH_DIM: usize = 4096;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("no precomputed embedding for {0:?}")]
    Miss(String),
    #[error("{path}:{line}: {msg}")]
    Load {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Maps a sentence to a fixed-length vector, optionally with trainable
/// parameters living in the model's [`ParamStore`].
pub trait SentenceEncoder {
    fn dim(&self) -> usize;

    /// `[1, dim]` graph node for `text`.
    fn encode_var(&self, g: &mut Graph, store: &ParamStore, text: &str) -> Result<Var, EncoderError>;

    /// Parameters tagged for the encoder learning-rate group.
    fn trainable_params(&self) -> Vec<ParamId>;

    fn encode(&self, store: &ParamStore, text: &str) -> Result<Vec<f64>, EncoderError> {
        let mut g = Graph::new(Mode::Eval);
        let v = self.encode_var(&mut g, store, text)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn is_separator(c: char) -> bool {
    c.is_whitespace()
        || c.is_ascii_punctuation()
        || matches!(c, '।' | '॥' | '“' | '”' | '‘' | '’' | '…' | '¿' | '¡')
}

/// Lowercased tokens split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(is_separator)
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EncoderConfig {
    Hashed {
        dim: usize,
        vocab_hash_dim: usize,
        seed: u64,
    },
    Precomputed {
        path: PathBuf,
        strict: bool,
    },
}

#[derive(Clone, Debug)]
pub struct HashedProjectionEncoder {
    dim: usize,
    vocab_hash_dim: usize,
    seed: u64,
    tune: Linear,
    sentinel: ParamId,
}

impl HashedProjectionEncoder {
    /// Registers `encoder.tune.*` (zero-initialised, so the untuned encoder
    /// is the frozen projection) and `encoder.sentinel` in `store`.
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        vocab_hash_dim: usize,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        if vocab_hash_dim == 0 {
            return Err(NnError::Invalid {
                op: "encoder",
                detail: "vocab_hash_dim must be positive".into(),
            }
            .into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e17_1e1a);
        let tune = Linear::new(store, "encoder.tune", dim, dim, true, ParamGroup::Encoder, &mut rng)?;
        store.get_mut(tune.weight).value.fill(0.0);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let sentinel = store.register(
            "encoder.sentinel",
            ParamGroup::Encoder,
            Tensor::row((0..dim).map(|_| normal.sample(&mut rng)).collect()),
        )?;
        Ok(Self {
            dim,
            vocab_hash_dim,
            seed,
            tune,
            sentinel,
        })
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig::Hashed {
            dim: self.dim,
            vocab_hash_dim: self.vocab_hash_dim,
            seed: self.seed,
        }
    }

    pub fn tune_layer(&self) -> &Linear {
        &self.tune
    }

    pub fn sentinel_param(&self) -> ParamId {
        self.sentinel
    }

    /// Row `bucket` of the frozen `vocab_hash_dim × dim` projection. Rows are
    /// regenerated from `(seed, bucket)` instead of being stored.
    pub fn projection_row(&self, bucket: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(bucket as u64 + 1);
        (0..self.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.vocab_hash_dim as u64) as usize
    }

    /// L2-normalised bucket counts as sparse `(bucket, weight)` pairs, sorted
    /// by bucket. Empty when the text has no tokens.
    pub fn bag_of_buckets(&self, text: &str) -> Vec<(usize, f64)> {
        let mut counts: Vec<(usize, f64)> = Vec::new();
        let mut buckets: Vec<usize> = tokenize(text).iter().map(|t| self.bucket(t)).collect();
        buckets.sort_unstable();
        for b in buckets {
            match counts.last_mut() {
                Some((last, c)) if *last == b => *c += 1.0,
                _ => counts.push((b, 1.0)),
            }
        }
        let norm = counts.iter().map(|(_, c)| c * c).sum::<f64>().sqrt();
        counts.iter_mut().for_each(|(_, c)| *c /= norm);
        counts
    }

    /// Frozen part of the encoding (before the tune layer); `None` for text
    /// without tokens.
    pub fn project(&self, text: &str) -> Option<Vec<f64>> {
        let bag = self.bag_of_buckets(text);
        if bag.is_empty() {
            return None;
        }
        let mut out = vec![0.0; self.dim];
        for (bucket, weight) in bag {
            for (o, r) in out.iter_mut().zip(self.projection_row(bucket)) {
                *o += weight * r;
            }
        }
        Some(out)
    }
}

impl SentenceEncoder for HashedProjectionEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    /// `proj + tune(proj)`, or the sentinel vector for text without tokens.
    fn encode_var(&self, g: &mut Graph, store: &ParamStore, text: &str) -> Result<Var, EncoderError> {
        match self.project(text) {
            None => Ok(g.param(store, self.sentinel)?),
            Some(p) => {
                let proj = g.constant(Tensor::row(p))?;
                let tuned = self.tune.forward(g, store, proj)?;
                Ok(g.add(proj, tuned)?)
            }
        }
    }

    fn trainable_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tune.weight];
        ids.extend(self.tune.bias);
        ids.push(self.sentinel);
        ids
    }
}

#[derive(Clone, Debug)]
pub struct PrecomputedEncoder {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
    strict: bool,
    path: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRow {
    text: String,
    vec: Vec<f64>,
}

impl PrecomputedEncoder {
    pub fn dim_of(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig::Precomputed {
            path: self.path.clone(),
            strict: self.strict,
        }
    }

    /// `""` row when present, otherwise zeros.
    fn sentinel(&self) -> Vec<f64> {
        self.table
            .get("")
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dim])
    }

    pub fn lookup(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        match self.table.get(text) {
            Some(v) => Ok(v.clone()),
            None if text.is_empty() || !self.strict => Ok(self.sentinel()),
            None => Err(EncoderError::Miss(text.to_string())),
        }
    }
}

impl SentenceEncoder for PrecomputedEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_var(&self, g: &mut Graph, _store: &ParamStore, text: &str) -> Result<Var, EncoderError> {
        Ok(g.constant(Tensor::row(self.lookup(text)?))?)
    }

    fn trainable_params(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

/// Reads a JSONL table of `{"text": ..., "vec": [...]}` rows (strict lookup).
pub fn load_precomputed(path: &Path) -> Result<PrecomputedEncoder, EncoderError> {
    let io = |source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    };
    let load_err = |line: usize, msg: String| EncoderError::Load {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let file = File::open(path).map_err(io)?;
    let mut table = HashMap::new();
    let mut dim = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let row: EmbeddingRow =
            serde_json::from_str(&line).map_err(|e| load_err(i + 1, e.to_string()))?;
        if row.vec.is_empty() || row.vec.iter().any(|v| !v.is_finite()) {
            return Err(load_err(i + 1, "vector must be non-empty and finite".into()));
        }
        match dim {
            None => dim = Some(row.vec.len()),
            Some(d) if d != row.vec.len() => {
                return Err(load_err(
                    i + 1,
                    format!("dimension {} differs from {d}", row.vec.len()),
                ))
            }
            Some(_) => {}
        }
        if table.insert(row.text.clone(), row.vec).is_some() {
            return Err(load_err(i + 1, format!("duplicate text {:?}", row.text)));
        }
    }
    let dim = dim.ok_or_else(|| load_err(0, "no embeddings".into()))?;
    Ok(PrecomputedEncoder {
        dim,
        table,
        strict: true,
        path: path.to_path_buf(),
    })
}

/// Writes a precomputed-embedding table in key order.
pub fn write_precomputed<W: Write>(mut w: W, rows: &[(String, Vec<f64>)]) -> std::io::Result<()> {
    for (text, vec) in rows {
        let row = EmbeddingRow {
            text: text.clone(),
            vec: vec.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&row)?)?;
    }
    Ok(())
}

/// Encoder selected by configuration.
#[derive(Clone, Debug)]
pub enum Encoder {
    Hashed(HashedProjectionEncoder),
    Precomputed(PrecomputedEncoder),
}

impl Encoder {
    pub fn build(store: &mut ParamStore, config: &EncoderConfig) -> Result<Self, EncoderError> {
        match config {
            EncoderConfig::Hashed {
                dim,
                vocab_hash_dim,
                seed,
            } => Ok(Encoder::Hashed(HashedProjectionEncoder::new(
                store,
                *dim,
                *vocab_hash_dim,
                *seed,
            )?)),
            EncoderConfig::Precomputed { path, strict } => {
                let mut enc = load_precomputed(path)?;
                enc.set_strict(*strict);
                Ok(Encoder::Precomputed(enc))
            }
        }
    }

    pub fn config(&self) -> EncoderConfig {
        match self {
            Encoder::Hashed(e) => e.config(),
            Encoder::Precomputed(e) => e.config(),
        }
    }
}

impl SentenceEncoder for Encoder {
    fn dim(&self) -> usize {
        match self {
            Encoder::Hashed(e) => e.dim(),
            Encoder::Precomputed(e) => e.dim(),
        }
    }

    fn encode_var(&self, g: &mut Graph, store: &ParamStore, text: &str) -> Result<Var, EncoderError> {
        match self {
            Encoder::Hashed(e) => e.encode_var(g, store, text),
            Encoder::Precomputed(e) => e.encode_var(g, store, text),
        }
    }

    fn trainable_params(&self) -> Vec<ParamId> {
        match self {
            Encoder::Hashed(e) => e.trainable_params(),
            Encoder::Precomputed(e) => e.trainable_params(),
        }
    }
}
